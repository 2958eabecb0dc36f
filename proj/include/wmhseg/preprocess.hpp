#pragma once

// Axial slicing and the fixed-size model input contract: center crop or
// symmetric zero-pad to 256x256, then min-max normalization to [0,1].

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wmhseg/tensor.hpp"
#include "wmhseg/volume.hpp"

namespace wmhseg {

inline constexpr std::size_t kModelSize = 256;

/// 2D image with x varying fastest (matches a z-slice of a Volume).
struct Slice2D {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<float> data;

  Slice2D() = default;
  Slice2D(std::size_t x, std::size_t y, float fill = 0.0f) : nx(x), ny(y), data(x * y, fill) {}

  float& at(std::size_t x, std::size_t y) { return data[x + nx * y]; }
  float at(std::size_t x, std::size_t y) const { return data[x + nx * y]; }
};

inline std::vector<Slice2D> to_axial_slices(const Volume& vol) {
  std::vector<Slice2D> out;
  out.reserve(vol.nz());
  const std::size_t plane = vol.plane();
  for (std::size_t z = 0; z < vol.nz(); ++z) {
    Slice2D s(vol.nx(), vol.ny());
    std::copy_n(vol.data.begin() + static_cast<std::ptrdiff_t>(z * plane), plane, s.data.begin());
    out.push_back(std::move(s));
  }
  return out;
}

/// Placement of an original axis inside the fixed-size canvas.
struct AxisPlacement {
  std::size_t original = 0;
  std::size_t crop_offset = 0;  // first retained source index
  std::size_t pad_low = 0;      // canvas index of the first retained voxel
  std::size_t kept = 0;         // number of retained voxels

  static AxisPlacement compute(std::size_t n, std::size_t target) {
    AxisPlacement p;
    p.original = n;
    if (n > target) {
      p.crop_offset = (n - target) / 2;
      p.kept = target;
    } else {
      p.pad_low = (target - n) / 2;  // odd remainder goes to the high side
      p.kept = n;
    }
    return p;
  }

  std::size_t pad_high(std::size_t target) const { return target - pad_low - kept; }
};

/// Everything needed to map a model-space mask back onto the source slice.
struct SliceProvenance {
  std::string source_id;
  std::size_t slice_index = 0;
  AxisPlacement x, y;
  float norm_min = 0;
  float norm_max = 0;
};

struct IntensityRange {
  float min = 0;
  float max = 0;
};

/// Min/max over nonzero voxels; nullopt when there are none.
inline std::optional<IntensityRange> foreground_range(std::span<const float> values) {
  std::optional<IntensityRange> r;
  for (float v : values) {
    if (v == 0.0f) continue;
    if (!r) {
      r = IntensityRange{v, v};
    } else {
      r->min = std::min(r->min, v);
      r->max = std::max(r->max, v);
    }
  }
  return r;
}

struct PreprocessedSlice {
  Slice2D image;  // kModelSize x kModelSize, values in [0,1]
  SliceProvenance provenance;
};

/// Places a slice on the canvas without changing intensities.
inline Slice2D place_on_canvas(const Slice2D& src, const AxisPlacement& px, const AxisPlacement& py,
                               std::size_t size = kModelSize) {
  Slice2D out(size, size);
  for (std::size_t j = 0; j < py.kept; ++j) {
    for (std::size_t i = 0; i < px.kept; ++i) {
      out.at(px.pad_low + i, py.pad_low + j) = src.at(px.crop_offset + i, py.crop_offset + j);
    }
  }
  return out;
}

/// Crop/pad to 256x256 and normalize with the foreground (nonzero) range of the
/// retained region, or with `range` when given (per-volume normalization).
/// Padding stays exactly 0; a constant slice maps to all zeros.
inline PreprocessedSlice preprocess_slice(const Slice2D& slice,
                                          std::optional<IntensityRange> range = std::nullopt) {
  PreprocessedSlice out;
  auto& prov = out.provenance;
  prov.x = AxisPlacement::compute(slice.nx, kModelSize);
  prov.y = AxisPlacement::compute(slice.ny, kModelSize);
  out.image = place_on_canvas(slice, prov.x, prov.y);
  if (!range) {
    Slice2D retained(prov.x.kept, prov.y.kept);
    for (std::size_t j = 0; j < prov.y.kept; ++j) {
      for (std::size_t i = 0; i < prov.x.kept; ++i) {
        retained.at(i, j) = slice.at(prov.x.crop_offset + i, prov.y.crop_offset + j);
      }
    }
    range = foreground_range(retained.data);
  }
  if (!range || !(range->max > range->min)) {
    std::fill(out.image.data.begin(), out.image.data.end(), 0.0f);
    return out;
  }
  prov.norm_min = range->min;
  prov.norm_max = range->max;
  const double inv = 1.0 / (static_cast<double>(range->max) - range->min);
  for (std::size_t j = 0; j < prov.y.kept; ++j) {
    for (std::size_t i = 0; i < prov.x.kept; ++i) {
      float& v = out.image.at(prov.x.pad_low + i, prov.y.pad_low + j);
      const double n = (static_cast<double>(v) - range->min) * inv;
      v = static_cast<float>(std::clamp(n, 0.0, 1.0));
    }
  }
  return out;
}

/// Places a binary mask slice on the canvas with the same geometry as its image.
inline Slice2D preprocess_mask(const Slice2D& mask) {
  return place_on_canvas(mask, AxisPlacement::compute(mask.nx, kModelSize),
                         AxisPlacement::compute(mask.ny, kModelSize));
}

/// Inverse placement of a canvas mask; voxels outside the retained region are 0.
inline Slice2D unpreprocess_mask(const Slice2D& mask, const SliceProvenance& prov) {
  if (prov.x.original == 0 || prov.y.original == 0) {
    throw ValidationError("unpreprocess_mask: provenance lacks original dimensions");
  }
  if (mask.nx != kModelSize || mask.ny != kModelSize) {
    throw DimensionError("unpreprocess_mask expects a 256x256 mask");
  }
  Slice2D out(prov.x.original, prov.y.original);
  for (std::size_t j = 0; j < prov.y.kept; ++j) {
    for (std::size_t i = 0; i < prov.x.kept; ++i) {
      out.at(prov.x.crop_offset + i, prov.y.crop_offset + j) =
          mask.at(prov.x.pad_low + i, prov.y.pad_low + j);
    }
  }
  return out;
}

/// Reassembles z-slices into a volume with the geometry of `like`.
inline Volume assemble_volume(const std::vector<Slice2D>& slices, const Volume& like) {
  if (slices.size() != like.nz()) throw DimensionError("slice count does not match volume depth");
  Volume out = Volume::like(like);
  for (std::size_t z = 0; z < slices.size(); ++z) {
    if (slices[z].nx != like.nx() || slices[z].ny != like.ny()) {
      throw DimensionError("slice " + std::to_string(z) + " has wrong in-plane size");
    }
    std::copy(slices[z].data.begin(), slices[z].data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(z * like.plane()));
  }
  return out;
}

/// Model input batch [B,1,256,256] with per-slice provenance.
struct SliceBatch {
  Tensor<float> tensor;
  std::vector<SliceProvenance> provenance;
};

inline SliceBatch make_slice_batch(const std::vector<PreprocessedSlice>& slices) {
  SliceBatch batch;
  batch.tensor = Tensor<float>(Shape{slices.size(), 1, kModelSize, kModelSize});
  const std::size_t plane = kModelSize * kModelSize;
  for (std::size_t b = 0; b < slices.size(); ++b) {
    std::copy(slices[b].image.data.begin(), slices[b].image.data.end(), batch.tensor.ptr() + b * plane);
    batch.provenance.push_back(slices[b].provenance);
  }
  return batch;
}

}  // namespace wmhseg
