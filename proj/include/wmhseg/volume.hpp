#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wmhseg/errors.hpp"
#include "wmhseg/loss.hpp"

namespace wmhseg {

/// Orientation fields of a NIfTI-1 header, carried through unchanged.
struct NiftiOrientation {
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 3> quatern{0, 0, 0};
  std::array<float, 3> qoffset{0, 0, 0};
  std::array<float, 12> srow{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  float qfac = 1;

  friend bool operator==(const NiftiOrientation&, const NiftiOrientation&) = default;
};

/// 3D scalar image with x varying fastest, then y, then z.
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::vector<float> data;
  std::array<float, 3> spacing{1, 1, 1};  // mm
  NiftiOrientation orientation;
  std::int16_t datatype_code = 16;  // as read from file; writes are always float32

  Volume() = default;
  Volume(std::size_t nx, std::size_t ny, std::size_t nz, std::array<float, 3> sp = {1, 1, 1})
      : dims{nx, ny, nz}, data(nx * ny * nz, 0.0f), spacing(sp) {}

  /// Same geometry and metadata, zeroed data.
  static Volume like(const Volume& other) {
    Volume v = other;
    std::fill(v.data.begin(), v.data.end(), 0.0f);
    return v;
  }

  std::size_t nx() const noexcept { return dims[0]; }
  std::size_t ny() const noexcept { return dims[1]; }
  std::size_t nz() const noexcept { return dims[2]; }
  std::size_t plane() const noexcept { return dims[0] * dims[1]; }
  std::size_t voxel_count() const noexcept { return dims[0] * dims[1] * dims[2]; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return x + dims[0] * (y + dims[1] * z);
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) noexcept { return data[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const noexcept { return data[index(x, y, z)]; }

  VoxelSpacing voxel_spacing() const { return {spacing[0], spacing[1], spacing[2]}; }

  void validate() const {
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw ValidationError("volume has an empty axis");
    if (data.size() != voxel_count()) {
      throw ValidationError("volume data size " + std::to_string(data.size()) +
                            " does not match dims");
    }
    for (float s : spacing) {
      if (!(s > 0) || !std::isfinite(s)) throw ValidationError("voxel spacing must be positive");
    }
    for (float v : data) {
      if (!std::isfinite(v)) throw ValidationError("volume contains non-finite values");
    }
  }

  bool same_geometry(const Volume& o) const { return dims == o.dims && spacing == o.spacing; }
};

}  // namespace wmhseg
