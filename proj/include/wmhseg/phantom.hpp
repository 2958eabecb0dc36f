#pragma once

// Synthetic brain-like phantoms: a bright "brain" ellipsoid with two dark
// "ventricle" ellipsoids and spherical hyperintense lesions, blurred in-plane.
// The lesion mask is the exact painted voxel set; the blur never touches it.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wmhseg/artifacts.hpp"
#include "wmhseg/errors.hpp"
#include "wmhseg/manifest.hpp"
#include "wmhseg/nifti.hpp"
#include "wmhseg/parallel.hpp"
#include "wmhseg/rng.hpp"
#include "wmhseg/volume.hpp"

namespace wmhseg {

struct PhantomConfig {
  std::size_t nx = 256, ny = 256, nz = 24;
  std::array<float, 3> spacing{1.0f, 1.0f, 3.0f};  // mm
  std::uint64_t seed = 0;
  int min_lesions = 0;
  int max_lesions = 12;
  double lesion_radius_min_mm = 1.5;
  double lesion_radius_max_mm = 8.0;
  double background = 0.0;
  double ventricle = 0.1;
  double brain = 0.45;
  double lesion = 0.9;
  double intensity_jitter = 0.03;  // uniform +- per tissue per phantom
  double blur_sigma_vox = 0.8;     // in-plane Gaussian blur of the image
  // Brain semi-axes as fractions of the volume half-extent (before +-5% jitter).
  std::array<double, 3> brain_fraction{0.80, 0.88, 1.30};

  void validate() const {
    if (nx == 0 || ny == 0 || nz == 0) throw ValidationError("phantom size must be positive");
    for (float s : spacing) {
      if (!(s > 0)) throw ValidationError("phantom spacing must be positive");
    }
    if (min_lesions < 0 || max_lesions < min_lesions) throw ValidationError("bad lesion count range");
    if (!(lesion_radius_min_mm > 0) || lesion_radius_max_mm < lesion_radius_min_mm) {
      throw ValidationError("bad lesion radius range");
    }
    const double j = intensity_jitter;
    if (!(background + j < ventricle - j && ventricle + j < brain - j && brain + j < lesion - j)) {
      throw ValidationError("tissue intensities must be ordered background < ventricle < brain < lesion");
    }
    const auto axes = nominal_brain_axes();
    const double smallest = std::min({axes[0], axes[1], axes[2]}) * 0.95;
    if (max_lesions > 0 && lesion_radius_max_mm >= 0.5 * smallest) {
      throw ValidationError("lesion radius " + std::to_string(lesion_radius_max_mm) +
                            " mm does not fit inside the brain ellipsoid (smallest semi-axis " +
                            std::to_string(smallest) + " mm)");
    }
  }

  std::array<double, 3> nominal_brain_axes() const {
    return {brain_fraction[0] * 0.5 * static_cast<double>(nx) * spacing[0],
            brain_fraction[1] * 0.5 * static_cast<double>(ny) * spacing[1],
            brain_fraction[2] * 0.5 * static_cast<double>(nz) * spacing[2]};
  }
};

struct Lesion {
  std::array<double, 3> center;  // mm, relative to the volume center
  double radius;                 // mm
};

struct Phantom {
  Volume image;
  Volume mask;
  std::array<double, 3> brain_axes{};  // mm
  std::vector<Lesion> lesions;
  std::size_t painted_voxels = 0;

  /// Physical position (mm) of a voxel center relative to the volume center.
  std::array<double, 3> position(std::size_t x, std::size_t y, std::size_t z) const {
    return {(static_cast<double>(x) - 0.5 * static_cast<double>(image.nx() - 1)) * image.spacing[0],
            (static_cast<double>(y) - 0.5 * static_cast<double>(image.ny() - 1)) * image.spacing[1],
            (static_cast<double>(z) - 0.5 * static_cast<double>(image.nz() - 1)) * image.spacing[2]};
  }

  bool in_brain(const std::array<double, 3>& p) const {
    double r = 0;
    for (std::size_t i = 0; i < 3; ++i) r += (p[i] / brain_axes[i]) * (p[i] / brain_axes[i]);
    return r <= 1.0;
  }
};

namespace detail {

inline bool in_ellipsoid(const std::array<double, 3>& p, const std::array<double, 3>& c,
                         const std::array<double, 3>& a) {
  double r = 0;
  for (std::size_t i = 0; i < 3; ++i) r += ((p[i] - c[i]) / a[i]) * ((p[i] - c[i]) / a[i]);
  return r <= 1.0;
}

inline void blur_in_plane(Volume& vol, double sigma) {
  if (sigma <= 0) return;
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (long i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (auto& w : k) w /= total;
  const long nx = static_cast<long>(vol.nx()), ny = static_cast<long>(vol.ny());
  std::vector<double> tmp(vol.plane());
  for (std::size_t z = 0; z < vol.nz(); ++z) {
    float* s = vol.data.data() + z * vol.plane();
    for (long y = 0; y < ny; ++y) {
      for (long x = 0; x < nx; ++x) {
        double acc = 0;
        for (long i = -radius; i <= radius; ++i) {
          const long xx = x + i;
          if (xx >= 0 && xx < nx) acc += k[static_cast<std::size_t>(i + radius)] * s[xx + nx * y];
        }
        tmp[static_cast<std::size_t>(x + nx * y)] = acc;
      }
    }
    for (long y = 0; y < ny; ++y) {
      for (long x = 0; x < nx; ++x) {
        double acc = 0;
        for (long i = -radius; i <= radius; ++i) {
          const long yy = y + i;
          if (yy >= 0 && yy < ny) acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(x + nx * yy)];
        }
        s[x + nx * y] = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace detail

inline Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Phantom ph;
  ph.image = Volume(cfg.nx, cfg.ny, cfg.nz, cfg.spacing);
  ph.mask = Volume(cfg.nx, cfg.ny, cfg.nz, cfg.spacing);
  const auto nominal = cfg.nominal_brain_axes();
  for (std::size_t i = 0; i < 3; ++i) ph.brain_axes[i] = nominal[i] * rng.uniform(0.95, 1.0);
  const auto& a = ph.brain_axes;

  auto jitter = [&](double level) {
    return level + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter);
  };
  const double brain_level = jitter(cfg.brain);
  const double ventricle_level = jitter(cfg.ventricle);
  const double bg_level = std::max(0.0, cfg.background);

  // Two lateral ventricles, mirrored about the midline.
  const double vx = a[0] * rng.uniform(0.10, 0.16);
  const std::array<double, 3> v_axes{a[0] * rng.uniform(0.06, 0.09), a[1] * rng.uniform(0.25, 0.35),
                                     a[2] * rng.uniform(0.35, 0.5)};
  const std::array<std::array<double, 3>, 2> v_centers{{{-vx, a[1] * 0.05, 0.0}, {vx, a[1] * 0.05, 0.0}}};

  const int n_lesions = static_cast<int>(rng.uniform_int(cfg.min_lesions, cfg.max_lesions));
  for (int l = 0; l < n_lesions; ++l) {
    const double r = rng.uniform(cfg.lesion_radius_min_mm, cfg.lesion_radius_max_mm);
    std::array<double, 3> inner{a[0] - r, a[1] - r, a[2] - r};
    // Keep the center inside the imaged field of view so every lesion is seen.
    const auto corner = ph.position(cfg.nx - 1, cfg.ny - 1, cfg.nz - 1);
    std::array<double, 3> box{};
    for (std::size_t i = 0; i < 3; ++i) box[i] = std::min(inner[i], corner[i]);
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::array<double, 3> c{rng.uniform(-box[0], box[0]), rng.uniform(-box[1], box[1]),
                              rng.uniform(-box[2], box[2])};
      if (!detail::in_ellipsoid(c, {0, 0, 0}, inner)) continue;
      // The shrunken ellipsoid does not guarantee containment for elongated
      // shapes; check the sphere's extreme points along each axis and diagonal.
      bool inside = true;
      for (int dx = -1; dx <= 1 && inside; ++dx) {
        for (int dy = -1; dy <= 1 && inside; ++dy) {
          for (int dz = -1; dz <= 1 && inside; ++dz) {
            const double norm = std::sqrt(static_cast<double>(dx * dx + dy * dy + dz * dz));
            if (norm == 0) continue;
            const std::array<double, 3> p{c[0] + r * dx / norm, c[1] + r * dy / norm, c[2] + r * dz / norm};
            inside = detail::in_ellipsoid(p, {0, 0, 0}, a);
          }
        }
      }
      if (inside) {
        ph.lesions.push_back({c, r});
        break;
      }
    }
  }
  std::vector<double> lesion_levels;
  for (std::size_t l = 0; l < ph.lesions.size(); ++l) lesion_levels.push_back(jitter(cfg.lesion));

  for (std::size_t z = 0; z < cfg.nz; ++z) {
    for (std::size_t y = 0; y < cfg.ny; ++y) {
      for (std::size_t x = 0; x < cfg.nx; ++x) {
        const auto p = ph.position(x, y, z);
        double v = bg_level;
        if (ph.in_brain(p)) {
          v = brain_level;
          if (detail::in_ellipsoid(p, v_centers[0], v_axes) || detail::in_ellipsoid(p, v_centers[1], v_axes)) {
            v = ventricle_level;
          }
          for (std::size_t l = 0; l < ph.lesions.size(); ++l) {
            const auto& les = ph.lesions[l];
            double d2 = 0;
            for (std::size_t i = 0; i < 3; ++i) d2 += (p[i] - les.center[i]) * (p[i] - les.center[i]);
            if (d2 <= les.radius * les.radius) {
              v = lesion_levels[l];
              if (ph.mask.at(x, y, z) == 0.0f) {
                ph.mask.at(x, y, z) = 1.0f;
                ++ph.painted_voxels;
              }
            }
          }
        }
        ph.image.at(x, y, z) = static_cast<float>(v);
      }
    }
  }
  detail::blur_in_plane(ph.image, cfg.blur_sigma_vox);
  return ph;
}

inline std::string source_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "src%04zu", index);
  return buf;
}

/// Writes n phantoms with masks and four corrupted variants each (5n images),
/// plus a sidecar per corrupted image and `manifest.csv`.
inline Manifest generate_dataset(std::size_t n, std::uint64_t master_seed,
                                 const std::filesystem::path& out_dir, PhantomConfig base = {},
                                 const ArtifactRanges& ranges = {}) {
  if (n < 1) throw ValidationError("dataset needs at least one phantom");
  base.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::vector<ManifestEntry>> rows(n);
  parallel_for(n, [&](std::size_t i) {
    const std::string id = source_name(i);
    PhantomConfig cfg = base;
    cfg.seed = derive_seed(master_seed, static_cast<std::uint64_t>(i));
    const Phantom ph = generate_phantom(cfg);
    auto emit = [&](const Volume& v, const std::string& role, std::uint64_t seed) {
      const std::string file = id + "_" + role + ".nii";
      nifti::write(v, (out_dir / file).string());
      rows[i].push_back({file, role, seed, id});
    };
    emit(ph.image, "clean", cfg.seed);
    emit(ph.mask, "mask", cfg.seed);
    for (const auto& c : corrupt_scan(ph.image, derive_seed(cfg.seed, "corrupt"), ranges)) {
      const std::string role = to_string(c.spec.kind);
      emit(c.volume, role, c.spec.seed);
      write_spec_sidecar((out_dir / (id + "_" + role + ".spec.txt")).string(), c.spec);
    }
  });
  Manifest m;
  m.base_dir = out_dir;
  for (auto& r : rows) m.entries.insert(m.entries.end(), r.begin(), r.end());
  m.write(out_dir / "manifest.csv");
  return m;
}

}  // namespace wmhseg
