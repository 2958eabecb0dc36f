#pragma once

// Simulated MR acquisition artifacts: additive Gaussian noise, multiplicative
// smooth bias field, k-space ghosting, and bias followed by noise.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wmhseg/errors.hpp"
#include "wmhseg/fft.hpp"
#include "wmhseg/rng.hpp"
#include "wmhseg/volume.hpp"

namespace wmhseg {

enum class ArtifactKind { kNoise, kBias, kGhosting, kNoiseBias };
enum class GhostAxis { kRow, kCol };

inline constexpr std::array<ArtifactKind, 4> kAllArtifactKinds{
    ArtifactKind::kNoise, ArtifactKind::kBias, ArtifactKind::kGhosting, ArtifactKind::kNoiseBias};

/// Manifest role names of the corrupted variants, in kAllArtifactKinds order.
inline const std::array<std::string, 4> kArtifactRoles{"noise", "bias", "ghosting", "noise_bias"};

inline std::string to_string(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::kNoise: return "noise";
    case ArtifactKind::kBias: return "bias";
    case ArtifactKind::kGhosting: return "ghosting";
    case ArtifactKind::kNoiseBias: return "noise_bias";
  }
  return "?";
}

inline ArtifactKind parse_artifact_kind(const std::string& s) {
  for (auto k : kAllArtifactKinds) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown artifact kind '" + s + "' (valid: noise, bias, ghosting, noise_bias)");
}

inline std::string to_string(GhostAxis a) { return a == GhostAxis::kRow ? "row" : "col"; }

inline GhostAxis parse_ghost_axis(const std::string& s) {
  if (s == "row") return GhostAxis::kRow;
  if (s == "col") return GhostAxis::kCol;
  throw ValidationError("unknown ghost axis '" + s + "' (valid: row, col)");
}

/// Sampling ranges for artifact parameters.
struct ArtifactRanges {
  double noise_std_min = 0.02;
  double noise_std_max = 0.10;
  int bias_order = 3;
  double bias_coeff_min = -0.5;
  double bias_coeff_max = 0.5;
  int ghost_count_min = 2;
  int ghost_count_max = 6;
  double ghost_intensity_min = 0.3;
  double ghost_intensity_max = 0.9;
};

/// One fully realized corruption. `seed` drives the noise realization; every
/// other parameter is stored explicitly so the spec replays exactly.
struct ArtifactSpec {
  ArtifactKind kind = ArtifactKind::kNoise;
  std::uint64_t seed = 0;
  double noise_std = 0;  // fraction of the volume's intensity range
  int bias_order = 3;
  std::vector<double> bias_coeffs;  // ordered as bias_monomials(bias_order)
  int ghost_count = 4;
  GhostAxis ghost_axis = GhostAxis::kRow;
  double ghost_intensity = 0;  // in [0,1]

  friend bool operator==(const ArtifactSpec&, const ArtifactSpec&) = default;
};

/// Exponents (i,j,k) of x^i y^j z^k with i+j+k <= order.
inline std::vector<std::array<int, 3>> bias_monomials(int order) {
  if (order < 0) throw ValidationError("bias_order must be >= 0");
  std::vector<std::array<int, 3>> out;
  for (int i = 0; i <= order; ++i) {
    for (int j = 0; j <= order - i; ++j) {
      for (int k = 0; k <= order - i - j; ++k) out.push_back({i, j, k});
    }
  }
  return out;
}

inline ArtifactSpec sample_artifact_spec(ArtifactKind kind, std::uint64_t seed,
                                         const ArtifactRanges& ranges = {}) {
  ArtifactSpec s;
  s.kind = kind;
  s.seed = seed;
  Rng rng(derive_seed(seed, "params"));
  const bool noise = kind == ArtifactKind::kNoise || kind == ArtifactKind::kNoiseBias;
  const bool bias = kind == ArtifactKind::kBias || kind == ArtifactKind::kNoiseBias;
  if (noise) s.noise_std = rng.uniform(ranges.noise_std_min, ranges.noise_std_max);
  s.bias_order = ranges.bias_order;
  if (bias) {
    for (std::size_t m = 0; m < bias_monomials(ranges.bias_order).size(); ++m) {
      s.bias_coeffs.push_back(rng.uniform(ranges.bias_coeff_min, ranges.bias_coeff_max));
    }
  }
  if (kind == ArtifactKind::kGhosting) {
    s.ghost_count = static_cast<int>(rng.uniform_int(ranges.ghost_count_min, ranges.ghost_count_max));
    s.ghost_axis = rng.uniform() < 0.5 ? GhostAxis::kRow : GhostAxis::kCol;
    s.ghost_intensity = rng.uniform(ranges.ghost_intensity_min, ranges.ghost_intensity_max);
  }
  return s;
}

// ---------------------------------------------------------------------------

/// vol + N(0, (noise_std * range(vol))^2), clipped at 0.
inline Volume add_noise(const Volume& vol, const ArtifactSpec& spec) {
  if (spec.noise_std < 0) throw ValidationError("noise_std must be >= 0");
  Volume out = vol;
  if (vol.data.empty()) return out;
  const auto [lo, hi] = std::minmax_element(vol.data.begin(), vol.data.end());
  const double sigma = spec.noise_std * (static_cast<double>(*hi) - *lo);
  if (sigma == 0) return out;
  Rng rng(derive_seed(spec.seed, "noise"));
  for (auto& v : out.data) {
    const double n = static_cast<double>(v) + sigma * rng.normal();
    v = static_cast<float>(n < 0 ? 0 : n);
  }
  return out;
}

/// Normalized coordinate in [-1,1] of index i along an axis of n voxels.
inline double normalized_coord(std::size_t i, std::size_t n) {
  return n <= 1 ? 0.0 : 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0;
}

/// The multiplicative field exp(P(x,y,z)); strictly positive.
inline std::vector<double> bias_field(const Volume& vol, const ArtifactSpec& spec) {
  const auto monos = bias_monomials(spec.bias_order);
  if (!spec.bias_coeffs.empty() && spec.bias_coeffs.size() != monos.size()) {
    throw ValidationError("bias field needs " + std::to_string(monos.size()) + " coefficients for order " +
                          std::to_string(spec.bias_order) + ", got " +
                          std::to_string(spec.bias_coeffs.size()));
  }
  std::vector<double> field(vol.voxel_count(), 1.0);
  if (spec.bias_coeffs.empty()) return field;
  const int order = spec.bias_order;
  auto powers = [order](double c) {
    std::vector<double> p(static_cast<std::size_t>(order) + 1, 1.0);
    for (std::size_t e = 1; e < p.size(); ++e) p[e] = p[e - 1] * c;
    return p;
  };
  for (std::size_t z = 0; z < vol.nz(); ++z) {
    const auto pz = powers(normalized_coord(z, vol.nz()));
    for (std::size_t y = 0; y < vol.ny(); ++y) {
      const auto py = powers(normalized_coord(y, vol.ny()));
      for (std::size_t x = 0; x < vol.nx(); ++x) {
        const auto px = powers(normalized_coord(x, vol.nx()));
        double p = 0;
        for (std::size_t m = 0; m < monos.size(); ++m) {
          const auto& e = monos[m];
          p += spec.bias_coeffs[m] * px[static_cast<std::size_t>(e[0])] *
               py[static_cast<std::size_t>(e[1])] * pz[static_cast<std::size_t>(e[2])];
        }
        field[vol.index(x, y, z)] = std::exp(p);
      }
    }
  }
  return field;
}

inline Volume apply_bias_field(const Volume& vol, const ArtifactSpec& spec) {
  const auto field = bias_field(vol, spec);
  Volume out = vol;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = static_cast<float>(static_cast<double>(out.data[i]) * field[i]);
  }
  return out;
}

/// Whether k-space line `k` of `n` lies in the protected central 5% band.
inline bool is_central_line(std::size_t k, std::size_t n) {
  const long f = k <= n / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(n);
  const auto half_band = static_cast<long>(0.025 * static_cast<double>(n));
  return std::labs(f) <= half_band;
}

/// Per z-slice: 2D FFT, scale every ghost_count-th line along the ghost axis by
/// (1 - ghost_intensity) outside the central band, inverse FFT, magnitude.
/// GhostAxis::kRow displaces replicas along y (k-space rows are attenuated);
/// kCol displaces them along x. Replicas sit at multiples of extent/ghost_count.
inline Volume apply_ghosting(const Volume& vol, const ArtifactSpec& spec) {
  if (spec.ghost_count < 1) throw ValidationError("ghost_count must be >= 1");
  if (spec.ghost_intensity < 0 || spec.ghost_intensity > 1) {
    throw ValidationError("ghost_intensity must lie in [0,1]");
  }
  Volume out = vol;
  const std::size_t nx = vol.nx(), ny = vol.ny();
  const auto period = static_cast<std::size_t>(spec.ghost_count);
  const double keep = 1.0 - spec.ghost_intensity;
  for (std::size_t z = 0; z < vol.nz(); ++z) {
    fft::ComplexImage img(ny, nx);  // rows = y, cols = x
    for (std::size_t y = 0; y < ny; ++y) {
      for (std::size_t x = 0; x < nx; ++x) img(y, x) = vol.at(x, y, z);
    }
    auto k = fft::fft2(std::move(img));
    if (spec.ghost_axis == GhostAxis::kRow) {
      for (std::size_t ky = 0; ky < ny; ky += period) {
        if (is_central_line(ky, ny)) continue;
        for (std::size_t kx = 0; kx < nx; ++kx) k(ky, kx) *= keep;
      }
    } else {
      for (std::size_t kx = 0; kx < nx; kx += period) {
        if (is_central_line(kx, nx)) continue;
        for (std::size_t ky = 0; ky < ny; ++ky) k(ky, kx) *= keep;
      }
    }
    const auto back = fft::ifft2(std::move(k));
    for (std::size_t y = 0; y < ny; ++y) {
      for (std::size_t x = 0; x < nx; ++x) out.at(x, y, z) = static_cast<float>(std::abs(back(y, x)));
    }
  }
  return out;
}

inline Volume apply_artifact(const Volume& vol, const ArtifactSpec& spec) {
  switch (spec.kind) {
    case ArtifactKind::kNoise: return add_noise(vol, spec);
    case ArtifactKind::kBias: return apply_bias_field(vol, spec);
    case ArtifactKind::kGhosting: return apply_ghosting(vol, spec);
    case ArtifactKind::kNoiseBias: return add_noise(apply_bias_field(vol, spec), spec);
  }
  throw ValidationError("unknown artifact kind");
}

struct CorruptedVolume {
  ArtifactSpec spec;
  Volume volume;
};

/// The four corrupted companions of a scan, in the order noise, bias,
/// ghosting, noise_bias, each seeded from `master_seed` and its kind.
inline std::vector<CorruptedVolume> corrupt_scan(const Volume& vol, std::uint64_t master_seed,
                                                 const ArtifactRanges& ranges = {}) {
  std::vector<CorruptedVolume> out;
  out.reserve(kAllArtifactKinds.size());
  for (auto kind : kAllArtifactKinds) {
    auto spec = sample_artifact_spec(kind, derive_seed(master_seed, to_string(kind)), ranges);
    out.push_back({spec, apply_artifact(vol, spec)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sidecar text format: one key=value per line.

inline std::string format_spec(const ArtifactSpec& s) {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "kind=" << to_string(s.kind) << '\n';
  os << "seed=" << s.seed << '\n';
  os << "noise_std=" << num(s.noise_std) << '\n';
  os << "bias_order=" << s.bias_order << '\n';
  os << "bias_coeffs=";
  for (std::size_t i = 0; i < s.bias_coeffs.size(); ++i) os << (i ? "," : "") << num(s.bias_coeffs[i]);
  os << '\n';
  os << "ghost_count=" << s.ghost_count << '\n';
  os << "ghost_axis=" << to_string(s.ghost_axis) << '\n';
  os << "ghost_intensity=" << num(s.ghost_intensity) << '\n';
  return os.str();
}

inline ArtifactSpec parse_spec(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("artifact sidecar: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("artifact sidecar: missing ") + key);
    return it->second;
  };
  try {
    ArtifactSpec s;
    s.kind = parse_artifact_kind(need("kind"));
    s.seed = std::stoull(need("seed"));
    s.noise_std = std::stod(need("noise_std"));
    s.bias_order = std::stoi(need("bias_order"));
    const std::string& coeffs = need("bias_coeffs");
    std::istringstream cs(coeffs);
    std::string tok;
    while (std::getline(cs, tok, ',')) {
      if (!tok.empty()) s.bias_coeffs.push_back(std::stod(tok));
    }
    s.ghost_count = std::stoi(need("ghost_count"));
    s.ghost_axis = parse_ghost_axis(need("ghost_axis"));
    s.ghost_intensity = std::stod(need("ghost_intensity"));
    return s;
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("artifact sidecar: bad number (") + e.what() + ")");
  }
}

inline void write_spec_sidecar(const std::string& path, const ArtifactSpec& spec) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << format_spec(spec);
}

inline ArtifactSpec read_spec_sidecar(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_spec(ss.str());
}

}  // namespace wmhseg
