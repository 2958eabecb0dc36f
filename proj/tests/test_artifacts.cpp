#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_support.hpp"

using namespace wmhseg;

namespace {

Volume random_volume(std::size_t nx, std::size_t ny, std::size_t nz, std::uint64_t seed) {
  Volume v(nx, ny, nz, {0.9f, 1.1f, 3.0f});
  Rng rng(seed);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform(0.0, 1.0));
  return v;
}

double max_abs(const Volume& a, const Volume& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - b.data[i]));
  return m;
}

}  // namespace

TEST(Artifacts, KindNamesRoundTripAndInvalidKindListsValidOnes) {
  for (auto k : kAllArtifactKinds) EXPECT_EQ(parse_artifact_kind(to_string(k)), k);
  try {
    parse_artifact_kind("motion");
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    for (const auto& r : kArtifactRoles) EXPECT_NE(msg.find(r), std::string::npos) << msg;
  }
}

TEST(Artifacts, SampledSpecsStayInRangesAndDependOnlyOnSeed) {
  ArtifactRanges r;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    for (auto k : kAllArtifactKinds) {
      const auto s = sample_artifact_spec(k, seed);
      EXPECT_EQ(s, sample_artifact_spec(k, seed));
      if (k == ArtifactKind::kNoise || k == ArtifactKind::kNoiseBias) {
        EXPECT_GE(s.noise_std, r.noise_std_min);
        EXPECT_LE(s.noise_std, r.noise_std_max);
      }
      for (double c : s.bias_coeffs) {
        EXPECT_GE(c, r.bias_coeff_min);
        EXPECT_LE(c, r.bias_coeff_max);
      }
      if (k == ArtifactKind::kGhosting) {
        EXPECT_GE(s.ghost_count, r.ghost_count_min);
        EXPECT_LE(s.ghost_count, r.ghost_count_max);
        EXPECT_GE(s.ghost_intensity, r.ghost_intensity_min);
        EXPECT_LE(s.ghost_intensity, r.ghost_intensity_max);
      }
    }
  }
  EXPECT_NE(sample_artifact_spec(ArtifactKind::kNoise, 1).noise_std,
            sample_artifact_spec(ArtifactKind::kNoise, 2).noise_std);
}

TEST(Artifacts, ZeroNoiseIsIdentity) {
  const auto v = random_volume(16, 12, 4, 1);
  ArtifactSpec s;
  s.kind = ArtifactKind::kNoise;
  s.noise_std = 0;
  EXPECT_EQ(add_noise(v, s).data, v.data);
}

TEST(Artifacts, NoiseStatisticsOn256Cubed) {
  // 100 everywhere except one zero voxel: range 100, no clipping at 20 sigma.
  Volume v(256, 256, 256);
  std::fill(v.data.begin(), v.data.end(), 100.0f);
  v.data[0] = 0.0f;
  ArtifactSpec s;
  s.kind = ArtifactKind::kNoise;
  s.seed = 42;
  s.noise_std = 0.05;
  const auto out = add_noise(v, s);
  double sum = 0, sum2 = 0;
  const std::size_t n = v.data.size() - 1;
  for (std::size_t i = 1; i < v.data.size(); ++i) {
    const double d = double(out.data[i]) - v.data[i];
    sum += d;
    sum2 += d * d;
  }
  const double mean = sum / n, sd = std::sqrt(sum2 / n - mean * mean);
  EXPECT_NEAR(sd, 5.0, 0.05 * 5.0);
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_EQ(add_noise(v, s).data, out.data);
}

TEST(Artifacts, NoiseIsClippedAtZero) {
  const auto v = random_volume(32, 32, 2, 3);
  ArtifactSpec s;
  s.kind = ArtifactKind::kNoise;
  s.noise_std = 0.5;
  for (float x : add_noise(v, s).data) EXPECT_GE(x, 0.0f);
}

TEST(Artifacts, ZeroBiasIsIdentityAndConstantTermScales) {
  const auto v = random_volume(10, 9, 5, 2);
  ArtifactSpec s;
  s.kind = ArtifactKind::kBias;
  s.bias_order = 2;
  s.bias_coeffs.assign(bias_monomials(2).size(), 0.0);
  EXPECT_EQ(apply_bias_field(v, s).data, v.data);
  s.bias_coeffs[0] = 0.3;  // monomial (0,0,0)
  ASSERT_EQ(bias_monomials(2)[0], (std::array<int, 3>{0, 0, 0}));
  const auto out = apply_bias_field(v, s);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    EXPECT_FLOAT_EQ(out.data[i], static_cast<float>(v.data[i] * std::exp(0.3)));
  }
}

TEST(Artifacts, BiasMonomialCount) {
  // Monomials of total degree <= d in 3 variables: C(d+3, 3).
  EXPECT_EQ(bias_monomials(0).size(), 1u);
  EXPECT_EQ(bias_monomials(3).size(), 20u);
  EXPECT_THROW(bias_monomials(-1), ValidationError);
}

TEST(Artifacts, BiasFieldPositiveOver1000Draws) {
  Volume v(9, 9, 5);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = sample_artifact_spec(ArtifactKind::kBias, seed);
    const auto f = bias_field(v, s);
    EXPECT_GT(*std::min_element(f.begin(), f.end()), 0.0) << seed;
  }
}

TEST(Artifacts, ZeroIntensityGhostingIsIdentity) {
  const auto v = random_volume(32, 24, 3, 4);
  ArtifactSpec s;
  s.kind = ArtifactKind::kGhosting;
  s.ghost_intensity = 0;
  s.ghost_count = 3;
  EXPECT_LT(max_abs(apply_ghosting(v, s), v), 1e-6);
}

TEST(Artifacts, GhostReplicasAtExtentOverCount) {
  for (auto axis : {GhostAxis::kRow, GhostAxis::kCol}) {
    for (int count : {2, 4}) {
      Volume v(64, 64, 1);
      v.at(20, 10, 0) = 1.0f;
      ArtifactSpec s;
      s.kind = ArtifactKind::kGhosting;
      s.ghost_axis = axis;
      s.ghost_count = count;
      s.ghost_intensity = 0.8;
      const auto out = apply_ghosting(v, s);
      // The strongest voxels: the source plus count-1 replicas shifted by
      // multiples of 64/count along the ghost axis.
      std::vector<std::pair<float, std::size_t>> vals;
      for (std::size_t i = 0; i < out.data.size(); ++i) vals.push_back({out.data[i], i});
      std::sort(vals.rbegin(), vals.rend());
      std::set<std::size_t> top, expected;
      for (int i = 0; i < count; ++i) top.insert(vals[static_cast<std::size_t>(i)].second);
      const std::size_t step = 64 / static_cast<std::size_t>(count);
      for (int i = 0; i < count; ++i) {
        const std::size_t off = step * static_cast<std::size_t>(i);
        expected.insert(axis == GhostAxis::kRow ? v.index(20, (10 + off) % 64, 0) : v.index((20 + off) % 64, 10, 0));
      }
      EXPECT_EQ(top, expected) << to_string(axis) << " count " << count;
      EXPECT_GT(vals[static_cast<std::size_t>(count) - 1].first, 2 * vals[static_cast<std::size_t>(count)].first);
    }
  }
}

TEST(Artifacts, GhostingKeepsGrossContrast) {
  PhantomConfig pc;
  pc.nz = 12;
  pc.seed = 5;
  const auto ph = generate_phantom(pc);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = sample_artifact_spec(ArtifactKind::kGhosting, seed);
    const auto out = apply_ghosting(ph.image, s);
    // The DC line is never attenuated, so the real part keeps the original
    // mean; taking the magnitude can only raise it.
    double a = 0, b = 0, ab = 0, aa = 0, bb = 0;
    const auto n = static_cast<double>(out.data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      const double x = ph.image.data[i], y = out.data[i];
      a += x;
      b += y;
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
    EXPECT_GE(b / a, 1.0 - 1e-6);
    const double corr = (ab - a * b / n) / std::sqrt((aa - a * a / n) * (bb - b * b / n));
    EXPECT_GT(corr, 0.9) << "seed " << seed;
  }
}

TEST(Artifacts, ParameterValidation) {
  Volume v(4, 4, 1);
  ArtifactSpec s;
  s.ghost_count = 0;
  EXPECT_THROW(apply_ghosting(v, s), ValidationError);
  s.ghost_count = 2;
  s.ghost_intensity = 1.5;
  EXPECT_THROW(apply_ghosting(v, s), ValidationError);
  ArtifactSpec b;
  b.bias_order = 2;
  b.bias_coeffs = {0.1, 0.2};
  EXPECT_THROW(apply_bias_field(v, b), ValidationError);
}

TEST(Artifacts, CorruptScanEmitsFourKindsDeterministically) {
  const auto v = random_volume(16, 16, 3, 6);
  const auto a = corrupt_scan(v, 11);
  const auto b = corrupt_scan(v, 11);
  ASSERT_EQ(a.size(), 4u);
  std::set<std::string> kinds;
  for (std::size_t i = 0; i < 4; ++i) {
    kinds.insert(to_string(a[i].spec.kind));
    EXPECT_EQ(a[i].spec, b[i].spec);
    EXPECT_EQ(a[i].volume.data, b[i].volume.data);
    EXPECT_EQ(a[i].volume.dims, v.dims);
    EXPECT_EQ(a[i].volume.spacing, v.spacing);
  }
  EXPECT_EQ(kinds, (std::set<std::string>{"noise", "bias", "ghosting", "noise_bias"}));
  EXPECT_NE(corrupt_scan(v, 12)[0].volume.data, a[0].volume.data);
}

TEST(Artifacts, NoiseBiasIsBiasThenNoise) {
  const auto v = random_volume(16, 16, 3, 7);
  const auto s = sample_artifact_spec(ArtifactKind::kNoiseBias, 3);
  const auto out = apply_artifact(v, s);
  EXPECT_EQ(out.data, add_noise(apply_bias_field(v, s), s).data);
  EXPECT_NE(out.data, apply_bias_field(add_noise(v, s), s).data);
}

TEST(Artifacts, ImageCountArithmetic) {
  // Each source contributes its clean scan plus the four corrupted variants.
  const auto v = random_volume(8, 8, 2, 8);
  const std::size_t per_source = 1 + corrupt_scan(v, 0).size();
  EXPECT_EQ(per_source * 270, 1350u);
}

TEST(Artifacts, SidecarReplayIsExact) {
  const auto dir = testing_support::temp_dir("sidecar");
  const auto v = random_volume(16, 16, 3, 9);
  for (auto k : kAllArtifactKinds) {
    const auto s = sample_artifact_spec(k, 77);
    const auto path = (dir / (to_string(k) + ".spec.txt")).string();
    write_spec_sidecar(path, s);
    const auto r = read_spec_sidecar(path);
    EXPECT_EQ(r, s);
    EXPECT_EQ(apply_artifact(v, r).data, apply_artifact(v, s).data);
  }
  EXPECT_THROW(parse_spec("kind=noise\n"), FormatError);
}
