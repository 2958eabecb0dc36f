#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_support.hpp"

using namespace wmhseg;
using testing_support::grad_check;
using testing_support::random_tensor;

namespace {

Tensor<double> binary_tensor(Shape s, std::uint64_t seed, double p = 0.5) {
  Tensor<double> t(std::move(s));
  Rng rng(seed);
  for (auto& v : t.vec()) v = rng.uniform(0, 1) < p ? 1.0 : 0.0;
  return t;
}

Var<double> cst(Tensor<double> t) { return Var<double>::constant(std::move(t)); }

}  // namespace

TEST(Bce, UniformHalfIsLn2) {
  for (double y : {0.0, 1.0}) {
    Tensor<double> p({4, 1, 8, 8}, 0.5);
    Tensor<double> t({4, 1, 8, 8}, y);
    EXPECT_NEAR(bce_loss(cst(p), t).value()[0], std::numbers::ln2, 1e-6);
  }
  Tensor<float> pf({2, 1, 16, 16}, 0.5f);
  EXPECT_NEAR(bce_loss(Var<float>::constant(pf), binary_tensor({2, 1, 16, 16}, 3).cast<float>()).value()[0],
              std::numbers::ln2, 1e-6);
}

TEST(Bce, PerfectPredictionIsClampFloor) {
  Tensor<double> ones({10}, 1.0);
  const double v = bce_loss(cst(ones), ones).value()[0];
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.2e-7);
  // Completely wrong predictions stay finite thanks to the clamp.
  Tensor<double> zeros({10}, 0.0);
  EXPECT_NEAR(bce_loss(cst(zeros), ones).value()[0], -std::log(1e-7), 1e-9);
}

TEST(Bce, MatchesDirectFormula) {
  const auto p = random_tensor({3, 7}, 5, 0.01, 0.99);
  const auto y = binary_tensor({3, 7}, 6);
  double ref = 0;
  for (std::size_t i = 0; i < p.size(); ++i) ref += y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
  ref = -ref / static_cast<double>(p.size());
  EXPECT_NEAR(bce_loss(cst(p), y).value()[0], ref, 1e-14);
}

TEST(Bce, RejectsNonBinaryTargetAndShapeMismatch) {
  Tensor<double> p({4}, 0.5);
  Tensor<double> t({4}, 0.0);
  t[2] = 0.3;
  EXPECT_THROW(bce_loss(cst(p), t), ValidationError);
  EXPECT_THROW(bce_loss(cst(p), Tensor<double>({5}, 0.0)), DimensionError);
}

TEST(Bce, WithLogitsAgreesWithProbabilityForm) {
  const auto x = random_tensor({2, 9}, 7, -6, 6);
  const auto y = binary_tensor({2, 9}, 8);
  auto lx = cst(x);
  EXPECT_NEAR(bce_with_logits(lx, y).value()[0], bce_loss(ops::sigmoid(lx), y).value()[0], 1e-12);
  // Saturated logits keep a gradient.
  auto sat = Var<double>::leaf(Tensor<double>({2}, -200.0), true);
  backward(bce_with_logits(sat, Tensor<double>({2}, 1.0)));
  EXPECT_NEAR(sat.grad()[0], -0.5, 1e-12);
}

TEST(DiceLoss, HalfOverlapCase) {
  // Two predicted voxels, two reference voxels, one shared:
  // 1 - (2*1 + 1) / (2 + 2 + 1) = 0.4 with unit smoothing (0.5 without).
  Tensor<double> p({1, 1, 2, 2});
  Tensor<double> t({1, 1, 2, 2});
  p[0] = p[1] = 1;
  t[0] = t[2] = 1;
  const double v = dice_loss(cst(p), t).value()[0];
  EXPECT_NEAR(v, 0.4, 1e-12);
  EXPECT_GE(v, 0.4 - 1e-6);
  EXPECT_LE(v, 0.5);
}

TEST(DiceLoss, PerfectAndEmpty) {
  Tensor<double> t({8}, 0.0);
  EXPECT_NEAR(dice_loss(cst(t), t).value()[0], 0.0, 1e-15);  // both empty
  t[3] = 1;
  EXPECT_NEAR(dice_loss(cst(t), t).value()[0], 0.0, 1e-15);
}

TEST(CombinedLoss, TotalIsExactlyBcePlusDice) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = random_tensor({2, 1, 4, 4}, s, 0.001, 0.999);
    const auto y = binary_tensor({2, 1, 4, 4}, s + 100, 0.2);
    const auto l = combined_loss(cst(p), y);
    EXPECT_EQ(l.total_value(), l.bce_value() + l.dice_value());
    const auto ll = combined_loss_from_logits(cst(random_tensor({2, 1, 4, 4}, s, -5, 5)), y);
    EXPECT_EQ(ll.total_value(), ll.bce_value() + ll.dice_value());
  }
}

TEST(LossGradient, FiniteDifferences) {
  const auto y = binary_tensor({2, 1, 3, 3}, 11, 0.4);
  auto r = grad_check([&](const std::vector<Var<double>>& v) { return bce_loss(v[0], y); },
                      {random_tensor({2, 1, 3, 3}, 12, 0.05, 0.95)});
  EXPECT_LT(r.max_rel_error, 1e-4);
  r = grad_check([&](const std::vector<Var<double>>& v) { return dice_loss(v[0], y); },
                 {random_tensor({2, 1, 3, 3}, 13, 0.05, 0.95)});
  EXPECT_LT(r.max_rel_error, 1e-4);
  r = grad_check([&](const std::vector<Var<double>>& v) { return combined_loss(v[0], y).total; },
                 {random_tensor({2, 1, 3, 3}, 14, 0.05, 0.95)});
  EXPECT_LT(r.max_rel_error, 1e-4);
  r = grad_check([&](const std::vector<Var<double>>& v) { return combined_loss_from_logits(v[0], y).total; },
                 {random_tensor({2, 1, 3, 3}, 15, -3, 3)});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(DiceScore, KnownCases) {
  std::vector<float> a{1, 1, 0, 0}, b{1, 0, 1, 0}, z(4, 0.0f);
  EXPECT_DOUBLE_EQ(dice_score(a, b), 0.5);
  EXPECT_DOUBLE_EQ(dice_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(dice_score(z, z), 1.0);
  EXPECT_DOUBLE_EQ(dice_score(a, z), 0.0);
  EXPECT_THROW(dice_score(a, std::vector<float>{1, 0}), DimensionError);
  EXPECT_THROW(dice_score(a, std::vector<float>{1, 0, 0.5f, 0}), ValidationError);
}

TEST(DiceScore, SymmetricAndBounded) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    std::vector<float> a(64), b(64);
    for (auto& v : a) v = rng.uniform(0, 1) < 0.3 ? 1.0f : 0.0f;
    for (auto& v : b) v = rng.uniform(0, 1) < 0.3 ? 1.0f : 0.0f;
    const double d = dice_score(a, b);
    EXPECT_EQ(d, dice_score(b, a));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
  }
}

TEST(DiceScore, PerSlice) {
  std::vector<float> p{1, 0, 0, 0, 1, 1}, r{1, 0, 1, 1, 1, 1};
  const auto d = dice_per_slice(std::span<const float>(p), std::span<const float>(r), 2);
  EXPECT_EQ(d, (std::vector<double>{1.0, 0.0, 1.0}));
}

TEST(LesionVolume, VoxelCountTimesVoxelVolume) {
  std::vector<float> m(1000, 0.0f);
  for (std::size_t i = 0; i < 100; ++i) m[i * 7] = 1.0f;
  const VoxelSpacing sp{0.75, 0.75, 1.5};
  EXPECT_DOUBLE_EQ(lesion_volume(std::span<const float>(m), sp), 84.375);
  // Additive over disjoint halves.
  const std::span<const float> all(m);
  EXPECT_DOUBLE_EQ(lesion_volume(all.subspan(0, 500), sp) + lesion_volume(all.subspan(500), sp),
                   lesion_volume(all, sp));
  EXPECT_THROW(lesion_volume(all, VoxelSpacing{0, 1, 1}), ValidationError);
}

TEST(VolumeReport, PairedDifferences) {
  const auto r = paired_volume_report({{10, 8}, {6, 8}});
  EXPECT_DOUBLE_EQ(r.mean_diff, 0.0);
  EXPECT_DOUBLE_EQ(r.mean_abs_diff, 2.0);
  EXPECT_DOUBLE_EQ(r.mean_ref, 8.0);
  EXPECT_THROW(paired_volume_report({}), ValidationError);
}
