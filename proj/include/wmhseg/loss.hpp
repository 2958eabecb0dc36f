#pragma once

// Training loss (binary cross-entropy + soft Dice) and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "wmhseg/autograd.hpp"
#include "wmhseg/ops.hpp"
#include "wmhseg/tensor.hpp"

namespace wmhseg {

inline constexpr double kBceEpsilon = 1e-7;
inline constexpr double kDiceSmoothing = 1.0;

namespace detail {

template <std::floating_point T>
void check_loss_inputs(const Var<T>& pred, const Tensor<T>& target, const char* what) {
  if (pred.shape() != target.shape()) {
    throw DimensionError(std::string(what) + ": prediction " + shape_str(pred.shape()) +
                         " vs target " + shape_str(target.shape()));
  }
}

template <class T>
void require_binary(std::span<const T> values, const char* what) {
  for (T v : values) {
    if (v != T(0) && v != T(1)) {
      throw ValidationError(std::string(what) + ": values must be 0 or 1, found " +
                            std::to_string(static_cast<double>(v)));
    }
  }
}

}  // namespace detail

/// -mean(y log p + (1-y) log(1-p)) with p clamped to [1e-7, 1-1e-7].
/// The gradient is evaluated at the clamped probability rather than zeroed,
/// so saturated outputs still receive a training signal.
template <std::floating_point T>
Var<T> bce_loss(const Var<T>& pred, const Tensor<T>& target) {
  detail::check_loss_inputs(pred, target, "bce_loss");
  detail::require_binary(target.data(), "bce_loss target");
  const auto& p = pred.value();
  const std::size_t n = p.size();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), kBceEpsilon, 1.0 - kBceEpsilon);
    acc += target[i] != T(0) ? std::log(pc) : std::log(1.0 - pc);
  }
  const double value = -acc / static_cast<double>(n);
  return make_result<T>("bce_loss", Tensor<T>::scalar(static_cast<T>(value)), {pred},
                        [target](Node<T>& self) {
                          const auto& pv = self.parents[0]->value;
                          auto& g = self.parents[0]->grad_buffer();
                          const double scale = static_cast<double>(self.grad[0]) / static_cast<double>(pv.size());
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const double pc = std::clamp(static_cast<double>(pv[i]), kBceEpsilon, 1.0 - kBceEpsilon);
                            const double d = target[i] != T(0) ? -1.0 / pc : 1.0 / (1.0 - pc);
                            g[i] += static_cast<T>(scale * d);
                          }
                        });
}

/// 1 - (2 sum(y p) + s) / (sum(y) + sum(p) + s), smoothing s = 1, over all elements.
template <std::floating_point T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target) {
  detail::check_loss_inputs(pred, target, "dice_loss");
  const auto& p = pred.value();
  double inter = 0, total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(target[i]) * p[i];
    total += static_cast<double>(target[i]) + p[i];
  }
  const double s = kDiceSmoothing;
  const double value = 1.0 - (2.0 * inter + s) / (total + s);
  return make_result<T>("dice_loss", Tensor<T>::scalar(static_cast<T>(value)), {pred},
                        [target, inter, total, s](Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          const double den = total + s;
                          const double num = 2.0 * inter + s;
                          const double up = static_cast<double>(self.grad[0]);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const double d = -(2.0 * target[i] * den - num) / (den * den);
                            g[i] += static_cast<T>(up * d);
                          }
                        });
}

template <std::floating_point T>
struct LossValue {
  Var<T> total;
  Var<T> bce;
  Var<T> dice;

  double total_value() const { return total.value()[0]; }
  double bce_value() const { return bce.value()[0]; }
  double dice_value() const { return dice.value()[0]; }
};

template <std::floating_point T>
LossValue<T> combined_loss(const Var<T>& pred, const Tensor<T>& target) {
  LossValue<T> out;
  out.bce = bce_loss(pred, target);
  out.dice = dice_loss(pred, target);
  out.total = ops::add(out.bce, out.dice);
  return out;
}

/// BCE of sigmoid(logits), computed as max(x,0) - x y + log(1 + e^-|x|).
/// Same value as bce_loss(sigmoid(x)) away from the clamp, but the gradient
/// sigmoid(x) - y never vanishes, so a saturated output can recover.
template <std::floating_point T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target) {
  detail::check_loss_inputs(logits, target, "bce_with_logits");
  detail::require_binary(target.data(), "bce_with_logits target");
  const auto& x = logits.value();
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    acc += std::max(v, 0.0) - v * static_cast<double>(target[i]) + std::log1p(std::exp(-std::abs(v)));
  }
  return make_result<T>("bce_with_logits", Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(x.size()))),
                        {logits}, [target](Node<T>& self) {
                          const auto& xv = self.parents[0]->value;
                          auto& g = self.parents[0]->grad_buffer();
                          const double scale = static_cast<double>(self.grad[0]) / static_cast<double>(xv.size());
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(xv[i])));
                            g[i] += static_cast<T>(scale * (p - static_cast<double>(target[i])));
                          }
                        });
}

/// Training form of combined_loss taking pre-sigmoid outputs.
template <std::floating_point T>
LossValue<T> combined_loss_from_logits(const Var<T>& logits, const Tensor<T>& target) {
  LossValue<T> out;
  out.bce = bce_with_logits(logits, target);
  out.dice = dice_loss(ops::sigmoid(logits), target);
  out.total = ops::add(out.bce, out.dice);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation metrics

/// 2|A and B| / (|A| + |B|) for binary masks; two empty masks score 1.
template <class T>
double dice_score(std::span<const T> pred, std::span<const T> ref) {
  if (pred.size() != ref.size()) {
    throw DimensionError("dice_score: mask sizes " + std::to_string(pred.size()) + " and " +
                         std::to_string(ref.size()));
  }
  detail::require_binary(pred, "dice_score prediction");
  detail::require_binary(ref, "dice_score reference");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] != T(0), rb = ref[i] != T(0);
    a += pa;
    b += rb;
    both += pa && rb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

template <class T>
double dice_score(const std::vector<T>& pred, const std::vector<T>& ref) {
  return dice_score(std::span<const T>(pred), std::span<const T>(ref));
}

/// Dice per z-slice of two (x,y,z)-ordered volumes with `plane` voxels per slice.
template <class T>
std::vector<double> dice_per_slice(std::span<const T> pred, std::span<const T> ref, std::size_t plane) {
  if (plane == 0 || pred.size() % plane != 0) throw DimensionError("dice_per_slice: bad plane size");
  if (pred.size() != ref.size()) throw DimensionError("dice_per_slice: mask sizes differ");
  std::vector<double> out;
  for (std::size_t off = 0; off < pred.size(); off += plane) {
    out.push_back(dice_score(pred.subspan(off, plane), ref.subspan(off, plane)));
  }
  return out;
}

struct VoxelSpacing {
  double dx = 1, dy = 1, dz = 1;
};

template <class T>
std::size_t count_foreground(std::span<const T> mask) {
  std::size_t n = 0;
  for (T v : mask) n += v != T(0);
  return n;
}

/// Lesion volume in mm^3: foreground voxel count times voxel volume.
template <class T>
double lesion_volume(std::span<const T> mask, VoxelSpacing spacing) {
  if (!(spacing.dx > 0 && spacing.dy > 0 && spacing.dz > 0)) {
    throw ValidationError("voxel spacing must be positive");
  }
  return static_cast<double>(count_foreground(mask)) * spacing.dx * spacing.dy * spacing.dz;
}

struct SegMetrics {
  std::string id;
  double dice_score = 0;
  double lesion_volume_pred = 0;  // mm^3
  double lesion_volume_ref = 0;   // mm^3
  std::size_t voxels_pred = 0;
  std::size_t voxels_ref = 0;
};

inline constexpr const char* kMetricsCsvHeader = "id,dice,vol_pred_mm3,vol_ref_mm3";

inline void write_metrics_csv(std::ostream& os, const std::vector<SegMetrics>& rows) {
  os << kMetricsCsvHeader << '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), ",%.6f,%.4f,%.4f", r.dice_score, r.lesion_volume_pred,
                  r.lesion_volume_ref);
    os << r.id << buf << '\n';
  }
}

struct VolumePair {
  double pred = 0;
  double ref = 0;
};

struct VolumeReport {
  double mean_diff = 0;      // mean(pred - ref)
  double mean_abs_diff = 0;  // mean |pred - ref|
  double mean_ref = 0;
  std::vector<VolumePair> rows;

  void write_csv(std::ostream& os) const {
    os << "index,vol_pred_mm3,vol_ref_mm3,diff_mm3\n";
    char buf[256];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.4f,%.4f,%.4f\n", i, rows[i].pred, rows[i].ref,
                    rows[i].pred - rows[i].ref);
      os << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,,,%.4f\nmean_abs,,,%.4f\n", mean_diff, mean_abs_diff);
    os << buf;
  }
};

/// Descriptive paired comparison of predicted and reference lesion volumes.
inline VolumeReport paired_volume_report(const std::vector<VolumePair>& pairs) {
  if (pairs.empty()) throw ValidationError("paired_volume_report: no pairs");
  VolumeReport r;
  r.rows = pairs;
  for (const auto& p : pairs) {
    r.mean_diff += p.pred - p.ref;
    r.mean_abs_diff += std::abs(p.pred - p.ref);
    r.mean_ref += p.ref;
  }
  const auto n = static_cast<double>(pairs.size());
  r.mean_diff /= n;
  r.mean_abs_diff /= n;
  r.mean_ref /= n;
  return r;
}

}  // namespace wmhseg
