#pragma once

// Training hyperparameters, Adam and the reduce-on-plateau schedule.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>

#include "wmhseg/errors.hpp"
#include "wmhseg/segnet.hpp"
#include "wmhseg/tensor.hpp"

namespace wmhseg {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t plateau_patience = 2;
  double plateau_factor = 0.1;
  double min_lr = 1e-7;
  double split_ratio = 0.8;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t checkpoint_every = 1;  // epochs between periodic "last" checkpoints
  bool use_augmented = true;         // train on corrupted variants as well as clean scans
  std::size_t max_train_slices = 0;  // 0 = all
  std::size_t max_val_slices = 0;    // 0 = all
  bool skip_empty_slices = false;    // drop slices without any foreground voxels

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (!(split_ratio > 0 && split_ratio < 1)) throw ConfigError("split_ratio must be in (0,1)");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("plateau_factor must be in (0,1)");
    if (!(min_lr >= 0)) throw ConfigError("min_lr must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0,1)");
    if (!(adam_eps > 0)) throw ConfigError("adam eps must be > 0");
    if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be >= 1");
  }
};

template <std::floating_point T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
  friend bool operator==(const AdamMoments&, const AdamMoments&) = default;
};

template <std::floating_point T>
struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  double lr = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improvement = 0;
  std::uint64_t rng_seed = 0;
  std::map<std::string, AdamMoments<T>> moments;

  static TrainState initial(const TrainConfig& cfg) {
    TrainState s;
    s.lr = cfg.lr;
    s.rng_seed = cfg.seed;
    return s;
  }

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

/// One bias-corrected Adam update of every parameter that has a gradient entry.
template <std::floating_point T>
void adam_step(ModelParams<T>& params, const std::map<std::string, Tensor<T>>& grads,
               TrainState<T>& state, const TrainConfig& cfg) {
  for (const auto& [path, g] : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericalError("non-finite gradient in parameter " + path + " at element " + std::to_string(i));
      }
    }
  }
  ++state.step;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(state.lr), eps = static_cast<T>(cfg.adam_eps);
  for (const auto& [path, g] : grads) {
    auto it = params.tensors.find(path);
    if (it == params.tensors.end()) throw ConfigError("gradient for unknown parameter " + path);
    Tensor<T>& p = it->second;
    if (p.shape() != g.shape()) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " for " + path + " " + shape_str(p.shape()));
    }
    auto& mom = state.moments[path];
    if (mom.m.shape() != p.shape()) {
      mom.m = Tensor<T>::zeros(p.shape());
      mom.v = Tensor<T>::zeros(p.shape());
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = mom.m[i] / c1;
      const T vhat = mom.v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

/// Records a validation loss. After patience+1 consecutive evaluations without
/// a strict improvement the rate is multiplied by the factor (floored at
/// min_lr) and the counter restarts. Returns true when the rate was reduced.
template <std::floating_point T>
bool plateau_scheduler(TrainState<T>& state, double val_loss, const TrainConfig& cfg) {
  if (!std::isfinite(val_loss)) throw NumericalError("validation loss is not finite");
  if (val_loss < state.best_val_loss) {
    state.best_val_loss = val_loss;
    state.epochs_since_improvement = 0;
    return false;
  }
  if (++state.epochs_since_improvement > cfg.plateau_patience) {
    state.epochs_since_improvement = 0;
    const double next = std::max(state.lr * cfg.plateau_factor, cfg.min_lr);
    const bool reduced = next < state.lr;
    state.lr = std::min(state.lr, next);
    return reduced;
  }
  return false;
}

}  // namespace wmhseg
