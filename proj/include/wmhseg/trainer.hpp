#pragma once

// Dataset split, slice loading, the training loop and evaluation.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wmhseg/artifacts.hpp"
#include "wmhseg/checkpoint.hpp"
#include "wmhseg/errors.hpp"
#include "wmhseg/loss.hpp"
#include "wmhseg/manifest.hpp"
#include "wmhseg/nifti.hpp"
#include "wmhseg/optimizer.hpp"
#include "wmhseg/parallel.hpp"
#include "wmhseg/preprocess.hpp"
#include "wmhseg/rng.hpp"
#include "wmhseg/segnet.hpp"

namespace wmhseg {

// ---------------------------------------------------------------------------
// Split

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Shuffles the unique source ids and cuts them at round(ratio * n), keeping at
/// least one source on each side. Corrupted variants follow their source.
inline DatasetSplit split_dataset(const Manifest& manifest, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("split ratio must be in (0,1)");
  auto ids = manifest.sources();
  if (ids.size() < 2) throw ValidationError("need at least 2 source scans to split, found " + std::to_string(ids.size()));
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = ids.size(); i-- > 1;) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
    std::swap(ids[i], ids[j]);
  }
  auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
  DatasetSplit s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline void write_split(const DatasetSplit& s, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw IoError("cannot write " + file.string());
  os << "source_id,partition\n";
  for (const auto& id : s.train) os << id << ",train\n";
  for (const auto& id : s.test) os << id << ",test\n";
}

inline DatasetSplit read_split(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read " + file.string());
  std::string line;
  if (!std::getline(is, line) || line != "source_id,partition") throw FormatError(file.string() + ": bad split header");
  DatasetSplit s;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError(file.string() + ": bad split row");
    const std::string id = line.substr(0, comma), part = line.substr(comma + 1);
    if (part == "train") {
      s.train.push_back(id);
    } else if (part == "test") {
      s.test.push_back(id);
    } else {
      throw FormatError(file.string() + ": unknown partition " + part);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Slice datasets

/// One preprocessed training example on the 256x256 canvas.
struct TrainingSlice {
  std::string source_id;
  std::string role;
  std::size_t z = 0;
  Slice2D image;
  Slice2D mask;
};

struct SliceRef {
  const ManifestEntry* entry;
  std::size_t z;
};

/// Loads axial slices of the listed sources. `roles` selects image roles
/// (e.g. {"clean"} or all five). When max_slices > 0 a seeded subset of that
/// size is drawn, kept in manifest order.
inline std::vector<TrainingSlice> load_slices(const Manifest& manifest, const std::vector<std::string>& sources,
                                              const std::set<std::string>& roles, std::size_t max_slices,
                                              std::uint64_t seed, bool skip_empty = false) {
  const std::set<std::string> wanted(sources.begin(), sources.end());
  std::map<std::string, Volume> masks;
  std::vector<SliceRef> refs;
  for (const auto& e : manifest.entries) {
    if (e.is_mask() || !wanted.count(e.source_id) || !roles.count(e.role)) continue;
    if (!masks.count(e.source_id)) {
      const auto* m = manifest.mask_for(e.source_id);
      if (!m) throw ValidationError("no reference mask for source " + e.source_id);
      masks.emplace(e.source_id, nifti::read(manifest.resolve(*m).string()));
    }
    const Volume& mask = masks.at(e.source_id);
    for (std::size_t z = 0; z < mask.nz(); ++z) {
      if (skip_empty) {
        const auto* p = mask.data.data() + z * mask.plane();
        if (std::none_of(p, p + mask.plane(), [](float v) { return v != 0.0f; })) continue;
      }
      refs.push_back({&e, z});
    }
  }
  if (max_slices > 0 && refs.size() > max_slices) {
    std::vector<std::size_t> idx(refs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "slices"));
    for (std::size_t i = idx.size(); i-- > 1;) {
      std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    idx.resize(max_slices);
    std::sort(idx.begin(), idx.end());
    std::vector<SliceRef> kept;
    for (auto i : idx) kept.push_back(refs[i]);
    refs = std::move(kept);
  }

  std::vector<TrainingSlice> out;
  out.reserve(refs.size());
  const ManifestEntry* loaded_for = nullptr;
  Volume image;
  for (const auto& r : refs) {
    if (r.entry != loaded_for) {
      image = nifti::read(manifest.resolve(*r.entry).string());
      loaded_for = r.entry;
    }
    const Volume& mask = masks.at(r.entry->source_id);
    if (image.dims != mask.dims) {
      throw DimensionError(r.entry->path + " and its mask have different dimensions");
    }
    Slice2D s(image.nx(), image.ny()), m(mask.nx(), mask.ny());
    std::copy_n(image.data.begin() + static_cast<std::ptrdiff_t>(r.z * image.plane()), image.plane(), s.data.begin());
    std::copy_n(mask.data.begin() + static_cast<std::ptrdiff_t>(r.z * mask.plane()), mask.plane(), m.data.begin());
    out.push_back({r.entry->source_id, r.entry->role, r.z, preprocess_slice(s).image, preprocess_mask(m)});
  }
  return out;
}

/// Stacks slices[idx[begin..end)] into image and target tensors [B,1,256,256].
inline std::pair<Tensor<float>, Tensor<float>> assemble_batch(const std::vector<TrainingSlice>& slices,
                                                              const std::vector<std::size_t>& idx,
                                                              std::size_t begin, std::size_t end) {
  const std::size_t b = end - begin, plane = kModelSize * kModelSize;
  Tensor<float> x(Shape{b, 1, kModelSize, kModelSize}), y(Shape{b, 1, kModelSize, kModelSize});
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = slices[idx[begin + i]];
    std::copy(s.image.data.begin(), s.image.data.end(), x.ptr() + i * plane);
    std::copy(s.mask.data.begin(), s.mask.data.end(), y.ptr() + i * plane);
  }
  return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Training

inline constexpr const char* kTrainLogHeader = "epoch,train_loss,val_loss,lr,wall_time";

struct TrainData {
  std::vector<TrainingSlice> train;
  std::vector<TrainingSlice> val;
};

struct TrainResult {
  TrainState<float> state;
  std::vector<double> train_losses;  // epochs run in this call
  std::vector<double> val_losses;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path log;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Mean combined loss over `slices` without building a graph.
inline double evaluate_loss(const ModelParams<float>& params, const ModelConfig& cfg,
                            const std::vector<TrainingSlice>& slices, std::size_t batch_size) {
  if (slices.empty()) throw ValidationError("no slices to evaluate");
  std::vector<std::size_t> idx(slices.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto vars = as_vars(params, false);
  double total = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    auto [x, y] = assemble_batch(slices, idx, b, e);
    auto logits = model_logits(Var<float>::constant(std::move(x)), vars, cfg);
    total += combined_loss_from_logits(logits, y).total_value() * static_cast<double>(e - b);
  }
  return total / static_cast<double>(slices.size());
}

inline std::string format_log_row(std::size_t epoch, double train_loss, double val_loss, double lr, double wall) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.3f", epoch, train_loss, val_loss, lr, wall);
  return buf;
}

/// Trains with Adam and reduce-on-plateau on validation loss. Writes
/// train_log.csv, best.ckpt and last.ckpt into out_dir. When `resume` holds a
/// checkpoint with training state, continues after its epoch and appends to
/// the existing log.
inline TrainResult train(const TrainConfig& tcfg, const ModelConfig& mcfg, const TrainData& data,
                         const std::filesystem::path& out_dir, const std::optional<Checkpoint>& resume = std::nullopt,
                         const ProgressFn& progress = {}) {
  tcfg.validate();
  mcfg.validate();
  if (data.train.empty()) throw ValidationError("training set is empty");
  if (data.val.empty()) throw ValidationError("validation set is empty");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  TrainResult result;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  result.log = out_dir / "train_log.csv";

  ModelParams<float> params;
  TrainState<float> state;
  double best_saved = std::numeric_limits<double>::infinity();
  if (resume) {
    if (!resume->state) throw ValidationError("resume checkpoint has no training state");
    if (!(resume->model == mcfg)) throw ConfigError("resume checkpoint was trained with a different model config");
    params = resume->params;
    state = *resume->state;
    best_saved = state.best_val_loss;
    if (state.epoch >= tcfg.epochs) {
      throw ConfigError("checkpoint already completed " + std::to_string(state.epoch) + " epochs; raise --epochs");
    }
  } else {
    params = init_parameters<float>(mcfg, derive_seed(tcfg.seed, "init"));
    state = TrainState<float>::initial(tcfg);
  }

  std::ofstream log;
  if (resume && std::filesystem::exists(result.log)) {
    // Drop rows past the resumed epoch (e.g. written after the checkpoint).
    std::ifstream in(result.log);
    std::string line, kept;
    std::getline(in, line);
    if (line != kTrainLogHeader) throw FormatError(result.log.string() + ": unexpected log header");
    kept = line + "\n";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= state.epoch) kept += line + "\n";
    }
    in.close();
    log.open(result.log, std::ios::trunc);
    log << kept;
  } else {
    log.open(result.log, std::ios::trunc);
    log << kTrainLogHeader << '\n';
  }
  if (!log) throw IoError("cannot write " + result.log.string());

  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t epoch = state.epoch + 1; epoch <= tcfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(state.rng_seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i-- > 1;) {
      std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    const double epoch_lr = state.lr;
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += tcfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + tcfg.batch_size);
      auto [x, y] = assemble_batch(data.train, order, b, e);
      auto vars = as_vars(params, true);
      auto logits = model_logits(Var<float>::constant(std::move(x)), vars, mcfg);
      auto loss = combined_loss_from_logits(logits, y);
      const double value = loss.total_value();
      if (!std::isfinite(value)) throw NumericalError("loss became non-finite at epoch " + std::to_string(epoch));
      backward(loss.total);
      std::map<std::string, Tensor<float>> grads;
      for (auto& [path, v] : vars) {
        if (v.has_grad()) grads.emplace(path, v.grad());
      }
      adam_step(params, grads, state, tcfg);
      loss_sum += value * static_cast<double>(e - b);
    }
    const double train_loss = loss_sum / static_cast<double>(order.size());
    const double val_loss = evaluate_loss(params, mcfg, data.val, tcfg.batch_size);
    const bool improved = val_loss < best_saved;
    plateau_scheduler(state, val_loss, tcfg);
    state.epoch = epoch;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << format_log_row(epoch, train_loss, val_loss, epoch_lr, wall) << '\n';
    log.flush();
    result.train_losses.push_back(train_loss);
    result.val_losses.push_back(val_loss);

    if (improved) {
      best_saved = val_loss;
      save_checkpoint({mcfg, params, val_loss, state}, result.best_checkpoint);
    }
    if (epoch % tcfg.checkpoint_every == 0 || epoch == tcfg.epochs) {
      save_checkpoint({mcfg, params, val_loss, state}, result.last_checkpoint);
    }
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "epoch %zu/%zu train_loss %.5f val_loss %.5f lr %.3g (%.1fs)", epoch,
                    tcfg.epochs, train_loss, val_loss, epoch_lr, wall);
      progress(buf);
    }
  }
  result.state = state;
  return result;
}

/// Convenience wrapper: split the manifest, load slices and train. The split
/// is written to out_dir/split.csv.
inline TrainResult train(const TrainConfig& tcfg, const ModelConfig& mcfg, const Manifest& manifest,
                         const std::filesystem::path& out_dir, const std::optional<Checkpoint>& resume = std::nullopt,
                         const ProgressFn& progress = {}) {
  tcfg.validate();
  const auto split = split_dataset(manifest, tcfg.split_ratio, tcfg.seed);
  std::filesystem::create_directories(out_dir);
  write_split(split, out_dir / "split.csv");
  std::set<std::string> train_roles{"clean"};
  if (tcfg.use_augmented) train_roles.insert(kArtifactRoles.begin(), kArtifactRoles.end());
  TrainData data;
  data.train = load_slices(manifest, split.train, train_roles, tcfg.max_train_slices, derive_seed(tcfg.seed, "train"),
                           tcfg.skip_empty_slices);
  data.val = load_slices(manifest, split.test, {"clean"}, tcfg.max_val_slices, derive_seed(tcfg.seed, "val"),
                         tcfg.skip_empty_slices);
  if (progress) {
    progress("train slices " + std::to_string(data.train.size()) + " from " + std::to_string(split.train.size()) +
             " sources, validation slices " + std::to_string(data.val.size()) + " from " +
             std::to_string(split.test.size()) + " sources");
  }
  return train(tcfg, mcfg, data, out_dir, resume, progress);
}

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Segments every axial slice of a raw volume and returns a binary mask with
/// the input geometry.
inline Volume segment_volume(const Volume& vol, const ModelParams<float>& params, const ModelConfig& cfg,
                             std::size_t batch_size = 8) {
  vol.validate();
  if (cfg.input_h != kModelSize || cfg.input_w != kModelSize) {
    throw ConfigError("segmentation requires a model trained at 256x256");
  }
  const auto slices = to_axial_slices(vol);
  std::vector<Slice2D> out(slices.size());
  const auto vars = as_vars(params, false);
  for (std::size_t b = 0; b < slices.size(); b += batch_size) {
    const std::size_t e = std::min(slices.size(), b + batch_size);
    std::vector<PreprocessedSlice> pre;
    for (std::size_t z = b; z < e; ++z) pre.push_back(preprocess_slice(slices[z]));
    auto batch = make_slice_batch(pre);
    auto prob = model_forward(Var<float>::constant(std::move(batch.tensor)), vars, cfg).value();
    const std::size_t plane = kModelSize * kModelSize;
    for (std::size_t i = 0; i < e - b; ++i) {
      Slice2D canvas(kModelSize, kModelSize);
      for (std::size_t k = 0; k < plane; ++k) canvas.data[k] = prob[i * plane + k] >= 0.5f ? 1.0f : 0.0f;
      out[b + i] = unpreprocess_mask(canvas, batch.provenance[i]);
    }
  }
  Volume mask = assemble_volume(out, vol);
  mask.datatype_code = 16;
  return mask;
}

struct EvalRow {
  std::string source_id;
  std::string role;
  SegMetrics metrics;
};

struct KindSummary {
  std::string role;
  std::size_t count = 0;
  double mean_dice = 0;
  double dice_drop = 0;  // clean mean minus this kind's mean, over the same sources
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<KindSummary> kinds;
  std::optional<VolumeReport> clean_volumes;

  double mean_dice(const std::string& role) const {
    for (const auto& k : kinds) {
      if (k.role == role) return k.mean_dice;
    }
    throw ValidationError("no evaluated volumes with role " + role);
  }
  /// Mean Dice over all corrupted variants.
  double mean_corrupted_dice() const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.role != "clean") {
        s += r.metrics.dice_score;
        ++n;
      }
    }
    if (n == 0) throw ValidationError("no corrupted volumes evaluated");
    return s / static_cast<double>(n);
  }

  void write_metrics(std::ostream& os) const {
    std::vector<SegMetrics> m;
    for (const auto& r : rows) m.push_back(r.metrics);
    write_metrics_csv(os, m);
  }

  void write_summary(std::ostream& os) const {
    os << "role,count,mean_dice,dice_drop_vs_clean\n";
    char buf[256];
    for (const auto& k : kinds) {
      std::snprintf(buf, sizeof(buf), ",%zu,%.6f,%.6f\n", k.count, k.mean_dice, k.dice_drop);
      os << k.role << buf;
    }
  }
};

/// Evaluates the listed sources (all when empty) and roles. Without a
/// checkpoint the reference mask is scored against itself.
inline EvalReport evaluate(const Checkpoint* ck, const Manifest& manifest, const std::vector<std::string>& sources = {},
                           const std::set<std::string>& roles = {}) {
  std::vector<const ManifestEntry*> todo;
  const std::set<std::string> wanted(sources.begin(), sources.end());
  for (const auto& e : manifest.entries) {
    if (e.is_mask()) continue;
    if (!wanted.empty() && !wanted.count(e.source_id)) continue;
    if (!roles.empty() && !roles.count(e.role)) continue;
    if (!manifest.mask_for(e.source_id)) throw ValidationError("no reference mask for " + e.path);
    todo.push_back(&e);
  }
  if (todo.empty()) throw ValidationError("nothing to evaluate");

  EvalReport report;
  report.rows.resize(todo.size());
  parallel_for(todo.size(), [&](std::size_t i) {
    const auto& e = *todo[i];
    const Volume ref = nifti::read(manifest.resolve(*manifest.mask_for(e.source_id)).string());
    Volume pred;
    if (ck) {
      const Volume img = nifti::read(manifest.resolve(e).string());
      if (!img.same_geometry(ref)) throw DimensionError(e.path + " and its mask differ in geometry");
      pred = segment_volume(img, ck->params, ck->model);
    } else {
      pred = ref;
    }
    SegMetrics m;
    m.id = e.source_id + "/" + e.role;
    m.dice_score = dice_score(pred.data, ref.data);
    m.voxels_pred = count_foreground<float>(pred.data);
    m.voxels_ref = count_foreground<float>(ref.data);
    m.lesion_volume_pred = lesion_volume<float>(pred.data, ref.voxel_spacing());
    m.lesion_volume_ref = lesion_volume<float>(ref.data, ref.voxel_spacing());
    report.rows[i] = {e.source_id, e.role, m};
  });

  std::map<std::string, std::map<std::string, double>> dice;  // role -> source -> dice
  for (const auto& r : report.rows) dice[r.role][r.source_id] = r.metrics.dice_score;
  std::vector<std::string> order{"clean"};
  order.insert(order.end(), kArtifactRoles.begin(), kArtifactRoles.end());
  for (const auto& [role, _] : dice) {
    if (std::find(order.begin(), order.end(), role) == order.end()) order.push_back(role);
  }
  for (const auto& role : order) {
    auto it = dice.find(role);
    if (it == dice.end()) continue;
    KindSummary k;
    k.role = role;
    double clean_sum = 0;
    std::size_t paired = 0;
    for (const auto& [src, d] : it->second) {
      k.mean_dice += d;
      ++k.count;
      if (dice.count("clean") && dice["clean"].count(src)) {
        clean_sum += dice["clean"][src] - d;
        ++paired;
      }
    }
    k.mean_dice /= static_cast<double>(k.count);
    k.dice_drop = paired ? clean_sum / static_cast<double>(paired) : 0.0;
    report.kinds.push_back(k);
  }

  std::vector<VolumePair> pairs;
  for (const auto& r : report.rows) {
    if (r.role == "clean") pairs.push_back({r.metrics.lesion_volume_pred, r.metrics.lesion_volume_ref});
  }
  if (!pairs.empty()) report.clean_volumes = paired_volume_report(pairs);
  return report;
}

}  // namespace wmhseg
