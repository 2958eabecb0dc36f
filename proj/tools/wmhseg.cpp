// wmhseg: phantom generation, corruption, training, segmentation and evaluation.
//
// Exit codes: 0 success, 1 usage/config, 2 data or format error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "wmhseg/run_config.hpp"
#include "wmhseg/wmhseg.hpp"

namespace fs = std::filesystem;
using namespace wmhseg;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::vector<std::string> set;  // --set key=value
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required = true) {
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.set, "Override one config key (key=value), may repeat");
  auto* o = sub->add_option("--out", c.out, "Output location");
  if (out_required) o->required();
}

/// Defaults < config file < --set entries < dedicated flags (applied by caller).
ConfigMap layered(const Common& c) {
  ConfigMap m = c.config.empty() ? ConfigMap{} : read_config_file(c.config);
  for (const auto& kv : c.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    m[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  if (c.seed) m["seed"] = std::to_string(*c.seed);
  return m;
}

void echo(const std::string& command, const ConfigMap& effective) {
  std::cerr << "# wmhseg " << command << " effective config\n" << format_config(effective);
}

int cmd_phantom(const Common& c, std::size_t n) {
  auto values = layered(c);
  std::uint64_t seed = 0;
  if (auto it = values.find("seed"); it != values.end()) {
    seed = detail::to_uint("seed", it->second);
    values.erase(it);
  }
  PhantomConfig pc;
  apply_config(values, nullptr, nullptr, &pc);
  auto effective = to_config_map(pc);
  effective["seed"] = std::to_string(seed);
  effective["n"] = std::to_string(n);
  echo("phantom", effective);
  const auto m = generate_dataset(n, seed, c.out, pc);
  std::cerr << "wrote " << m.entries.size() << " volumes and " << (fs::path(c.out) / "manifest.csv").string() << "\n";
  return 0;
}

std::string stem_of(const fs::path& p) {
  std::string name = p.filename().string();
  for (const char* ext : {".nii.gz", ".nii", ".hdr", ".img"}) {
    const std::string e(ext);
    if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0) {
      return name.substr(0, name.size() - e.size());
    }
  }
  return name;
}

int cmd_augment(const Common& c, const std::string& in, const std::string& kind, const std::string& replay) {
  const auto values = layered(c);
  for (const auto& [k, _] : values) {
    if (k != "seed") throw ConfigError("augment does not accept config key '" + k + "'");
  }
  ArtifactSpec spec;
  if (!replay.empty()) {
    spec = read_spec_sidecar(replay);
  } else {
    if (kind.empty()) throw UsageError("augment needs --kind or --replay");
    const std::uint64_t seed = values.count("seed") ? detail::to_uint("seed", values.at("seed")) : 0;
    ArtifactKind k;
    try {
      k = parse_artifact_kind(kind);
    } catch (const ValidationError& e) {
      throw UsageError(e.what());
    }
    spec = sample_artifact_spec(k, seed);
  }
  std::cerr << "# wmhseg augment effective spec\n" << format_spec(spec);
  const Volume vol = nifti::read(in);
  const Volume out = apply_artifact(vol, spec);
  fs::create_directories(c.out);
  const std::string base = (fs::path(c.out) / (stem_of(in) + "_" + to_string(spec.kind))).string();
  nifti::write(out, base + ".nii");
  write_spec_sidecar(base + ".spec.txt", spec);
  std::cerr << "wrote " << base << ".nii\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& manifest_path, const std::string& resume) {
  const auto values = layered(c);
  TrainConfig tc;
  ModelConfig mc;
  apply_config(values, &tc, &mc, nullptr);
  if (tc.epochs == 0) throw UsageError("--epochs must be at least 1");
  std::optional<Checkpoint> from;
  if (!resume.empty()) {
    from = load_checkpoint(resume);
    // The model shape comes from the checkpoint unless the user overrode it.
    bool model_overridden = false;
    for (const auto& [k, _] : to_config_map(ModelConfig{})) model_overridden |= values.count(k) > 0;
    if (!model_overridden) mc = from->model;
  }
  tc.validate();
  mc.validate();
  auto effective = to_config_map(tc);
  for (auto& kv : to_config_map(mc)) effective.insert(kv);
  effective["manifest"] = manifest_path;
  if (!resume.empty()) effective["resume"] = resume;
  echo("train", effective);
  fs::create_directories(c.out);
  {
    std::ofstream os(fs::path(c.out) / "config.txt");
    os << format_config(effective);
  }
  const auto manifest = Manifest::read(manifest_path);
  const auto result = train(tc, mc, manifest, c.out, from, [](const std::string& s) { std::cerr << s << "\n"; });
  std::cerr << "best checkpoint " << result.best_checkpoint.string() << ", log " << result.log.string() << "\n";
  return 0;
}

int cmd_segment(const Common& c, const std::string& checkpoint, const std::string& in) {
  const auto values = layered(c);
  if (!values.empty()) throw UsageError("segment takes no configuration; it uses the checkpoint as is");
  const auto ck = load_checkpoint(checkpoint);
  const Volume vol = nifti::read(in);
  const Volume mask = segment_volume(vol, ck.params, ck.model);
  const fs::path out(c.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  nifti::write(mask, out.string());
  std::cerr << "wrote " << out.string() << " (" << count_foreground<float>(mask.data) << " lesion voxels)\n";
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, bool reference, const std::string& manifest_path,
                 const std::string& split_path, const std::string& partition) {
  const auto values = layered(c);
  if (!values.empty()) throw UsageError("evaluate takes no configuration keys");
  if (checkpoint.empty() == !reference) throw UsageError("evaluate needs exactly one of --checkpoint or --reference");
  const auto manifest = Manifest::read(manifest_path);
  std::vector<std::string> sources;
  if (!split_path.empty()) {
    const auto split = read_split(split_path);
    if (partition == "train") {
      sources = split.train;
    } else if (partition == "test") {
      sources = split.test;
    } else {
      throw UsageError("--partition must be train or test");
    }
  }
  std::optional<Checkpoint> ck;
  if (!checkpoint.empty()) ck = load_checkpoint(checkpoint);
  ConfigMap effective{{"manifest", manifest_path},
                      {"mode", reference ? "reference" : "checkpoint"},
                      {"checkpoint", checkpoint},
                      {"split", split_path},
                      {"partition", split_path.empty() ? "all" : partition}};
  echo("evaluate", effective);
  const auto report = evaluate(ck ? &*ck : nullptr, manifest, sources);
  fs::create_directories(c.out);
  {
    std::ofstream os(fs::path(c.out) / "metrics.csv");
    report.write_metrics(os);
  }
  {
    std::ofstream os(fs::path(c.out) / "summary.csv");
    report.write_summary(os);
  }
  if (report.clean_volumes) {
    std::ofstream os(fs::path(c.out) / "volumes.csv");
    report.clean_volumes->write_csv(os);
  }
  report.write_summary(std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"White matter hyperintensity segmentation toolkit"};
  app.require_subcommand(1);

  Common phantom_c, augment_c, train_c, segment_c, eval_c;
  std::size_t n = 10;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset with corrupted variants");
  add_common(phantom, phantom_c);
  phantom->add_option("-n,--count", n, "Number of phantom scans")->check(CLI::PositiveNumber);

  std::string aug_in, aug_kind, aug_replay;
  auto* augment = app.add_subcommand("augment", "Corrupt one volume with a simulated artifact");
  add_common(augment, augment_c);
  augment->add_option("--in", aug_in, "Input NIfTI volume")->required()->check(CLI::ExistingFile);
  augment->add_option("--kind", aug_kind, "noise, bias, ghosting or noise_bias");
  augment->add_option("--replay", aug_replay, "Re-apply the spec from a sidecar file")->check(CLI::ExistingFile);

  std::string manifest, resume;
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr;
  auto* trainc = app.add_subcommand("train", "Train a segmentation model");
  add_common(trainc, train_c);
  trainc->add_option("--manifest", manifest, "Dataset manifest.csv")->required()->check(CLI::ExistingFile);
  trainc->add_option("--epochs", epochs, "Number of epochs");
  trainc->add_option("--lr", lr, "Initial learning rate");
  trainc->add_option("--batch-size", batch, "Batch size");
  trainc->add_option("--resume", resume, "Continue from a checkpoint with training state")->check(CLI::ExistingFile);

  std::string seg_ckpt, seg_in;
  auto* segment = app.add_subcommand("segment", "Segment a raw FLAIR volume");
  add_common(segment, segment_c);
  segment->add_option("--checkpoint", seg_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  segment->add_option("--in", seg_in, "Input NIfTI volume")->required()->check(CLI::ExistingFile);

  std::string ev_ckpt, ev_manifest, ev_split, ev_partition = "test";
  bool ev_reference = false;
  auto* evaluate_c = app.add_subcommand("evaluate", "Score segmentations against reference masks");
  add_common(evaluate_c, eval_c);
  evaluate_c->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->check(CLI::ExistingFile);
  evaluate_c->add_flag("--reference", ev_reference, "Score the reference masks against themselves");
  evaluate_c->add_option("--manifest", ev_manifest, "Dataset manifest.csv")->required()->check(CLI::ExistingFile);
  evaluate_c->add_option("--split", ev_split, "split.csv written by train")->check(CLI::ExistingFile);
  evaluate_c->add_option("--partition", ev_partition, "train or test (with --split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*phantom) return cmd_phantom(phantom_c, n);
    if (*augment) return cmd_augment(augment_c, aug_in, aug_kind, aug_replay);
    if (*trainc) {
      if (epochs) train_c.set.push_back("epochs=" + std::to_string(*epochs));
      if (lr) train_c.set.push_back("lr=" + detail::num(*lr));
      if (batch) train_c.set.push_back("batch_size=" + std::to_string(*batch));
      return cmd_train(train_c, manifest, resume);
    }
    if (*segment) return cmd_segment(segment_c, seg_ckpt, seg_in);
    if (*evaluate_c) return cmd_evaluate(eval_c, ev_ckpt, ev_reference, ev_manifest, ev_split, ev_partition);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
