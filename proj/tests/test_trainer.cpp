#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "test_support.hpp"

using namespace wmhseg;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.stage_channels = {8, 8, 8, 8};
  c.decoder_channels = {8, 8, 8, 8};
  c.stage_depths = {1, 1, 1, 1};
  c.num_heads = {1, 2, 4, 8};
  return c;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.lr = 1e-3;
  t.seed = 3;
  return t;
}

// Shared small dataset: 6 sources of 96x96x4.
const Manifest& small_manifest() {
  static const Manifest m = [] {
    PhantomConfig pc;
    pc.nx = pc.ny = 96;
    pc.nz = 4;
    pc.spacing = {2.0f, 2.0f, 3.0f};
    pc.min_lesions = 1;
    pc.lesion_radius_max_mm = 3.5;
    return generate_dataset(6, 21, testing_support::temp_dir("trainer_data"), pc);
  }();
  return m;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::string strip_wall_time(const std::string& log) {
  std::istringstream is(log);
  std::string line, out;
  while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

Manifest fake_manifest(std::size_t sources) {
  Manifest m;
  for (std::size_t i = 0; i < sources; ++i) {
    const auto id = source_name(i);
    m.entries.push_back({id + "_clean.nii", "clean", i, id});
    m.entries.push_back({id + "_mask.nii", "mask", i, id});
    for (const auto& r : kArtifactRoles) m.entries.push_back({id + "_" + r + ".nii", r, i, id});
  }
  return m;
}

}  // namespace

TEST(Adam, MatchesHandComputedUpdates) {
  TrainConfig cfg;
  cfg.lr = 0.01;
  ModelParams<double> p;
  p.tensors.emplace("w", Tensor<double>(Shape{3}, std::vector<double>{0.5, -1.0, 2.0}));
  auto state = TrainState<double>::initial(cfg);
  const std::vector<std::vector<double>> grads{{0.1, -0.2, 0.3}, {0.05, 0.4, -0.1}, {-0.3, 0.0, 0.2}};
  std::vector<long double> w{0.5L, -1.0L, 2.0L}, m(3, 0), v(3, 0);
  for (std::size_t t = 0; t < grads.size(); ++t) {
    std::map<std::string, Tensor<double>> g{{"w", Tensor<double>(Shape{3}, grads[t])}};
    adam_step(p, g, state, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
      m[i] = 0.9L * m[i] + 0.1L * grads[t][i];
      v[i] = 0.999L * v[i] + 0.001L * grads[t][i] * grads[t][i];
      const long double mh = m[i] / (1 - std::pow(0.9L, t + 1)), vh = v[i] / (1 - std::pow(0.999L, t + 1));
      w[i] -= 0.01L * mh / (std::sqrt(vh) + 1e-8L);
      EXPECT_NEAR(p.tensors.at("w")[i], static_cast<double>(w[i]), 1e-12);
    }
  }
  EXPECT_EQ(state.step, 3u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  TrainConfig cfg;
  ModelParams<float> p;
  p.tensors.emplace("a", Tensor<float>(Shape{2}, std::vector<float>{1.5f, -2.0f}));
  auto state = TrainState<float>::initial(cfg);
  adam_step(p, {{"a", Tensor<float>::zeros({2})}}, state, cfg);
  EXPECT_EQ(p.tensors.at("a").vec(), (std::vector<float>{1.5f, -2.0f}));
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  TrainConfig cfg;
  ModelParams<float> p;
  p.tensors.emplace("stage1.block0.attn.q_weight", Tensor<float>::zeros({2}));
  auto state = TrainState<float>::initial(cfg);
  Tensor<float> g = Tensor<float>::zeros({2});
  g[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    adam_step(p, {{"stage1.block0.attn.q_weight", g}}, state, cfg);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("stage1.block0.attn.q_weight"), std::string::npos);
  }
}

TEST(Scheduler, PlateauSequences) {
  TrainConfig cfg;  // lr 1e-4, patience 2, factor 0.1
  auto s = TrainState<float>::initial(cfg);
  for (double v : {1.0, 0.9, 0.8}) EXPECT_FALSE(plateau_scheduler(s, v, cfg));
  EXPECT_EQ(s.lr, 1e-4);

  s = TrainState<float>::initial(cfg);
  std::vector<bool> reduced;
  for (double v : {1.0, 1.0, 1.0, 1.0}) reduced.push_back(plateau_scheduler(s, v, cfg));
  EXPECT_EQ(reduced, (std::vector<bool>{false, false, false, true}));
  EXPECT_NEAR(s.lr, 1e-5, 1e-20);

  cfg.min_lr = 5e-6;
  for (int i = 0; i < 20; ++i) plateau_scheduler(s, 1.0, cfg);
  EXPECT_EQ(s.lr, 5e-6);
  EXPECT_THROW(plateau_scheduler(s, std::nan(""), cfg), NumericalError);
}

TEST(Split, ScanLevelEightyTwentyWithoutLeakage) {
  const auto m = fake_manifest(270);
  const auto s = split_dataset(m, 0.8, 1);
  EXPECT_EQ(s.train.size(), 216u);
  EXPECT_EQ(s.test.size(), 54u);
  std::set<std::string> tr(s.train.begin(), s.train.end());
  for (const auto& id : s.test) EXPECT_FALSE(tr.count(id)) << id;
  EXPECT_EQ(tr.size() + s.test.size(), 270u);
  // Deterministic per seed, different across seeds.
  EXPECT_EQ(split_dataset(m, 0.8, 1).test, s.test);
  EXPECT_NE(split_dataset(m, 0.8, 2).test, s.test);
  EXPECT_THROW(split_dataset(fake_manifest(1), 0.8, 1), ValidationError);
  EXPECT_THROW(split_dataset(m, 1.0, 1), ConfigError);

  const auto f = testing_support::temp_dir("split") / "split.csv";
  write_split(s, f);
  const auto back = read_split(f);
  EXPECT_EQ(back.train, s.train);
  EXPECT_EQ(back.test, s.test);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto mc = tiny_model();
  Checkpoint ck{mc, init_parameters<float>(mc, 4), 0.25, std::nullopt};
  auto st = TrainState<float>::initial(quick_train(3));
  st.epoch = 2;
  st.step = 17;
  st.best_val_loss = 0.3;
  st.moments["decoder.head.bias"] = {Tensor<float>(Shape{1}, std::vector<float>{0.1f}),
                                     Tensor<float>(Shape{1}, std::vector<float>{0.2f})};
  ck.state = st;
  const auto bytes = serialize_checkpoint(ck);
  const auto back = parse_checkpoint(bytes);
  EXPECT_EQ(back.model, mc);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.val_loss, 0.25);
  ASSERT_TRUE(back.state.has_value());
  EXPECT_EQ(*back.state, st);
  EXPECT_EQ(serialize_checkpoint(back), bytes);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() / 2);
  EXPECT_THROW(parse_checkpoint(cut), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(parse_checkpoint(extra), FormatError);
}

TEST(Training, SmokeRunWritesLogAndCheckpoints) {
  const auto dir = testing_support::temp_dir("train_smoke");
  auto tc = quick_train(2);
  tc.max_train_slices = 20;
  tc.max_val_slices = 4;
  const auto r = train(tc, tiny_model(), small_manifest(), dir);
  const auto log = read_text(r.log);
  std::istringstream is(log);
  std::string header, line;
  std::getline(is, header);
  EXPECT_EQ(header, kTrainLogHeader);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4);
  }
  EXPECT_EQ(rows, 2u);
  EXPECT_TRUE(std::filesystem::exists(r.best_checkpoint));
  EXPECT_TRUE(std::filesystem::exists(r.last_checkpoint));
  EXPECT_TRUE(std::filesystem::exists(dir / "split.csv"));
  const auto best = load_checkpoint(r.best_checkpoint);
  const auto last = load_checkpoint(r.last_checkpoint);
  EXPECT_LE(best.val_loss, last.val_loss);
  EXPECT_EQ(last.state->epoch, 2u);
  for (double v : r.train_losses) EXPECT_TRUE(std::isfinite(v));
}

TEST(Training, OverfitsFourSlices) {
  const auto m = small_manifest();
  const auto split = split_dataset(m, 0.8, 1);
  TrainData data;
  data.train = load_slices(m, {split.train.front()}, {"clean"}, 4, 1);
  data.val = data.train;
  auto tc = quick_train(5);
  tc.lr = 3e-3;
  const auto r = train(tc, tiny_model(), data, testing_support::temp_dir("overfit"));
  ASSERT_EQ(r.train_losses.size(), 5u);
  for (std::size_t i = 1; i < r.train_losses.size(); ++i) EXPECT_LT(r.train_losses[i], r.train_losses[i - 1]) << i;
}

TEST(Training, SeededRunsAreBitwiseIdentical) {
  auto tc = quick_train(2);
  tc.max_train_slices = 8;
  tc.max_val_slices = 4;
  const auto a = testing_support::temp_dir("repro_a"), b = testing_support::temp_dir("repro_b");
  train(tc, tiny_model(), small_manifest(), a);
  train(tc, tiny_model(), small_manifest(), b);
  EXPECT_EQ(strip_wall_time(read_text(a / "train_log.csv")), strip_wall_time(read_text(b / "train_log.csv")));
  EXPECT_EQ(read_bytes(a / "last.ckpt"), read_bytes(b / "last.ckpt"));
  EXPECT_EQ(read_bytes(a / "best.ckpt"), read_bytes(b / "best.ckpt"));
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  auto tc = quick_train(3);
  tc.max_train_slices = 8;
  tc.max_val_slices = 4;
  const auto full = testing_support::temp_dir("resume_full"), part = testing_support::temp_dir("resume_part");
  train(tc, tiny_model(), small_manifest(), full);
  auto first = tc;
  first.epochs = 2;
  train(first, tiny_model(), small_manifest(), part);
  const auto ck = load_checkpoint(part / "last.ckpt");
  train(tc, tiny_model(), small_manifest(), part, ck);
  EXPECT_EQ(read_bytes(full / "last.ckpt"), read_bytes(part / "last.ckpt"));
  EXPECT_EQ(strip_wall_time(read_text(full / "train_log.csv")), strip_wall_time(read_text(part / "train_log.csv")));

  auto other = tiny_model();
  other.ffn_expansion = 2;
  EXPECT_THROW(train(tc, other, small_manifest(), part, ck), ConfigError);
}

TEST(Training, RejectsBadConfig) {
  auto tc = quick_train(0);
  EXPECT_THROW(train(tc, tiny_model(), small_manifest(), testing_support::temp_dir("bad")), ConfigError);
}

TEST(Evaluate, ReferenceModeScoresPerfectly) {
  const auto& m = small_manifest();
  const auto r = evaluate(nullptr, m);
  EXPECT_EQ(r.rows.size(), 30u);
  for (const auto& row : r.rows) EXPECT_EQ(row.metrics.dice_score, 1.0);
  EXPECT_EQ(r.mean_dice("clean"), 1.0);
  ASSERT_EQ(r.kinds.size(), 5u);
  EXPECT_EQ(r.kinds[0].role, "clean");
  for (const auto& k : r.kinds) EXPECT_EQ(k.dice_drop, 0.0);
  ASSERT_TRUE(r.clean_volumes.has_value());
  EXPECT_EQ(r.clean_volumes->mean_abs_diff, 0.0);
  EXPECT_GT(r.clean_volumes->mean_ref, 0.0);
  const auto only = evaluate(nullptr, m, {source_name(0)}, {"clean", "noise"});
  EXPECT_EQ(only.rows.size(), 2u);
}

TEST(Evaluate, ModelSegmentationKeepsGeometryAndIsBinary) {
  const auto& m = small_manifest();
  const auto mc = tiny_model();
  const Checkpoint ck{mc, init_parameters<float>(mc, 1), std::nan(""), std::nullopt};
  const auto img = nifti::read(m.resolve(m.entries[0]).string());
  const auto seg = segment_volume(img, ck.params, mc);
  EXPECT_TRUE(seg.same_geometry(img));
  for (float v : seg.data) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  const auto r = evaluate(&ck, m, {source_name(1)}, {"clean"});
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_GE(r.rows[0].metrics.dice_score, 0.0);
  EXPECT_LE(r.rows[0].metrics.dice_score, 1.0);
}
