#pragma once

// Checkpoint container (all integers and floats little-endian):
//   "WMHS" | u32 version
//   ModelConfig: 6 x 4 u64 (channels, depths, R, heads, decoder, ...) see write_config
//   u64 parameter count, then per parameter:
//     u32 path length | path bytes | u32 rank | rank x u64 dims | f32 values
//   f64 validation loss of the saved weights (NaN when unknown)
//   u8 has_state; when 1: u64 epoch | u64 step | f64 lr | f64 best | u64 since |
//     u64 rng seed | u64 moment count | per moment: path, m values, v values (f32)

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "wmhseg/errors.hpp"
#include "wmhseg/optimizer.hpp"
#include "wmhseg/segnet.hpp"

namespace wmhseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  ModelParams<float> params;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<TrainState<float>> state;
};

namespace detail {

class CkptWriter {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void floats(const Tensor<float>& t) {
    for (float v : t.vec()) u32(std::bit_cast<std::uint32_t>(v));
  }
  std::vector<std::uint8_t> bytes;
};

class CkptReader {
 public:
  CkptReader(const std::vector<std::uint8_t>& b, std::string name) : bytes_(b), name_(std::move(name)) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  void floats(Tensor<float>& t) {
    for (auto& v : t.vec()) v = std::bit_cast<float>(u32());
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint " + name_ + " is truncated");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& name() const { return name_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline void write_quad(CkptWriter& w, const Quad& q) {
  for (auto v : q) w.u64(v);
}
inline Quad read_quad(CkptReader& r) {
  Quad q{};
  for (auto& v : q) v = r.u64();
  return q;
}

inline Tensor<float> read_tensor_header(CkptReader& r) {
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError("checkpoint " + r.name() + ": implausible tensor rank");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = r.u64();
    if (d > (std::size_t{1} << 32)) throw FormatError("checkpoint " + r.name() + ": implausible dimension");
    n *= d;
  }
  if (n > (std::size_t{1} << 32)) throw FormatError("checkpoint " + r.name() + ": tensor too large");
  return Tensor<float>(shape);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  detail::CkptWriter w;
  for (char c : std::string("WMHS")) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  const auto& m = ck.model;
  detail::write_quad(w, m.stage_channels);
  detail::write_quad(w, m.stage_depths);
  detail::write_quad(w, m.reduction_factors);
  detail::write_quad(w, m.num_heads);
  detail::write_quad(w, m.decoder_channels);
  w.u64(m.ffn_expansion);
  w.u64(m.input_h);
  w.u64(m.input_w);
  w.u64(m.out_channels);
  w.u64(ck.params.tensors.size());
  for (const auto& [path, t] : ck.params.tensors) {
    w.str(path);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    w.floats(t);
  }
  w.f64(ck.val_loss);
  w.u8(ck.state ? 1 : 0);
  if (ck.state) {
    const auto& s = *ck.state;
    w.u64(s.epoch);
    w.u64(s.step);
    w.f64(s.lr);
    w.f64(s.best_val_loss);
    w.u64(s.epochs_since_improvement);
    w.u64(s.rng_seed);
    w.u64(s.moments.size());
    for (const auto& [path, mom] : s.moments) {
      w.str(path);
      w.u32(static_cast<std::uint32_t>(mom.m.rank()));
      for (auto d : mom.m.shape()) w.u64(d);
      w.floats(mom.m);
      w.floats(mom.v);
    }
  }
  return std::move(w.bytes);
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>") {
  detail::CkptReader r(bytes, name);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "WMHS", 4) != 0) {
    throw FormatError(name + " is not a checkpoint (bad magic)");
  }
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(name + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  auto& m = ck.model;
  m.stage_channels = detail::read_quad(r);
  m.stage_depths = detail::read_quad(r);
  m.reduction_factors = detail::read_quad(r);
  m.num_heads = detail::read_quad(r);
  m.decoder_channels = detail::read_quad(r);
  m.ffn_expansion = r.u64();
  m.input_h = r.u64();
  m.input_w = r.u64();
  m.out_channels = r.u64();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw FormatError(name + ": invalid model config: " + e.what());
  }
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string path = r.str();
    Tensor<float> t = detail::read_tensor_header(r);
    r.floats(t);
    ck.params.tensors.emplace(std::move(path), std::move(t));
  }
  // The parameter set must be exactly the one the config implies.
  const auto specs = parameter_specs(m);
  if (specs.size() != ck.params.tensors.size()) throw FormatError(name + ": parameter set does not match config");
  for (const auto& s : specs) {
    auto it = ck.params.tensors.find(s.path);
    if (it == ck.params.tensors.end() || it->second.shape() != s.shape) {
      throw FormatError(name + ": parameter " + s.path + " missing or misshaped");
    }
  }
  ck.val_loss = r.f64();
  if (r.u8() != 0) {
    TrainState<float> s;
    s.epoch = r.u64();
    s.step = r.u64();
    s.lr = r.f64();
    s.best_val_loss = r.f64();
    s.epochs_since_improvement = r.u64();
    s.rng_seed = r.u64();
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string path = r.str();
      AdamMoments<float> mom;
      mom.m = detail::read_tensor_header(r);
      mom.v = Tensor<float>(mom.m.shape());
      r.floats(mom.m);
      r.floats(mom.v);
      s.moments.emplace(std::move(path), std::move(mom));
    }
    ck.state = std::move(s);
  }
  if (!r.done()) throw FormatError(name + ": trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& file) {
  const auto bytes = serialize_checkpoint(ck);
  // Write to a temporary and rename so a crash never leaves a torn checkpoint.
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, file, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + file.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, file.string());
}

}  // namespace wmhseg
