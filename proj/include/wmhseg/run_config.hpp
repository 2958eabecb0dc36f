#pragma once

// key=value configuration shared by the command-line tool. Every key maps onto
// a field of TrainConfig, ModelConfig or PhantomConfig; unknown keys are
// rejected so typos do not silently fall back to defaults.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wmhseg/errors.hpp"
#include "wmhseg/optimizer.hpp"
#include "wmhseg/phantom.hpp"
#include "wmhseg/segnet.hpp"

namespace wmhseg {

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key " + key + ": '" + v + "' is not a number");
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] != '-') {
      const auto u = std::stoull(v, &used);
      if (used == v.size()) return u;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("config key " + key + ": '" + v + "' is not a non-negative integer");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": '" + v + "' is not a boolean");
}

inline Quad to_quad(const std::string& key, const std::string& v) {
  Quad q{};
  std::istringstream is(v);
  std::string tok;
  std::size_t i = 0;
  while (std::getline(is, tok, ',')) {
    if (i == 4) break;
    q[i++] = to_uint(key, trim(tok));
  }
  if (i != 4 || std::getline(is, tok)) throw ConfigError("config key " + key + ": expected 4 comma-separated integers");
  return q;
}

template <class A>
std::string join(const A& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

/// Shortest text that reads back to the same double.
inline std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// Reads `key = value` lines; '#' starts a comment.
inline ConfigMap read_config_file(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("cannot read config file " + file.string());
  ConfigMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigMap to_config_map(const TrainConfig& c) {
  return {{"lr", detail::num(c.lr)},
          {"batch_size", std::to_string(c.batch_size)},
          {"epochs", std::to_string(c.epochs)},
          {"plateau_patience", std::to_string(c.plateau_patience)},
          {"plateau_factor", detail::num(c.plateau_factor)},
          {"min_lr", detail::num(c.min_lr)},
          {"split_ratio", detail::num(c.split_ratio)},
          {"seed", std::to_string(c.seed)},
          {"beta1", detail::num(c.beta1)},
          {"beta2", detail::num(c.beta2)},
          {"adam_eps", detail::num(c.adam_eps)},
          {"checkpoint_every", std::to_string(c.checkpoint_every)},
          {"use_augmented", c.use_augmented ? "true" : "false"},
          {"max_train_slices", std::to_string(c.max_train_slices)},
          {"max_val_slices", std::to_string(c.max_val_slices)},
          {"skip_empty_slices", c.skip_empty_slices ? "true" : "false"}};
}

inline ConfigMap to_config_map(const ModelConfig& c) {
  return {{"stage_channels", detail::join(c.stage_channels)},
          {"stage_depths", detail::join(c.stage_depths)},
          {"reduction_factors", detail::join(c.reduction_factors)},
          {"num_heads", detail::join(c.num_heads)},
          {"ffn_expansion", std::to_string(c.ffn_expansion)},
          {"decoder_channels", detail::join(c.decoder_channels)}};
}

inline ConfigMap to_config_map(const PhantomConfig& c) {
  return {{"nx", std::to_string(c.nx)},
          {"ny", std::to_string(c.ny)},
          {"nz", std::to_string(c.nz)},
          {"spacing", detail::num(c.spacing[0]) + "," + detail::num(c.spacing[1]) + "," + detail::num(c.spacing[2])},
          {"min_lesions", std::to_string(c.min_lesions)},
          {"max_lesions", std::to_string(c.max_lesions)},
          {"lesion_radius_min_mm", detail::num(c.lesion_radius_min_mm)},
          {"lesion_radius_max_mm", detail::num(c.lesion_radius_max_mm)},
          {"blur_sigma_vox", detail::num(c.blur_sigma_vox)}};
}

/// Applies one key to whichever config owns it. Returns false for unknown keys.
inline bool apply_config_key(const std::string& k, const std::string& v, TrainConfig* t, ModelConfig* m,
                             PhantomConfig* p) {
  using namespace detail;
  if (t) {
    if (k == "lr") return t->lr = to_double(k, v), true;
    if (k == "batch_size") return t->batch_size = to_uint(k, v), true;
    if (k == "epochs") return t->epochs = to_uint(k, v), true;
    if (k == "plateau_patience") return t->plateau_patience = to_uint(k, v), true;
    if (k == "plateau_factor") return t->plateau_factor = to_double(k, v), true;
    if (k == "min_lr") return t->min_lr = to_double(k, v), true;
    if (k == "split_ratio") return t->split_ratio = to_double(k, v), true;
    if (k == "seed") return t->seed = to_uint(k, v), true;
    if (k == "beta1") return t->beta1 = to_double(k, v), true;
    if (k == "beta2") return t->beta2 = to_double(k, v), true;
    if (k == "adam_eps") return t->adam_eps = to_double(k, v), true;
    if (k == "checkpoint_every") return t->checkpoint_every = to_uint(k, v), true;
    if (k == "use_augmented") return t->use_augmented = to_bool(k, v), true;
    if (k == "max_train_slices") return t->max_train_slices = to_uint(k, v), true;
    if (k == "max_val_slices") return t->max_val_slices = to_uint(k, v), true;
    if (k == "skip_empty_slices") return t->skip_empty_slices = to_bool(k, v), true;
  }
  if (m) {
    if (k == "stage_channels") return m->stage_channels = to_quad(k, v), true;
    if (k == "stage_depths") return m->stage_depths = to_quad(k, v), true;
    if (k == "reduction_factors") return m->reduction_factors = to_quad(k, v), true;
    if (k == "num_heads") return m->num_heads = to_quad(k, v), true;
    if (k == "ffn_expansion") return m->ffn_expansion = to_uint(k, v), true;
    if (k == "decoder_channels") return m->decoder_channels = to_quad(k, v), true;
  }
  if (p) {
    if (k == "nx") return p->nx = to_uint(k, v), true;
    if (k == "ny") return p->ny = to_uint(k, v), true;
    if (k == "nz") return p->nz = to_uint(k, v), true;
    if (k == "spacing") {
      std::istringstream is(v);
      std::string tok;
      std::size_t i = 0;
      while (std::getline(is, tok, ',')) {
        if (i == 3) throw ConfigError("config key spacing: expected 3 values");
        p->spacing[i++] = static_cast<float>(to_double(k, trim(tok)));
      }
      if (i != 3) throw ConfigError("config key spacing: expected 3 values");
      return true;
    }
    if (k == "min_lesions") return p->min_lesions = static_cast<int>(to_uint(k, v)), true;
    if (k == "max_lesions") return p->max_lesions = static_cast<int>(to_uint(k, v)), true;
    if (k == "lesion_radius_min_mm") return p->lesion_radius_min_mm = to_double(k, v), true;
    if (k == "lesion_radius_max_mm") return p->lesion_radius_max_mm = to_double(k, v), true;
    if (k == "blur_sigma_vox") return p->blur_sigma_vox = to_double(k, v), true;
  }
  return false;
}

/// Applies every entry, rejecting keys that none of the given configs own.
inline void apply_config(const ConfigMap& values, TrainConfig* t, ModelConfig* m, PhantomConfig* p) {
  for (const auto& [k, v] : values) {
    if (!apply_config_key(k, v, t, m, p)) throw ConfigError("unknown config key '" + k + "'");
  }
}

inline std::string format_config(const ConfigMap& values) {
  std::string out;
  for (const auto& [k, v] : values) out += k + "=" + v + "\n";
  return out;
}

}  // namespace wmhseg
