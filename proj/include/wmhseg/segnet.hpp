#pragma once

// Hierarchical transformer encoder + convolutional U-Net style decoder producing
// a per-pixel lesion probability map.
//
// Parameter paths:
//   stage{s}.patch_embed.{weight,bias}, stage{s}.patch_embed.norm.{gamma,beta}
//   stage{s}.block{b}.norm1.*, .attn.{q,k,v,proj}_{weight,bias},
//   stage{s}.block{b}.attn.sr_{weight,bias}, .attn.sr_norm.*   (only when R > 1)
//   stage{s}.block{b}.norm2.*, .ffn.{fc1,dw,fc2}_{weight,bias}
//   stage{s}.norm.*
//   decoder.bottleneck.*, decoder.up{3,2,1}.*, decoder.head.*
// Stages are numbered 1..4.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wmhseg/autograd.hpp"
#include "wmhseg/ops.hpp"
#include "wmhseg/rng.hpp"
#include "wmhseg/tensor.hpp"

namespace wmhseg {

using Quad = std::array<std::size_t, 4>;

struct ModelConfig {
  Quad stage_channels{32, 64, 160, 256};
  Quad stage_depths{2, 2, 2, 2};
  Quad reduction_factors{64, 16, 4, 1};
  Quad num_heads{1, 2, 5, 8};
  std::size_t ffn_expansion = 4;
  Quad decoder_channels{32, 64, 160, 256};
  std::size_t input_h = 256;
  std::size_t input_w = 256;
  std::size_t out_channels = 1;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  struct StageGeometry {
    std::size_t kernel, stride, padding, h, w;
  };

  /// Patch-embedding geometry of each stage for the configured input size.
  std::array<StageGeometry, 4> stage_geometry() const {
    std::array<StageGeometry, 4> g{};
    std::size_t h = input_h, w = input_w;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t k = s == 0 ? 7 : 3, st = s == 0 ? 4 : 2, p = s == 0 ? 3 : 1;
      if (h + 2 * p < k || w + 2 * p < k) {
        throw DimensionError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                             " too small for stage " + std::to_string(s + 1) + " patch embedding");
      }
      h = (h + 2 * p - k) / st + 1;
      w = (w + 2 * p - k) / st + 1;
      g[s] = {k, st, p, h, w};
    }
    return g;
  }

  /// Spatial reduction stride per axis (sqrt of R).
  std::size_t reduction_stride(std::size_t stage) const {
    return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(reduction_factors[stage]))));
  }

  void validate() const {
    if (out_channels != 1) throw ConfigError("only single-channel (binary) output is supported");
    if (ffn_expansion == 0) throw ConfigError("ffn_expansion must be >= 1");
    const auto geo = stage_geometry();
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string tag = "stage " + std::to_string(s + 1) + ": ";
      if (stage_channels[s] == 0 || decoder_channels[s] == 0 || stage_depths[s] == 0) {
        throw ConfigError(tag + "channels and depths must be >= 1");
      }
      if (num_heads[s] == 0 || stage_channels[s] % num_heads[s] != 0) {
        throw ConfigError(tag + "channels " + std::to_string(stage_channels[s]) +
                          " not divisible by heads " + std::to_string(num_heads[s]));
      }
      const std::size_t r = reduction_factors[s];
      const std::size_t root = reduction_stride(s);
      if (r == 0 || root * root != r) {
        throw ConfigError(tag + "reduction factor " + std::to_string(r) + " is not a perfect square");
      }
      const std::size_t n = geo[s].h * geo[s].w;
      if (n % r != 0 || geo[s].h % root != 0 || geo[s].w % root != 0) {
        throw ConfigError(tag + "reduction factor " + std::to_string(r) + " does not divide the " +
                          std::to_string(geo[s].h) + "x" + std::to_string(geo[s].w) + " token grid");
      }
    }
  }
};

template <std::floating_point T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  const Tensor<T>& at(const std::string& path) const {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw ConfigError("missing parameter " + path);
    return it->second;
  }

  template <std::floating_point U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [k, t] : tensors) out.tensors.emplace(k, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

template <std::floating_point T>
using VarMap = std::map<std::string, Var<T>>;

/// Wraps parameters as graph leaves; gradients land on the returned Vars.
template <std::floating_point T>
VarMap<T> as_vars(const ModelParams<T>& params, bool requires_grad) {
  VarMap<T> out;
  for (const auto& [k, t] : params.tensors) out.emplace(k, Var<T>::leaf(t, requires_grad));
  return out;
}

template <std::floating_point T>
const Var<T>& param(const VarMap<T>& vars, const std::string& path) {
  auto it = vars.find(path);
  if (it == vars.end()) throw ConfigError("missing parameter " + path);
  return it->second;
}

// ---------------------------------------------------------------------------
// Parameter layout and initialization

enum class InitKind { kProjection, kConv, kZero, kOne };

struct ParamSpec {
  std::string path;
  Shape shape;
  InitKind init;
  std::size_t fan_in = 0;
};

inline std::string stage_prefix(std::size_t stage) { return "stage" + std::to_string(stage + 1); }

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  auto conv = [&](const std::string& p, std::size_t cout, std::size_t cin_g, std::size_t k) {
    specs.push_back({p + ".weight", {cout, cin_g, k, k}, InitKind::kConv, cin_g * k * k});
    specs.push_back({p + ".bias", {cout}, InitKind::kZero});
  };
  auto norm = [&](const std::string& p, std::size_t c) {
    specs.push_back({p + ".gamma", {c}, InitKind::kOne});
    specs.push_back({p + ".beta", {c}, InitKind::kZero});
  };
  auto proj = [&](const std::string& p, std::size_t out, std::size_t in) {
    specs.push_back({p + "_weight", {out, in}, InitKind::kProjection, in});
    specs.push_back({p + "_bias", {out}, InitKind::kZero});
  };
  const auto geo = cfg.stage_geometry();
  std::size_t prev = 1;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string sp = stage_prefix(s);
    const std::size_t c = cfg.stage_channels[s];
    conv(sp + ".patch_embed", c, prev, geo[s].kernel);
    norm(sp + ".patch_embed.norm", c);
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      norm(bp + ".norm1", c);
      proj(bp + ".attn.q", c, c);
      proj(bp + ".attn.k", c, c);
      proj(bp + ".attn.v", c, c);
      proj(bp + ".attn.proj", c, c);
      if (cfg.reduction_factors[s] > 1) {
        const std::size_t r = cfg.reduction_stride(s);
        specs.push_back({bp + ".attn.sr_weight", {c, c, r, r}, InitKind::kConv, c * r * r});
        specs.push_back({bp + ".attn.sr_bias", {c}, InitKind::kZero});
        norm(bp + ".attn.sr_norm", c);
      }
      norm(bp + ".norm2", c);
      const std::size_t hidden = c * cfg.ffn_expansion;
      proj(bp + ".ffn.fc1", hidden, c);
      specs.push_back({bp + ".ffn.dw_weight", {hidden, 1, 3, 3}, InitKind::kConv, 9});
      specs.push_back({bp + ".ffn.dw_bias", {hidden}, InitKind::kZero});
      proj(bp + ".ffn.fc2", c, hidden);
    }
    norm(sp + ".norm", c);
    prev = c;
  }
  const auto& d = cfg.decoder_channels;
  const auto& e = cfg.stage_channels;
  conv("decoder.bottleneck", d[3], e[3], 3);
  conv("decoder.up3", d[2], d[3] + e[2], 3);
  conv("decoder.up2", d[1], d[2] + e[1], 3);
  conv("decoder.up1", d[0], d[1] + e[0], 3);
  conv("decoder.head", cfg.out_channels, d[0], 1);
  return specs;
}

/// Truncated-normal (std 0.02) projections, Kaiming fan-in convolutions, zero
/// biases, unit/zero norm affine. Each tensor draws from a seed derived from its
/// path, so the result does not depend on iteration order.
template <std::floating_point T>
ModelParams<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> params;
  for (const auto& spec : parameter_specs(cfg)) {
    Tensor<T> t(spec.shape);
    Rng rng(derive_seed(seed, spec.path));
    switch (spec.init) {
      case InitKind::kProjection:
        for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.02));
        break;
      case InitKind::kConv: {
        const double std = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
        for (auto& v : t.data()) v = static_cast<T>(rng.normal() * std);
        break;
      }
      case InitKind::kZero:
        break;
      case InitKind::kOne:
        t.fill(T(1));
        break;
    }
    params.tensors.emplace(spec.path, std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Layout helpers

/// [B,C,H,W] -> [B,H*W,C]
template <std::floating_point T>
Var<T> map_to_tokens(const Var<T>& x) {
  const Shape& s = x.shape();
  auto t = ops::reshape(x, {s[0], s[1], s[2] * s[3]});
  return ops::permute(t, {0, 2, 1});
}

/// [B,N,C] -> [B,C,H,W]
template <std::floating_point T>
Var<T> tokens_to_map(const Var<T>& tokens, std::size_t h, std::size_t w) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != h * w) {
    throw DimensionError("tokens " + shape_str(s) + " do not form a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  auto t = ops::permute(tokens, {0, 2, 1});
  return ops::reshape(t, {s[0], s[2], h, w});
}

// ---------------------------------------------------------------------------
// Encoder components

template <std::floating_point T>
struct PatchEmbedding {
  Var<T> tokens;  // [B, H*W, C]
  std::size_t h = 0;
  std::size_t w = 0;
};

/// Strided overlapping convolution tokenizer followed by layer norm.
template <std::floating_point T>
PatchEmbedding<T> overlap_patch_embed(const Var<T>& x, std::size_t stage, const VarMap<T>& vars,
                                      const ModelConfig& cfg) {
  const std::string p = stage_prefix(stage) + ".patch_embed";
  const std::size_t k = stage == 0 ? 7 : 3, s = stage == 0 ? 4 : 2, pad = stage == 0 ? 3 : 1;
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k) {
    throw DimensionError("patch embedding input " + shape_str(xs) + " smaller than kernel " +
                         std::to_string(k));
  }
  (void)cfg;
  auto y = ops::conv2d(x, param(vars, p + ".weight"), param(vars, p + ".bias"), {s, pad, 1});
  const std::size_t h = y.shape()[2], w = y.shape()[3];
  auto tokens = map_to_tokens(y);
  tokens = ops::layer_norm(tokens, param(vars, p + ".norm.gamma"), param(vars, p + ".norm.beta"));
  return {tokens, h, w};
}

template <std::floating_point T>
struct AttentionWeights {
  Var<T> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, proj_weight, proj_bias;
  Var<T> sr_weight, sr_bias, sr_gamma, sr_beta;  // undefined when R == 1

  static AttentionWeights from(const VarMap<T>& vars, const std::string& prefix, bool reduced) {
    AttentionWeights w;
    w.q_weight = param(vars, prefix + ".q_weight");
    w.q_bias = param(vars, prefix + ".q_bias");
    w.k_weight = param(vars, prefix + ".k_weight");
    w.k_bias = param(vars, prefix + ".k_bias");
    w.v_weight = param(vars, prefix + ".v_weight");
    w.v_bias = param(vars, prefix + ".v_bias");
    w.proj_weight = param(vars, prefix + ".proj_weight");
    w.proj_bias = param(vars, prefix + ".proj_bias");
    if (reduced) {
      w.sr_weight = param(vars, prefix + ".sr_weight");
      w.sr_bias = param(vars, prefix + ".sr_bias");
      w.sr_gamma = param(vars, prefix + ".sr_norm.gamma");
      w.sr_beta = param(vars, prefix + ".sr_norm.beta");
    }
    return w;
  }
};

/// Attention probabilities recorded during a forward pass, one entry per call,
/// each shaped [B, heads, N, N/R].
template <std::floating_point T>
struct AttentionTrace {
  std::vector<Tensor<T>> weights;
};

/// softmax(q k^T * scale) v for q [B,h,N,d], k/v [B,h,M,d].
template <std::floating_point T>
Var<T> scaled_dot_product_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, T scale,
                                    AttentionTrace<T>* trace = nullptr) {
  auto scores = ops::scale(ops::matmul(q, ops::transpose_last(k)), scale);
  auto attn = ops::softmax(scores, -1);
  if (trace) trace->weights.push_back(attn.value());
  return ops::matmul(attn, v);
}

/// Multi-head self-attention whose keys and values come from a sequence
/// shortened R-fold: each sqrt(R) x sqrt(R) patch of the token grid is folded
/// into one token of width C*R and projected back to C, then layer-normed.
/// Queries keep the full length N.
template <std::floating_point T>
Var<T> efficient_attention(const Var<T>& tokens, std::size_t h, std::size_t w, std::size_t reduction,
                           std::size_t heads, const AttentionWeights<T>& wt,
                           AttentionTrace<T>* trace = nullptr) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != h * w) {
    throw DimensionError("attention tokens " + shape_str(s) + " do not match " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t b = s[0], n = s[1], c = s[2];
  const auto root = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(reduction))));
  if (reduction == 0 || root * root != reduction || n % reduction != 0 || h % root != 0 ||
      w % root != 0) {
    throw ConfigError("reduction factor " + std::to_string(reduction) + " does not divide the " +
                      std::to_string(h) + "x" + std::to_string(w) + " token grid");
  }
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("channels " + std::to_string(c) + " not divisible by heads " +
                      std::to_string(heads));
  }
  const std::size_t d = c / heads;
  auto split = [&](const Var<T>& x, std::size_t len) {
    return ops::permute(ops::reshape(x, {b, len, heads, d}), {0, 2, 1, 3});
  };
  auto q = split(ops::linear(tokens, wt.q_weight, wt.q_bias), n);
  Var<T> kv_src = tokens;
  std::size_t m = n;
  if (reduction > 1) {
    // A stride-root, kernel-root convolution is exactly the patch fold + linear map.
    auto grid = tokens_to_map(tokens, h, w);
    auto reduced = ops::conv2d(grid, wt.sr_weight, wt.sr_bias, {root, 0, 1});
    kv_src = ops::layer_norm(map_to_tokens(reduced), wt.sr_gamma, wt.sr_beta);
    m = n / reduction;
  }
  auto k = split(ops::linear(kv_src, wt.k_weight, wt.k_bias), m);
  auto v = split(ops::linear(kv_src, wt.v_weight, wt.v_bias), m);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  auto ctx = scaled_dot_product_attention(q, k, v, scale, trace);
  auto merged = ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {b, n, c});
  return ops::linear(merged, wt.proj_weight, wt.proj_bias);
}

/// Counted multiply-adds of the score and weighted-sum products of one
/// attention call (the part whose cost scales as N^2 / R).
inline std::size_t attention_score_macs(std::size_t n, std::size_t channels, std::size_t reduction) {
  return 2 * n * (n / reduction) * channels;
}

template <std::floating_point T>
struct FfnWeights {
  Var<T> fc1_weight, fc1_bias, dw_weight, dw_bias, fc2_weight, fc2_bias;

  static FfnWeights from(const VarMap<T>& vars, const std::string& prefix) {
    return {param(vars, prefix + ".fc1_weight"), param(vars, prefix + ".fc1_bias"),
            param(vars, prefix + ".dw_weight"),  param(vars, prefix + ".dw_bias"),
            param(vars, prefix + ".fc2_weight"), param(vars, prefix + ".fc2_bias")};
  }
};

/// Feed-forward block with a 3x3 depthwise convolution between the two
/// projections; the convolution supplies positional information.
template <std::floating_point T>
Var<T> mix_ffn(const Var<T>& tokens, std::size_t h, std::size_t w, const FfnWeights<T>& wt) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != h * w) {
    throw DimensionError("ffn tokens " + shape_str(s) + " do not match " + std::to_string(h) +
                         "x" + std::to_string(w));
  }
  auto hidden = ops::linear(tokens, wt.fc1_weight, wt.fc1_bias);
  const std::size_t ch = hidden.shape()[2];
  auto grid = tokens_to_map(hidden, h, w);
  grid = ops::conv2d(grid, wt.dw_weight, wt.dw_bias, {1, 1, ch});
  auto act = ops::gelu(map_to_tokens(grid));
  return ops::linear(act, wt.fc2_weight, wt.fc2_bias);
}

struct ForwardOptions {
  bool residual_connections = true;
};

template <std::floating_point T>
std::array<Var<T>, 4> encoder_forward(const Var<T>& image, const VarMap<T>& vars,
                                      const ModelConfig& cfg, const ForwardOptions& opt = {},
                                      AttentionTrace<T>* trace = nullptr) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg.input_h || s[3] != cfg.input_w) {
    throw DimensionError("encoder expects [B,1," + std::to_string(cfg.input_h) + "," +
                         std::to_string(cfg.input_w) + "], got " + shape_str(s));
  }
  std::array<Var<T>, 4> features;
  Var<T> x = image;
  for (std::size_t st = 0; st < 4; ++st) {
    const std::string sp = stage_prefix(st);
    auto emb = overlap_patch_embed(x, st, vars, cfg);
    Var<T> tokens = emb.tokens;
    const bool reduced = cfg.reduction_factors[st] > 1;
    for (std::size_t blk = 0; blk < cfg.stage_depths[st]; ++blk) {
      const std::string bp = sp + ".block" + std::to_string(blk);
      auto n1 = ops::layer_norm(tokens, param(vars, bp + ".norm1.gamma"), param(vars, bp + ".norm1.beta"));
      auto attn = efficient_attention(n1, emb.h, emb.w, cfg.reduction_factors[st], cfg.num_heads[st],
                                      AttentionWeights<T>::from(vars, bp + ".attn", reduced), trace);
      tokens = opt.residual_connections ? ops::add(tokens, attn) : attn;
      auto n2 = ops::layer_norm(tokens, param(vars, bp + ".norm2.gamma"), param(vars, bp + ".norm2.beta"));
      auto ffn = mix_ffn(n2, emb.h, emb.w, FfnWeights<T>::from(vars, bp + ".ffn"));
      tokens = opt.residual_connections ? ops::add(tokens, ffn) : ffn;
    }
    tokens = ops::layer_norm(tokens, param(vars, sp + ".norm.gamma"), param(vars, sp + ".norm.beta"));
    x = tokens_to_map(tokens, emb.h, emb.w);
    features[st] = x;
  }
  return features;
}

namespace detail {
template <std::floating_point T>
Var<T> conv_gelu(const Var<T>& x, const VarMap<T>& vars, const std::string& p) {
  return ops::gelu(ops::conv2d(x, param(vars, p + ".weight"), param(vars, p + ".bias"), {1, 1, 1}));
}
}  // namespace detail

/// Decoder: 3x3 conv on the deepest map, then three rounds of
/// {2x bilinear upsample, concatenate the matching encoder map, 3x3 conv, GELU},
/// then a 1x1 conv to one channel and a 4x bilinear upsample to input size.
/// Returns logits. The 1x1 head runs before the final upsample: both are linear
/// and the interpolation weights sum to one, so the order does not change the map.
template <std::floating_point T>
Var<T> decoder_forward(const std::array<Var<T>, 4>& features, const VarMap<T>& vars,
                       const ModelConfig& cfg) {
  const auto geo = cfg.stage_geometry();
  const std::size_t batch = features[0].shape().empty() ? 0 : features[0].shape()[0];
  for (std::size_t s = 0; s < 4; ++s) {
    const Shape expected{batch, cfg.stage_channels[s], geo[s].h, geo[s].w};
    if (features[s].shape() != expected) {
      throw DimensionError("decoder feature " + std::to_string(s + 1) + " has shape " +
                           shape_str(features[s].shape()) + ", expected " + shape_str(expected));
    }
  }
  Var<T> x = detail::conv_gelu(features[3], vars, std::string("decoder.bottleneck"));
  for (std::size_t s = 3; s-- > 0;) {
    x = ops::resize_bilinear(x, geo[s].h, geo[s].w);
    x = ops::concat<T>({x, features[s]}, 1);
    x = detail::conv_gelu(x, vars, "decoder.up" + std::to_string(s + 1));
  }
  x = ops::conv2d(x, param(vars, "decoder.head.weight"), param(vars, "decoder.head.bias"), {1, 0, 1});
  return ops::resize_bilinear(x, cfg.input_h, cfg.input_w);
}

template <std::floating_point T>
Var<T> model_logits(const Var<T>& image, const VarMap<T>& vars, const ModelConfig& cfg,
                    const ForwardOptions& opt = {}) {
  return decoder_forward(encoder_forward(image, vars, cfg, opt), vars, cfg);
}

/// Per-pixel lesion probabilities in (0,1), shape [B,1,H,W].
template <std::floating_point T>
Var<T> model_forward(const Var<T>& image, const VarMap<T>& vars, const ModelConfig& cfg,
                     const ForwardOptions& opt = {}) {
  return ops::sigmoid(model_logits(image, vars, cfg, opt));
}

/// Inference without graph construction.
template <std::floating_point T>
Tensor<T> predict(const Tensor<T>& image, const ModelParams<T>& params, const ModelConfig& cfg) {
  return model_forward(Var<T>::constant(image), as_vars(params, false), cfg).value();
}

}  // namespace wmhseg
