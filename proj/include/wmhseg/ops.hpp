#pragma once

// Differentiable tensor operations. Every op checks its output for NaN/Inf and,
// when an input is tracked, records a closure that propagates gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "wmhseg/autograd.hpp"
#include "wmhseg/gemm.hpp"
#include "wmhseg/tensor.hpp"

namespace wmhseg::ops {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad);
  });
}

template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return make_result<T>("scale", std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <std::floating_point T>
Var<T> sum(const Var<T>& a) {
  long double acc = 0;
  for (T v : a.value().data()) acc += v;
  return make_result<T>("sum", Tensor<T>::scalar(static_cast<T>(acc)), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T s = self.grad[0];
    for (auto& v : g.data()) v += s;
  });
}

template <std::floating_point T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x[i];
    if (v >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>("sigmoid", std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (T(1) - y[i]);
  });
}

/// Exact Gaussian error linear unit, x * Phi(x).
template <std::floating_point T>
Var<T> gelu(const Var<T>& a) {
  const auto& x = a.value();
  Tensor<T> out(a.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  }
  return make_result<T>("gelu", std::move(out), {a}, [inv_sqrt2](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <std::floating_point T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>("reshape", std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

// Moves src (shape `in`) into dst permuted by `perm`; with `scatter` the roles
// are reversed so the same traversal computes the inverse permutation.
template <class T>
void permute_copy(const Shape& in, const std::vector<std::size_t>& perm, const T* src, T* dst,
                  bool scatter) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  const std::size_t total = shape_numel(in);
  if (total == 0) return;
  const std::size_t inner = out[rank - 1];
  const std::size_t inner_step = step[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src_off = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    if (scatter) {
      for (std::size_t j = 0; j < inner; ++j) dst[src_off + j * inner_step] += src[o + j];
    } else {
      for (std::size_t j = 0; j < inner; ++j) dst[o + j] = src[src_off + j * inner_step];
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      src_off += step[d];
      if (idx[d] < out[d]) break;
      src_off -= step[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <std::floating_point T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) {
    throw DimensionError("permute: " + std::to_string(perm.size()) + " axes for shape " +
                         shape_str(in));
  }
  std::vector<bool> used(perm.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size() || used[perm[i]]) throw DimensionError("permute: invalid axis order");
    used[perm[i]] = true;
    out_shape[i] = in[perm[i]];
  }
  Tensor<T> out(out_shape);
  detail::permute_copy(in, perm, a.value().ptr(), out.ptr(), false);
  return make_result<T>("permute", std::move(out), {a}, [perm](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    detail::permute_copy(g.shape(), perm, self.grad.ptr(), g.ptr(), true);
  });
}

/// Swaps the last two axes.
template <std::floating_point T>
Var<T> transpose_last(const Var<T>& a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw DimensionError("transpose_last needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

template <std::floating_point T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = xs[0].shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " +
                           shape_str(s));
    }
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  Tensor<T> out(out_shape);
  const std::size_t out_row = out_shape[ax] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& x : xs) {
    offsets.push_back(offset);
    const std::size_t row = x.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.value().ptr() + o * row, row, out.ptr() + o * out_row + offset);
    }
    offset += row;
  }
  return make_result<T>("concat", std::move(out), xs,
                        [offsets, outer, out_row](Node<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = self.parents[k];
                            if (!p->requires_grad) continue;
                            auto& g = p->grad_buffer();
                            const std::size_t row = g.size() / outer;
                            for (std::size_t o = 0; o < outer; ++o) {
                              const T* src = self.grad.ptr() + o * out_row + offsets[k];
                              T* dst = g.ptr() + o * row;
                              for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product a[..,M,K] x b[..,K,P] with broadcast batch axes.
template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " +
                          shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t M = as[as.size() - 2], K = as.back(), P = bs.back();
  if (bs[bs.size() - 2] != K) throw mismatch();

  const std::size_t batch_rank = std::max(as.size(), bs.size()) - 2;
  Shape batch(batch_rank), a_batch(batch_rank, 1), b_batch(batch_rank, 1);
  for (std::size_t i = 0; i < as.size() - 2; ++i) a_batch[batch_rank - (as.size() - 2) + i] = as[i];
  for (std::size_t i = 0; i < bs.size() - 2; ++i) b_batch[batch_rank - (bs.size() - 2) + i] = bs[i];
  for (std::size_t i = 0; i < batch_rank; ++i) {
    if (a_batch[i] != b_batch[i] && a_batch[i] != 1 && b_batch[i] != 1) throw mismatch();
    batch[i] = std::max(a_batch[i], b_batch[i]);
  }
  const std::size_t nbatch = shape_numel(batch);
  // Per output batch: offsets into a and b (broadcast axes have stride 0).
  std::vector<std::size_t> a_off(nbatch), b_off(nbatch);
  {
    std::vector<std::size_t> idx(batch_rank, 0);
    for (std::size_t n = 0; n < nbatch; ++n) {
      std::size_t ao = 0, bo = 0;
      for (std::size_t d = 0; d < batch_rank; ++d) {
        ao = ao * a_batch[d] + (a_batch[d] == 1 ? 0 : idx[d]);
        bo = bo * b_batch[d] + (b_batch[d] == 1 ? 0 : idx[d]);
      }
      a_off[n] = ao * M * K;
      b_off[n] = bo * K * P;
      for (std::size_t d = batch_rank; d-- > 0;) {
        if (++idx[d] < batch[d]) break;
        idx[d] = 0;
      }
    }
  }
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(P);
  Tensor<T> out(out_shape);
  for (std::size_t n = 0; n < nbatch; ++n) {
    wmhseg::detail::gemm(false, false, M, P, K, a.value().ptr() + a_off[n],
                         b.value().ptr() + b_off[n], out.ptr() + n * M * P, false);
  }
  return make_result<T>(
      "matmul", std::move(out), {a, b}, [a_off, b_off, M, K, P](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        for (std::size_t n = 0; n < a_off.size(); ++n) {
          const T* g = self.grad.ptr() + n * M * P;
          if (pa->requires_grad) {
            wmhseg::detail::gemm(false, true, M, K, P, g, pb->value.ptr() + b_off[n],
                                 pa->grad_buffer().ptr() + a_off[n], true);
          }
          if (pb->requires_grad) {
            wmhseg::detail::gemm(true, false, K, P, M, pa->value.ptr() + a_off[n], g,
                                 pb->grad_buffer().ptr() + b_off[n], true);
          }
        }
      });
}

/// y = x W^T + b over the last axis; weight is [out, in], bias [out] or undefined.
template <std::floating_point T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[1]) {
    throw DimensionError("linear: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != ws[0])) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(ws));
  }
  const std::size_t in = ws[1], outf = ws[0], rows = x.size() / in;
  Shape out_shape = xs;
  out_shape.back() = outf;
  Tensor<T> out(out_shape);
  wmhseg::detail::gemm(false, true, rows, outf, in, x.value().ptr(), weight.value().ptr(),
                       out.ptr(), false);
  if (has_bias) {
    const T* bv = bias.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out.ptr() + r * outf;
      for (std::size_t j = 0; j < outf; ++j) row[j] += bv[j];
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>("linear", std::move(out), inputs, [rows, in, outf](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    const T* g = self.grad.ptr();
    if (px->requires_grad) {
      wmhseg::detail::gemm(false, false, rows, in, outf, g, pw->value.ptr(),
                           px->grad_buffer().ptr(), true);
    }
    if (pw->requires_grad) {
      wmhseg::detail::gemm(true, false, outf, in, rows, g, px->value.ptr(),
                           pw->grad_buffer().ptr(), true);
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      T* gb = self.parents[2]->grad_buffer().ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < outf; ++j) gb[j] += g[r * outf + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, ho, wo, stride, pad, groups, cin_g, cout_g;
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* drow = dst + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill_n(drow, g.wo, T(0));
            continue;
          }
          const T* srow = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            drow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0)
                                                                 : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* xrow = xc + static_cast<std::size_t>(iy) * g.w;
          const T* srow = src + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) xrow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace detail

/// 2D cross-correlation with zero padding. input [B,Cin,H,W], weight
/// [Cout,Cin/groups,kh,kw], optional bias [Cout].
template <std::floating_point T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias,
              Conv2dOptions opt = {}) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4) {
    throw DimensionError("conv2d: input " + shape_str(xs) + ", weight " + shape_str(ws));
  }
  if (opt.stride == 0 || opt.groups == 0) throw DimensionError("conv2d: stride/groups must be >= 1");
  detail::ConvGeometry g{};
  g.batch = xs[0];
  g.cin = xs[1];
  g.h = xs[2];
  g.w = xs[3];
  g.cout = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0 || ws[1] * g.groups != g.cin) {
    throw DimensionError("conv2d: channels " + std::to_string(g.cin) + " -> " +
                         std::to_string(g.cout) + " incompatible with groups " +
                         std::to_string(g.groups) + " and weight " + shape_str(ws));
  }
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw DimensionError("conv2d: kernel " + shape_str(ws) + " larger than padded input " +
                         shape_str(xs));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != g.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t plane = g.ho * g.wo;
  const std::size_t kdim = g.cin_g * g.kh * g.kw;
  Tensor<T> out(Shape{g.batch, g.cout, g.ho, g.wo});
  const T* xv = input.value().ptr();
  const T* wv = weight.value().ptr();
  const bool pointwise = detail::is_pointwise(g);
  std::vector<T> col(pointwise ? 0 : kdim * plane);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = xv + (b * g.cin + grp * g.cin_g) * g.h * g.w;
      const T* src = xg;
      if (!pointwise) {
        detail::im2col(xg, g, col.data());
        src = col.data();
      }
      wmhseg::detail::gemm(false, false, g.cout_g, plane, kdim, wv + grp * g.cout_g * kdim, src,
                           out.ptr() + (b * g.cout + grp * g.cout_g) * plane, false);
    }
    if (has_bias) {
      const T* bv = bias.value().ptr();
      for (std::size_t c = 0; c < g.cout; ++c) {
        T* o = out.ptr() + (b * g.cout + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) o[p] += bv[c];
      }
    }
  }
  std::vector<Var<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>("conv2d", std::move(out), inputs, [g](Node<T>& self) {
    const std::size_t plane = g.ho * g.wo;
    const std::size_t kdim = g.cin_g * g.kh * g.kw;
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    const bool pointwise = detail::is_pointwise(g);
    std::vector<T> col(pointwise ? 0 : kdim * plane);
    std::vector<T> dcol(pointwise ? 0 : kdim * plane);
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        const T* dy = self.grad.ptr() + (b * g.cout + grp * g.cout_g) * plane;
        const std::size_t x_off = (b * g.cin + grp * g.cin_g) * g.h * g.w;
        const std::size_t w_off = grp * g.cout_g * kdim;
        if (pw->requires_grad) {
          const T* src = px->value.ptr() + x_off;
          if (!pointwise) {
            detail::im2col(src, g, col.data());
            src = col.data();
          }
          wmhseg::detail::gemm(false, true, g.cout_g, kdim, plane, dy, src,
                               pw->grad_buffer().ptr() + w_off, true);
        }
        if (px->requires_grad) {
          T* dx = px->grad_buffer().ptr() + x_off;
          if (pointwise) {
            wmhseg::detail::gemm(true, false, kdim, plane, g.cout_g, pw->value.ptr() + w_off, dy,
                                 dx, true);
          } else {
            wmhseg::detail::gemm(true, false, kdim, plane, g.cout_g, pw->value.ptr() + w_off, dy,
                                 dcol.data(), false);
            detail::col2im_add(dcol.data(), g, dx);
          }
        }
      }
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      T* gb = self.parents[2]->grad_buffer().ptr();
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t c = 0; c < g.cout; ++c) {
          const T* dy = self.grad.ptr() + (b * g.cout + c) * plane;
          T acc = 0;
          for (std::size_t p = 0; p < plane; ++p) acc += dy[p];
          gb[c] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Shift-stable softmax along `axis`.
template <std::floating_point T>
Var<T> softmax(const Var<T>& x, int axis) {
  const Shape& s = x.shape();
  const std::size_t ax = detail::normalize_axis(axis, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s[d];
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[ax];
  Tensor<T> out(s);
  const T* xv = x.value().ptr();
  T* y = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T m = xv[base];
      for (std::size_t k = 1; k < n; ++k) m = std::max(m, xv[base + k * inner]);
      T total = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(xv[base + k * inner] - m);
        y[base + k * inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t k = 0; k < n; ++k) y[base + k * inner] *= inv;
    }
  }
  return make_result<T>("softmax", std::move(out), {x}, [outer, inner, n](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T* y = self.value.ptr();
    const T* dy = self.grad.ptr();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < n; ++k) dot += dy[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t j = base + k * inner;
          g[j] += y[j] * (dy[j] - dot);
        }
      }
    }
  });
}

/// Normalizes over the last axis then applies gamma/beta.
template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  if (!(eps > 0)) throw DimensionError("layer_norm: eps must be positive");
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm on rank-0 tensor");
  const std::size_t c = s.back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " for input " +
                         shape_str(s));
  }
  const std::size_t rows = x.size() / c;
  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* xv = x.value().ptr();
  const T* gv = gamma.value().ptr();
  const T* bv = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>("layer_norm", std::move(out), {x, gamma, beta},
                        [xhat, inv_std, rows, c](Node<T>& self) {
                          auto& px = self.parents[0];
                          auto& pg = self.parents[1];
                          auto& pb = self.parents[2];
                          const T* dy = self.grad.ptr();
                          const T* gv = pg->value.ptr();
                          if (pg->requires_grad || pb->requires_grad) {
                            T* dg = pg->requires_grad ? pg->grad_buffer().ptr() : nullptr;
                            T* db = pb->requires_grad ? pb->grad_buffer().ptr() : nullptr;
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < c; ++j) {
                                if (dg) dg[j] += dy[r * c + j] * (*xhat)[r * c + j];
                                if (db) db[j] += dy[r * c + j];
                              }
                            }
                          }
                          if (!px->requires_grad) return;
                          T* dx = px->grad_buffer().ptr();
                          const T inv_c = T(1) / static_cast<T>(c);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T mean_d = 0, mean_dh = 0;
                            for (std::size_t j = 0; j < c; ++j) {
                              const T d = dy[r * c + j] * gv[j];
                              mean_d += d;
                              mean_dh += d * (*xhat)[r * c + j];
                            }
                            mean_d *= inv_c;
                            mean_dh *= inv_c;
                            const T is = (*inv_std)[r];
                            for (std::size_t j = 0; j < c; ++j) {
                              const T d = dy[r * c + j] * gv[j];
                              dx[r * c + j] += is * (d - mean_d - (*xhat)[r * c + j] * mean_dh);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

// Half-pixel (align_corners = false) source taps for each output index.
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double s = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * s - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace detail

template <std::floating_point T>
Var<T> resize_bilinear(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("resize_bilinear expects [B,C,H,W], got " + shape_str(s));
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: output dims must be >= 1");
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const auto ty = detail::bilinear_taps(h, out_h);
  const auto tx = detail::bilinear_taps(w, out_w);
  Tensor<T> out(Shape{s[0], s[1], out_h, out_w});
  const T* xv = x.value().ptr();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * h * w;
    T* dst = out.ptr() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      const T* r0 = src + a.i0 * w;
      const T* r1 = src + a.i1 * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        dst[oy * out_w + ox] = static_cast<T>(
            a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]));
      }
    }
  }
  return make_result<T>("resize_bilinear", std::move(out), {x},
                        [ty, tx, planes, h, w, out_h, out_w](Node<T>& self) {
                          T* g = self.parents[0]->grad_buffer().ptr();
                          for (std::size_t p = 0; p < planes; ++p) {
                            T* dst = g + p * h * w;
                            const T* dy = self.grad.ptr() + p * out_h * out_w;
                            for (std::size_t oy = 0; oy < out_h; ++oy) {
                              const auto& a = ty[oy];
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                const auto& b = tx[ox];
                                const double d = dy[oy * out_w + ox];
                                dst[a.i0 * w + b.i0] += static_cast<T>(d * a.w0 * b.w0);
                                dst[a.i0 * w + b.i1] += static_cast<T>(d * a.w0 * b.w1);
                                dst[a.i1 * w + b.i0] += static_cast<T>(d * a.w1 * b.w0);
                                dst[a.i1 * w + b.i1] += static_cast<T>(d * a.w1 * b.w1);
                              }
                            }
                          }
                        });
}

}  // namespace wmhseg::ops
