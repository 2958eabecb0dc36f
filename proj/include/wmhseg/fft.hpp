#pragma once

// Complex FFTs. Forward transforms are unscaled; inverse transforms divide by N,
// so ifft(fft(x)) == x. Power-of-two lengths use iterative radix-2; all other
// lengths go through Bluestein's chirp-z reduction to a power-of-two convolution.

#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "wmhseg/errors.hpp"

namespace wmhseg::fft {

using Complex = std::complex<double>;

/// Row-major complex image, `rows` x `cols`.
struct ComplexImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Complex> data;

  ComplexImage() = default;
  ComplexImage(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c) {}

  Complex& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const Complex& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

namespace detail {

inline void radix2(std::span<Complex> a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    std::vector<Complex> tw(half);
    for (std::size_t k = 0; k < half; ++k) {
      tw[k] = Complex(std::cos(ang * static_cast<double>(k)), std::sin(ang * static_cast<double>(k)));
    }
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const Complex u = a[i + k];
        const Complex v = a[i + k + half] * tw[k];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

inline void bluestein(std::span<Complex> a, bool inverse) {
  const std::size_t n = a.size();
  const std::size_t m = std::bit_ceil(2 * n - 1);
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<Complex> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle argument small for large n.
    const std::size_t k2 = (k * k) % (2 * n);
    const double ang = sign * std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
    chirp[k] = Complex(std::cos(ang), std::sin(ang));
  }
  std::vector<Complex> u(m), v(m);
  for (std::size_t k = 0; k < n; ++k) u[k] = a[k] * chirp[k];
  v[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) v[k] = v[m - k] = std::conj(chirp[k]);
  radix2(u, false);
  radix2(v, false);
  for (std::size_t k = 0; k < m; ++k) u[k] *= v[k];
  radix2(u, true);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < n; ++k) a[k] = u[k] * inv_m * chirp[k];
}

}  // namespace detail

/// In-place 1D transform. Forward unscaled, inverse scaled by 1/N.
inline void fft1d(std::span<Complex> a, bool inverse = false) {
  const std::size_t n = a.size();
  if (n <= 1) return;
  if (std::has_single_bit(n)) {
    detail::radix2(a, inverse);
  } else {
    detail::bluestein(a, inverse);
  }
  if (inverse) {
    const double s = 1.0 / static_cast<double>(n);
    for (auto& v : a) v *= s;
  }
}

namespace detail {

inline void transform2d(ComplexImage& img, bool inverse) {
  for (std::size_t r = 0; r < img.rows; ++r) {
    fft1d(std::span<Complex>(img.data.data() + r * img.cols, img.cols), inverse);
  }
  std::vector<Complex> column(img.rows);
  for (std::size_t c = 0; c < img.cols; ++c) {
    for (std::size_t r = 0; r < img.rows; ++r) column[r] = img(r, c);
    fft1d(column, inverse);
    for (std::size_t r = 0; r < img.rows; ++r) img(r, c) = column[r];
  }
}

}  // namespace detail

inline ComplexImage fft2(ComplexImage img) {
  detail::transform2d(img, false);
  return img;
}

inline ComplexImage ifft2(ComplexImage img) {
  detail::transform2d(img, true);
  return img;
}

}  // namespace wmhseg::fft
