#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace grn::fft {

using cplx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

namespace detail {

// In-place iterative radix-2 transform. sign = -1 forward, +1 inverse (unscaled).
inline void radix2(std::vector<cplx>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    // twiddles computed directly per index to avoid drift from repeated products
    std::vector<cplx> w(half);
    for (std::size_t k = 0; k < half; ++k)
      w[k] = cplx(std::cos(ang * static_cast<double>(k)), std::sin(ang * static_cast<double>(k)));
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const cplx u = a[i + k];
        const cplx v = a[i + k + half] * w[k];
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

// Bluestein chirp-z for arbitrary lengths.
inline void bluestein(std::vector<cplx>& a, int sign) {
  const std::size_t n = a.size();
  const std::size_t m = next_pow2(2 * n - 1);
  std::vector<cplx> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle argument small
    const auto k2 = static_cast<double>((k * k) % (2 * n));
    const double ang = sign * std::numbers::pi * k2 / static_cast<double>(n);
    chirp[k] = cplx(std::cos(ang), std::sin(ang));
  }
  std::vector<cplx> x(m), y(m);
  for (std::size_t k = 0; k < n; ++k) x[k] = a[k] * chirp[k];
  y[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) y[k] = y[m - k] = std::conj(chirp[k]);
  radix2(x, -1);
  radix2(y, -1);
  for (std::size_t k = 0; k < m; ++k) x[k] *= y[k];
  radix2(x, +1);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < n; ++k) a[k] = x[k] * inv_m * chirp[k];
}

inline void transform(std::vector<cplx>& a, int sign) {
  if (a.size() <= 1) return;
  if (is_pow2(a.size()))
    radix2(a, sign);
  else
    bluestein(a, sign);
}

}  // namespace detail

// Forward DFT, X[k] = sum_t x[t] exp(-2 pi i k t / N).
inline std::vector<cplx> forward(std::vector<cplx> a) {
  detail::transform(a, -1);
  return a;
}

inline std::vector<cplx> forward(std::span<const double> x) {
  std::vector<cplx> a(x.begin(), x.end());
  detail::transform(a, -1);
  return a;
}

// Inverse DFT including the 1/N factor.
inline std::vector<cplx> inverse(std::vector<cplx> a) {
  detail::transform(a, +1);
  const double s = a.empty() ? 1.0 : 1.0 / static_cast<double>(a.size());
  for (auto& v : a) v *= s;
  return a;
}

// Frequency (Hz) of bin k for an N-point transform, folded to (-fs/2, fs/2].
inline double bin_frequency(std::size_t k, std::size_t n, double fs) {
  const double df = fs / static_cast<double>(n);
  if (2 * k <= n) return static_cast<double>(k) * df;
  return -static_cast<double>(n - k) * df;
}

}  // namespace grn::fft
