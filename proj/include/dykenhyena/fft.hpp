// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "dykenhyena/errors.hpp"

namespace dkh::fft {

using cplx = std::complex<double>;

inline std::size_t next_pow2(std::size_t n) noexcept { return n <= 1 ? 1 : std::bit_ceil(n); }

/// In-place iterative radix-2 FFT. `a.size()` must be a power of two.
/// The inverse transform includes the 1/N normalisation.
inline void transform(std::span<cplx> a, bool inverse) {
    const std::size_t n = a.size();
    if (n <= 1) return;
    if (!std::has_single_bit(n)) throw Error("fft length must be a power of two");

    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }

    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const std::size_t half = len / 2;
        for (std::size_t k = 0; k < half; ++k) {
            // Twiddles are evaluated directly instead of by repeated multiplication
            // so the rounding error does not grow with the stage length.
            const cplx w = std::polar(1.0, ang * static_cast<double>(k));
            for (std::size_t i = 0; i < n; i += len) {
                const cplx u = a[i + k];
                const cplx v = a[i + k + half] * w;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
        }
    }
    if (inverse) {
        const double inv = 1.0 / static_cast<double>(n);
        for (auto& x : a) x *= inv;
    }
}

/// Largest |imag| tolerated after the inverse transform of a real convolution.
inline constexpr double kImagTolerance = 1e-9;

/// First `n_out` samples of the linear convolution of two strided real signals.
///
/// Signal `a` has `len_a` samples at `a[i * stride_a]`, likewise `b`. The result
/// is written to `out[i * stride_out]` for i < n_out. Both signals are
/// zero-padded to the next power of two >= len_a + len_b - 1.
inline void linear_conv_first(const double* a, std::size_t len_a, std::size_t stride_a,
                              const double* b, std::size_t len_b, std::size_t stride_b,
                              double* out, std::size_t n_out, std::size_t stride_out,
                              std::vector<cplx>& fa, std::vector<cplx>& fb) {
    const std::size_t n = next_pow2(len_a + len_b - 1);
    fa.assign(n, cplx{});
    fb.assign(n, cplx{});
    for (std::size_t i = 0; i < len_a; ++i) fa[i] = a[i * stride_a];
    for (std::size_t i = 0; i < len_b; ++i) fb[i] = b[i * stride_b];
    transform(fa, false);
    transform(fb, false);
    for (std::size_t i = 0; i < n; ++i) fa[i] *= fb[i];
    transform(fa, true);
    for (std::size_t i = 0; i < n_out; ++i) {
        const cplx v = i < n ? fa[i] : cplx{};
        if (std::abs(v.imag()) > kImagTolerance)
            throw Error("fft convolution left an imaginary residue of " + std::to_string(v.imag()));
        out[i * stride_out] = v.real();
    }
}

}  // namespace dkh::fft
