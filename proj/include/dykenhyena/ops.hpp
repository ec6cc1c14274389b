// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable operators over Graph nodes. Every operator records its
// result on the graph of its first input and registers a backward rule.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dykenhyena/fft.hpp"
#include "dykenhyena/rng.hpp"
#include "dykenhyena/tensor.hpp"

namespace dkh {

/// Per-position validity flags (1 = valid, 0 = padding).
using Mask = std::vector<std::uint8_t>;

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
    if (a.rank() != r)
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                            shape_str(a.shape));
}

// C[M,N] += A[M,K] * B[K,N]
inline void mm_acc(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                   std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = A[i * K + k];
            if (a == 0.0) continue;
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// dA[M,K] += G[M,N] * B[K,N]^T
inline void mm_acc_nt(const double* G, const double* B, double* dA, std::size_t M, std::size_t K,
                      std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* g = G + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double* b = B + k * N;
            double s = 0.0;
            for (std::size_t j = 0; j < N; ++j) s += g[j] * b[j];
            dA[i * K + k] += s;
        }
    }
}

// dB[K,N] += A[M,K]^T * G[M,N]
inline void mm_acc_tn(const double* A, const double* G, double* dB, std::size_t M, std::size_t K,
                      std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const double* g = G + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = A[i * K + k];
            if (a == 0.0) continue;
            double* db = dB + k * N;
            for (std::size_t j = 0; j < N; ++j) db[j] += a * g[j];
        }
    }
}

inline Shape without_last(const Shape& s) {
    if (s.size() <= 1) return {1};
    return Shape(s.begin(), s.end() - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product over the last two axes. Leading (batch) axes must
/// agree or be 1, in which case they broadcast.
inline Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() < 2 || B.rank() < 2)
        throw ShapeMismatch("matmul needs rank >= 2, got " + shape_str(A.shape) + " and " +
                            shape_str(B.shape));
    const std::size_t M = A.shape[A.rank() - 2], K = A.shape[A.rank() - 1];
    const std::size_t K2 = B.shape[B.rank() - 2], N = B.shape[B.rank() - 1];
    if (K != K2)
        throw ShapeMismatch("matmul inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));

    const std::size_t br = std::max(A.rank(), B.rank()) - 2;
    Shape ba(br, 1), bb(br, 1), bo(br, 1);
    std::copy(A.shape.begin(), A.shape.end() - 2, ba.begin() + (br - (A.rank() - 2)));
    std::copy(B.shape.begin(), B.shape.end() - 2, bb.begin() + (br - (B.rank() - 2)));
    for (std::size_t d = 0; d < br; ++d) {
        if (ba[d] != bb[d] && ba[d] != 1 && bb[d] != 1)
            throw ShapeMismatch("matmul batch dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        bo[d] = std::max(ba[d], bb[d]);
    }
    const std::size_t nb = numel(bo.empty() ? Shape{1} : bo);
    std::vector<std::size_t> off_a(nb), off_b(nb);
    for (std::size_t idx = 0; idx < nb; ++idx) {
        std::size_t rem = idx, oa = 0, ob = 0, sa = M * K, sb = K * N;
        for (std::size_t d = br; d-- > 0;) {
            const std::size_t i = rem % bo[d];
            rem /= bo[d];
            if (ba[d] != 1) oa += i * sa;
            if (bb[d] != 1) ob += i * sb;
            sa *= ba[d];
            sb *= bb[d];
        }
        off_a[idx] = oa;
        off_b[idx] = ob;
    }

    Shape out_shape = bo;
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor out(out_shape, 0.0);
    for (std::size_t idx = 0; idx < nb; ++idx)
        detail::mm_acc(A.data.data() + off_a[idx], B.data.data() + off_b[idx],
                       out.data.data() + idx * M * N, M, K, N);

    return a.graph->record(
        std::move(out), {a, b},
        [a = a.id, b = b.id, off_a, off_b, M, K, N](Graph& g, std::size_t self) {
            const double* G = g.grad(self).data();
            const double* Av = g.value(a).data.data();
            const double* Bv = g.value(b).data.data();
            double* dA = g.grad_if_needed(a);
            double* dB = g.grad_if_needed(b);
            for (std::size_t idx = 0; idx < off_a.size(); ++idx) {
                const double* Gi = G + idx * M * N;
                if (dA) detail::mm_acc_nt(Gi, Bv + off_b[idx], dA + off_a[idx], M, K, N);
                if (dB) detail::mm_acc_tn(Av + off_a[idx], Gi, dB + off_b[idx], M, K, N);
            }
        },
        "matmul");
}

/// x[.., Din] * W[Din, Dout] + b[Dout]
inline Var linear(Var x, Var w, Var b) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    const Tensor& Bv = b.value();
    detail::require_rank(W, 2, "linear weight");
    const std::size_t din = W.shape[0], dout = W.shape[1];
    if (X.shape.back() != din || Bv.size() != dout)
        throw ShapeMismatch("linear: x " + shape_str(X.shape) + ", W " + shape_str(W.shape) +
                            ", b " + shape_str(Bv.shape));
    const std::size_t rows = X.size() / din;
    Shape os = X.shape;
    os.back() = dout;
    Tensor out(os, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(Bv.data.begin(), Bv.data.end(), out.data.begin() + r * dout);
    detail::mm_acc(X.data.data(), W.data.data(), out.data.data(), rows, din, dout);

    return x.graph->record(
        std::move(out), {x, w, b},
        [x = x.id, w = w.id, b = b.id, rows, din, dout](Graph& g, std::size_t self) {
            const double* G = g.grad(self).data();
            if (double* dx = g.grad_if_needed(x))
                detail::mm_acc_nt(G, g.value(w).data.data(), dx, rows, din, dout);
            if (double* dw = g.grad_if_needed(w))
                detail::mm_acc_tn(g.value(x).data.data(), G, dw, rows, din, dout);
            if (double* db = g.grad_if_needed(b))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < dout; ++j) db[j] += G[r * dout + j];
        },
        "linear");
}

/// Swaps the two axes of a rank-2 tensor.
inline Var transpose(Var x) {
    const Tensor& X = x.value();
    detail::require_rank(X, 2, "transpose");
    const std::size_t R = X.shape[0], C = X.shape[1];
    Tensor out({C, R});
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) out.data[j * R + i] = X.data[i * C + j];
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, R, C](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < C; ++j) dx[i * C + j] += G[j * R + i];
        },
        "transpose");
}

// ---------------------------------------------------------------------------
// Pointwise

inline Var add(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    out.requires_grad = false;
    const auto& B = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += B[i];
    return a.graph->record(
        std::move(out), {a, b},
        [a = a.id, b = b.id](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            if (double* da = g.grad_if_needed(a))
                for (std::size_t i = 0; i < G.size(); ++i) da[i] += G[i];
            if (double* db = g.grad_if_needed(b))
                for (std::size_t i = 0; i < G.size(); ++i) db[i] += G[i];
        },
        "add");
}

inline Var mul(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    out.requires_grad = false;
    const auto& B = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= B[i];
    return a.graph->record(
        std::move(out), {a, b},
        [a = a.id, b = b.id](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            const auto& A = g.value(a).data;
            const auto& B = g.value(b).data;
            if (double* da = g.grad_if_needed(a))
                for (std::size_t i = 0; i < G.size(); ++i) da[i] += G[i] * B[i];
            if (double* db = g.grad_if_needed(b))
                for (std::size_t i = 0; i < G.size(); ++i) db[i] += G[i] * A[i];
        },
        "mul");
}

inline Var scale(Var x, double s) {
    Tensor out = x.value();
    out.requires_grad = false;
    for (auto& v : out.data) v *= s;
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, s](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t i = 0; i < G.size(); ++i) dx[i] += s * G[i];
        },
        "scale");
}

enum class Activation { gelu, tanh, relu };

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}
inline double gelu_grad(double x) {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}
}  // namespace detail

/// GELU uses the tanh approximation.
inline Var activation(Var x, Activation kind) {
    Tensor out = x.value();
    out.requires_grad = false;
    for (auto& v : out.data) {
        switch (kind) {
            case Activation::gelu: v = detail::gelu(v); break;
            case Activation::tanh: v = std::tanh(v); break;
            case Activation::relu: v = v > 0.0 ? v : 0.0; break;
        }
    }
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, kind](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            const auto& X = g.value(x).data;
            const auto& Y = g.value(self).data;
            double* dx = g.grad_if_needed(x);
            for (std::size_t i = 0; i < G.size(); ++i) {
                double d = 0.0;
                switch (kind) {
                    case Activation::gelu: d = detail::gelu_grad(X[i]); break;
                    case Activation::tanh: d = 1.0 - Y[i] * Y[i]; break;
                    case Activation::relu: d = X[i] > 0.0 ? 1.0 : 0.0; break;
                }
                dx[i] += G[i] * d;
            }
        },
        "activation");
}

/// Inverted dropout: zeroes each entry with probability `rate` and rescales the
/// survivors by 1/(1-rate). Identity when rate == 0.
inline Var dropout(Var x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    Tensor keep(x.shape(), 0.0);
    const double s = 1.0 / (1.0 - rate);
    for (auto& v : keep.data) v = rng.uniform() < rate ? 0.0 : s;
    return mul(x, x.graph->constant(std::move(keep)));
}

// ---------------------------------------------------------------------------
// Reductions and normalisation

inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    return x.graph->record(
        Tensor::scalar(s), {x},
        [x = x.id](Graph& g, std::size_t self) {
            const double G = g.grad(self)[0];
            double* dx = g.grad_if_needed(x);
            const std::size_t n = g.value(x).size();
            for (std::size_t i = 0; i < n; ++i) dx[i] += G;
        },
        "sum");
}

/// Sums out the last axis.
inline Var sum_lastdim(Var x) {
    const Tensor& X = x.value();
    const std::size_t k = X.shape.back();
    const std::size_t rows = X.size() / k;
    Tensor out(detail::without_last(X.shape), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += X.data[r * k + j];
        out.data[r] = s;
    }
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, rows, k](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < k; ++j) dx[r * k + j] += G[r];
        },
        "sum_lastdim");
}

/// Softmax over the last axis with max subtraction. When `key_mask` is given
/// (length = last extent), masked entries get probability exactly 0; a row
/// with every entry masked is an error.
inline Var softmax_lastdim(Var x, std::span<const std::uint8_t> key_mask = {}) {
    const Tensor& X = x.value();
    const std::size_t k = X.shape.back();
    if (!key_mask.empty() && key_mask.size() != k)
        throw ShapeMismatch("softmax mask length " + std::to_string(key_mask.size()) +
                            " vs last dim " + std::to_string(k));
    const bool masked = !key_mask.empty();
    if (masked && std::none_of(key_mask.begin(), key_mask.end(), [](auto m) { return m != 0; }))
        throw AllKeysMasked("every key position is padding");
    const std::size_t rows = X.size() / k;
    Tensor out(X.shape, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = X.data.data() + r * k;
        double* yr = out.data.data() + r * k;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < k; ++j)
            if (!masked || key_mask[j]) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double e = (!masked || key_mask[j]) ? std::exp(xr[j] - mx) : 0.0;
            yr[j] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < k; ++j) yr[j] *= inv;
    }
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, rows, k](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            const auto& Y = g.value(self).data;
            double* dx = g.grad_if_needed(x);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = G.data() + r * k;
                const double* yr = Y.data() + r * k;
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < k; ++j) dx[r * k + j] += yr[j] * (gr[j] - dot);
            }
        },
        "softmax");
}

/// Normalises each last-axis slice to zero mean and unit (biased) variance,
/// then applies gamma/beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& X = x.value();
    const std::size_t d = X.shape.back();
    if (gamma.size() != d || beta.size() != d)
        throw ShapeMismatch("layer_norm: affine size vs last dim " + std::to_string(d));
    if (!(eps > 0.0)) throw Error("layer_norm: eps must be positive");
    const std::size_t rows = X.size() / d;
    const auto& gm = gamma.value().data;
    const auto& bt = beta.value().data;
    Tensor out(X.shape, 0.0);
    std::vector<double> xhat(X.size()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = X.data.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            out.data[r * d + j] = gm[j] * h + bt[j];
        }
    }
    return x.graph->record(
        std::move(out), {x, gamma, beta},
        [x = x.id, gamma = gamma.id, beta = beta.id, rows, d, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            const auto& gm = g.value(gamma).data;
            double* dx = g.grad_if_needed(x);
            double* dg = g.grad_if_needed(gamma);
            double* db = g.grad_if_needed(beta);
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = G.data() + r * d;
                const double* hr = xhat.data() + r * d;
                if (dg)
                    for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * hr[j];
                if (db)
                    for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
                if (dx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gm[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t j = 0; j < d; ++j)
                        dx[r * d + j] += inv_std[r] * (gr[j] * gm[j] - m1 - hr[j] * m2);
                }
            }
        },
        "layer_norm");
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), x.value().data);
    return x.graph->record(
        std::move(out), {x},
        [x = x.id](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t i = 0; i < G.size(); ++i) dx[i] += G[i];
        },
        "reshape");
}

/// Concatenates along the last axis; leading axes must agree.
inline Var concat_lastdim(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat of nothing");
    const Shape lead = detail::without_last(parts[0].shape());
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Var& p : parts) {
        if (detail::without_last(p.shape()) != lead || p.shape().size() != parts[0].shape().size())
            throw ShapeMismatch("concat_lastdim: " + shape_str(p.shape()) + " vs " +
                                shape_str(parts[0].shape()));
        widths.push_back(p.shape().back());
        total += widths.back();
    }
    const std::size_t rows = parts[0].size() / widths[0];
    Shape os = parts[0].shape();
    os.back() = total;
    Tensor out(os, 0.0);
    std::size_t col = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& src = parts[p].value().data;
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(src.begin() + r * widths[p], widths[p], out.data.begin() + r * total + col);
        col += widths[p];
    }
    std::vector<std::size_t> ids;
    for (const Var& p : parts) ids.push_back(p.id);
    return parts[0].graph->record(
        std::move(out), parts,
        [ids, widths, rows, total](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            std::size_t col = 0;
            for (std::size_t p = 0; p < ids.size(); ++p) {
                if (double* dp = g.grad_if_needed(ids[p]))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < widths[p]; ++j)
                            dp[r * widths[p] + j] += G[r * total + col + j];
                col += widths[p];
            }
        },
        "concat_lastdim");
}

inline Var concat_lastdim(Var a, Var b) {
    const Var parts[] = {a, b};
    return concat_lastdim(parts);
}

/// Columns [start, start+len) of the last axis.
inline Var slice_lastdim(Var x, std::size_t start, std::size_t len) {
    const Tensor& X = x.value();
    const std::size_t w = X.shape.back();
    if (len == 0 || start + len > w)
        throw ShapeMismatch("slice_lastdim [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") of width " + std::to_string(w));
    const std::size_t rows = X.size() / w;
    Shape os = X.shape;
    os.back() = len;
    Tensor out(os, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(X.data.begin() + r * w + start, len, out.data.begin() + r * len);
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, rows, w, start, len](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < len; ++j) dx[r * w + start + j] += G[r * len + j];
        },
        "slice_lastdim");
}

/// Stacks rank-2 tensors along the first axis.
inline Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
    const std::size_t cols = parts[0].shape().back();
    std::size_t rows = 0;
    std::vector<std::size_t> ids, counts;
    for (const Var& p : parts) {
        detail::require_rank(p.value(), 2, "concat_rows");
        if (p.shape()[1] != cols) throw ShapeMismatch("concat_rows: column count differs");
        counts.push_back(p.shape()[0]);
        rows += counts.back();
        ids.push_back(p.id);
    }
    Tensor out({rows, cols}, 0.0);
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
        off += p.size();
    }
    return parts[0].graph->record(
        std::move(out), parts,
        [ids, counts, cols](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            std::size_t off = 0;
            for (std::size_t p = 0; p < ids.size(); ++p) {
                const std::size_t n = counts[p] * cols;
                if (double* dp = g.grad_if_needed(ids[p]))
                    for (std::size_t i = 0; i < n; ++i) dp[i] += G[off + i];
                off += n;
            }
        },
        "concat_rows");
}

inline Var concat_rows(Var a, Var b) {
    const Var parts[] = {a, b};
    return concat_rows(parts);
}

/// Rows [start, start+len) of a rank-2 tensor.
inline Var slice_rows(Var x, std::size_t start, std::size_t len) {
    const Tensor& X = x.value();
    detail::require_rank(X, 2, "slice_rows");
    const std::size_t cols = X.shape[1];
    if (len == 0 || start + len > X.shape[0])
        throw ShapeMismatch("slice_rows beyond " + shape_str(X.shape));
    Tensor out({len, cols},
               std::vector<double>(X.data.begin() + start * cols,
                                   X.data.begin() + (start + len) * cols));
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, start, cols](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x) + start * cols;
            for (std::size_t i = 0; i < G.size(); ++i) dx[i] += G[i];
        },
        "slice_rows");
}

/// Appends `extra` zero rows to a rank-2 tensor.
inline Var pad_rows(Var x, std::size_t extra) {
    if (extra == 0) return x;
    const Tensor& X = x.value();
    detail::require_rank(X, 2, "pad_rows");
    Tensor out({X.shape[0] + extra, X.shape[1]}, 0.0);
    std::copy(X.data.begin(), X.data.end(), out.data.begin());
    return x.graph->record(
        std::move(out), {x},
        [x = x.id](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            const std::size_t n = g.value(x).size();
            for (std::size_t i = 0; i < n; ++i) dx[i] += G[i];
        },
        "pad_rows");
}

/// Zeroes rows of a rank-2 tensor whose mask entry is 0.
inline Var mask_rows(Var x, const Mask& mask) {
    const Tensor& X = x.value();
    detail::require_rank(X, 2, "mask_rows");
    if (mask.size() != X.shape[0]) throw ShapeMismatch("mask_rows: mask length differs");
    const std::size_t cols = X.shape[1];
    Tensor out = X;
    out.requires_grad = false;
    for (std::size_t r = 0; r < mask.size(); ++r)
        if (!mask[r]) std::fill_n(out.data.begin() + r * cols, cols, 0.0);
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, mask, cols](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t r = 0; r < mask.size(); ++r)
                if (mask[r])
                    for (std::size_t j = 0; j < cols; ++j) dx[r * cols + j] += G[r * cols + j];
        },
        "mask_rows");
}

/// Mean of the valid rows of a rank-2 tensor, broadcast back to every row.
inline Var masked_mean_broadcast(Var x, const Mask& mask) {
    const Tensor& X = x.value();
    detail::require_rank(X, 2, "masked_mean_broadcast");
    const std::size_t rows = X.shape[0], cols = X.shape[1];
    if (mask.size() != rows) throw ShapeMismatch("masked_mean_broadcast: mask length differs");
    std::size_t n = 0;
    std::vector<double> mean(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        ++n;
        for (std::size_t j = 0; j < cols; ++j) mean[j] += X.data[r * cols + j];
    }
    if (n == 0) throw AllKeysMasked("mean over zero valid rows");
    for (auto& m : mean) m /= static_cast<double>(n);
    Tensor out({rows, cols}, 0.0);
    for (std::size_t r = 0; r < rows; ++r) std::copy(mean.begin(), mean.end(), out.data.begin() + r * cols);
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, mask, rows, cols, n](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            std::vector<double> col(cols, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < cols; ++j) col[j] += G[r * cols + j];
            double* dx = g.grad_if_needed(x);
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < rows; ++r)
                if (mask[r])
                    for (std::size_t j = 0; j < cols; ++j) dx[r * cols + j] += col[j] * inv;
        },
        "masked_mean_broadcast");
}

/// Gathers rows of `table` [V, D] for the given ids. Gradients for ids listed
/// in `frozen_row` (typically the padding row 0) are dropped.
inline Var embedding(Var table, std::span<const int> ids, int frozen_row = -1) {
    const Tensor& T = table.value();
    detail::require_rank(T, 2, "embedding");
    const std::size_t V = T.shape[0], D = T.shape[1];
    if (ids.empty()) throw ShapeMismatch("embedding of an empty id list");
    Tensor out({ids.size(), D}, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
            throw TokenOutOfRange("token id " + std::to_string(ids[i]) + " with vocab " + std::to_string(V));
        std::copy_n(T.data.begin() + ids[i] * D, D, out.data.begin() + i * D);
    }
    return table.graph->record(
        std::move(out), {table},
        [t = table.id, ids = std::vector<int>(ids.begin(), ids.end()), D, frozen_row](Graph& g,
                                                                                     std::size_t self) {
            const auto& G = g.grad(self);
            double* dt = g.grad_if_needed(t);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (ids[i] == frozen_row) continue;
                for (std::size_t j = 0; j < D; ++j) dt[ids[i] * D + j] += G[i * D + j];
            }
        },
        "embedding");
}

// ---------------------------------------------------------------------------
// Convolution

/// Sliding windows of a [L, D] sequence: out[i, d, k] = x_padded[i + k, d],
/// where x_padded has `pad` zero rows on each side. Only "same" windows are
/// supported: K odd and pad == (K - 1) / 2.
inline Var unfold1d(Var x, std::size_t window, std::size_t pad) {
    const Tensor& X = x.value();
    if (window < 1 || window % 2 == 0)
        throw BadKernelSize("window " + std::to_string(window) + " must be odd and >= 1");
    if (pad != (window - 1) / 2)
        throw BadKernelSize("pad " + std::to_string(pad) + " for window " + std::to_string(window));
    detail::require_rank(X, 2, "unfold1d");
    const std::size_t L = X.shape[0], D = X.shape[1];
    Tensor out({L, D, window}, 0.0);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t k = 0; k < window; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
            for (std::size_t d = 0; d < D; ++d) out.data[(i * D + d) * window + k] = X.data[src * D + d];
        }
    return x.graph->record(
        std::move(out), {x},
        [x = x.id, L, D, window, pad](Graph& g, std::size_t self) {
            const auto& G = g.grad(self);
            double* dx = g.grad_if_needed(x);
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t k = 0; k < window; ++k) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(pad);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                    for (std::size_t d = 0; d < D; ++d) dx[src * D + d] += G[(i * D + d) * window + k];
                }
        },
        "unfold1d");
}

/// Per-channel linear convolution truncated to the input length:
/// out[i, d] = sum_k h[k, d] * x[i - k, d], i < L. Computed with a radix-2 FFT
/// of size next_pow2(L + L_h - 1).
inline Var fft_linear_conv(Var x, Var h) {
    const Tensor& X = x.value();
    const Tensor& H = h.value();
    detail::require_rank(X, 2, "fft_linear_conv input");
    detail::require_rank(H, 2, "fft_linear_conv filter");
    const std::size_t L = X.shape[0], D = X.shape[1], Lh = H.shape[0];
    if (H.shape[1] != D) throw ShapeMismatch("fft_linear_conv: channel counts differ");
    if (Lh > L)
        throw FilterTooLong("filter length " + std::to_string(Lh) + " exceeds input length " +
                            std::to_string(L));
    Tensor out({L, D}, 0.0);
    std::vector<fft::cplx> fa, fb;
    for (std::size_t d = 0; d < D; ++d)
        fft::linear_conv_first(X.data.data() + d, L, D, H.data.data() + d, Lh, D,
                               out.data.data() + d, L, D, fa, fb);
    return x.graph->record(
        std::move(out), {x, h},
        [x = x.id, h = h.id, L, D, Lh](Graph& g, std::size_t self) {
            // With gr the time-reversed output gradient:
            //   dx[j] = (gr * h)[L-1-j],  dh[k] = (gr * x)[L-1-k]
            const auto& G = g.grad(self);
            const auto& Xv = g.value(x).data;
            const auto& Hv = g.value(h).data;
            double* dx = g.grad_if_needed(x);
            double* dh = g.grad_if_needed(h);
            std::vector<double> gr(L), tmp(L);
            std::vector<fft::cplx> fa, fb;
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t i = 0; i < L; ++i) gr[i] = G[(L - 1 - i) * D + d];
                if (dx) {
                    fft::linear_conv_first(gr.data(), L, 1, Hv.data() + d, Lh, D, tmp.data(), L, 1, fa, fb);
                    for (std::size_t j = 0; j < L; ++j) dx[j * D + d] += tmp[L - 1 - j];
                }
                if (dh) {
                    fft::linear_conv_first(gr.data(), L, 1, Xv.data() + d, L, D, tmp.data(), L, 1, fa, fb);
                    for (std::size_t k = 0; k < Lh; ++k) dh[k * D + d] += tmp[L - 1 - k];
                }
            }
        },
        "fft_linear_conv");
}

}  // namespace dkh
