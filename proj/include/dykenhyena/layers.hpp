// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dykenhyena/ops.hpp"

namespace dkh {

/// Named reference to a learnable tensor, used for checkpoints, optimiser
/// state and gradient checks.
struct NamedParam {
    std::string name;
    Tensor* tensor;
};

struct LinearParams {
    Tensor w;  // [in, out]
    Tensor b;  // [out], empty when the layer has no bias

    LinearParams() = default;
    LinearParams(std::size_t in, std::size_t out, bool bias = true) : w({in, out}, 0.0) {
        if (bias) b = Tensor({out}, 0.0);
    }

    /// w ~ N(0, 1/in), b = 0.
    static LinearParams init(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
        LinearParams p(in, out, bias);
        const double sd = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : p.w.data) v = rng.normal(0.0, sd);
        return p;
    }

    bool has_bias() const { return !b.data.empty(); }

    Var operator()(Graph& g, Var x) {
        return has_bias() ? linear(x, g.param(w), g.param(b)) : matmul(x, g.param(w));
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".w", &w});
        if (has_bias()) out.push_back({prefix + ".b", &b});
    }
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;

    LayerNormParams() = default;
    explicit LayerNormParams(std::size_t d) : gamma({d}, 1.0), beta({d}, 0.0) {}

    Var operator()(Graph& g, Var x, double eps) {
        return layer_norm(x, g.param(gamma), g.param(beta), eps);
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }
};

/// Optional dropout applied during training.
struct DropoutCtx {
    double rate = 0.0;
    Rng* rng = nullptr;

    Var operator()(Var x) const { return (rng && rate > 0.0) ? dropout(x, rate, *rng) : x; }
};

/// Scaled dot-product multi-head attention on already projected Q [Lq, D],
/// K [Lk, D], V [Lk, D]. Heads split the feature axis into equal slices.
/// Keys whose mask entry is 0 receive zero weight.
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t n_heads, const Mask& key_mask,
                                const DropoutCtx& attn_dropout = {}) {
    const std::size_t d = q.shape().back();
    if (n_heads == 0 || d % n_heads != 0)
        throw ShapeMismatch("head count " + std::to_string(n_heads) + " does not divide " +
                            std::to_string(d));
    if (k.shape() != v.shape() || k.shape().back() != d)
        throw ShapeMismatch("attention K/V shapes " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
    if (key_mask.size() != k.shape()[0]) throw ShapeMismatch("attention key mask length differs");
    const std::size_t dh = d / n_heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Var qh = n_heads == 1 ? q : slice_lastdim(q, h * dh, dh);
        Var kh = n_heads == 1 ? k : slice_lastdim(k, h * dh, dh);
        Var vh = n_heads == 1 ? v : slice_lastdim(v, h * dh, dh);
        Var scores = scale(matmul(qh, transpose(kh)), s);
        Var w = attn_dropout(softmax_lastdim(scores, key_mask));
        heads.push_back(matmul(w, vh));
    }
    return n_heads == 1 ? heads[0] : concat_lastdim(heads);
}

}  // namespace dkh
