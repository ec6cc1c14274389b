// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dynamic-kernel Hyena fusion block.
//
//   F_av    = [A(align(audio)), V(align(visual))]                   [L, 2D]
//   C_attn  = MHA(Q = F_t, K = F_av, V = F_av)                       [L, D]
//   C_local = LN1(C_attn + F_t)
//   kernels = reshape(MLP(C_local), [L, D, K_s])
//   X1, X2  = split(path(F_t))
//   X_conv  = sum_k unfold(X1)[., ., k] * kernels[., ., k]
//   y       = long_conv(X_conv * X2)        (padded rows zeroed first)
//   F_final = LN2(out(y) + F_t)

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dykenhyena/layers.hpp"

namespace dkh {

enum class Variant { full, no_attention, no_dynamic_short_conv, no_long_conv, text_only };

inline constexpr std::array kAllVariants = {Variant::full, Variant::no_attention,
                                            Variant::no_dynamic_short_conv, Variant::no_long_conv,
                                            Variant::text_only};

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_attention: return "no_attention";
        case Variant::no_dynamic_short_conv: return "no_dynamic_short_conv";
        case Variant::no_long_conv: return "no_long_conv";
        case Variant::text_only: return "text_only";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : kAllVariants)
        if (to_string(v) == s) return v;
    throw ConfigError("unknown variant '" + s + "'");
}

struct FusionConfig {
    std::size_t d_text = 16;
    std::size_t d_audio = 4;
    std::size_t d_visual = 4;
    std::size_t k_s = 3;
    std::size_t n_heads = 2;
    std::size_t kernel_mlp_hidden = 16;
    std::size_t long_filter_len = 16;
    double eps = 1e-5;
    /// Standard deviation of the kernel generator's output weights at init.
    /// Zero makes every generated kernel an exact delta.
    double kernel_init_std = 0.0;
    double long_filter_init_std = 1e-4;

    void validate() const {
        if (d_text == 0 || d_audio == 0 || d_visual == 0 || kernel_mlp_hidden == 0)
            throw ConfigError("fusion dimensions must be positive");
        if (n_heads == 0 || d_text % n_heads != 0)
            throw ConfigError("n_heads must divide d_text");
        if (k_s < 1 || k_s % 2 == 0) throw BadKernelSize("k_s must be odd and >= 1");
        if (long_filter_len < 1) throw ConfigError("long_filter_len must be >= 1");
        if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    }
};

struct FusionParams {
    LinearParams av_audio, av_visual;         // D_a -> D, D_v -> D
    LinearParams attn_q;                      // D -> D
    LinearParams attn_k;                      // 2D -> D, no bias (softmax ignores it)
    LinearParams attn_v;                      // 2D -> D
    LinearParams attn_o;                      // D -> D
    LayerNormParams ln1;
    LinearParams kernel_hidden;               // D -> hidden
    LinearParams kernel_out;                  // hidden -> D * K_s
    LinearParams path;                        // D -> 2D  (X1 | X2)
    Tensor long_filter;                       // [long_filter_len, D]
    LinearParams out;                         // D -> D
    LayerNormParams ln2;

    static FusionParams init(const FusionConfig& c, Rng& rng) {
        c.validate();
        const std::size_t D = c.d_text;
        FusionParams p;
        p.av_audio = LinearParams::init(c.d_audio, D, rng);
        p.av_visual = LinearParams::init(c.d_visual, D, rng);
        p.attn_q = LinearParams::init(D, D, rng);
        p.attn_k = LinearParams::init(2 * D, D, rng, false);
        p.attn_v = LinearParams::init(2 * D, D, rng);
        p.attn_o = LinearParams::init(D, D, rng);
        p.ln1 = LayerNormParams(D);
        p.kernel_hidden = LinearParams::init(D, c.kernel_mlp_hidden, rng);
        p.kernel_out = LinearParams(c.kernel_mlp_hidden, D * c.k_s);
        for (auto& v : p.kernel_out.w.data) v = c.kernel_init_std > 0.0 ? rng.normal(0.0, c.kernel_init_std) : 0.0;
        for (std::size_t d = 0; d < D; ++d) p.kernel_out.b.data[d * c.k_s + c.k_s / 2] = 1.0;
        p.path = LinearParams::init(D, 2 * D, rng);
        p.long_filter = Tensor({c.long_filter_len, D}, 0.0);
        for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t k = 0; k < c.long_filter_len; ++k)
                p.long_filter.at(k, d) = c.long_filter_init_std > 0.0 ? rng.normal(0.0, c.long_filter_init_std) : 0.0;
            p.long_filter.at(c.long_filter_len / 2, d) += 1.0;
        }
        p.out = LinearParams(D, D);
        p.ln2 = LayerNormParams(D);
        return p;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& outp) {
        av_audio.collect(prefix + ".av_audio", outp);
        av_visual.collect(prefix + ".av_visual", outp);
        attn_q.collect(prefix + ".attn_q", outp);
        attn_k.collect(prefix + ".attn_k", outp);
        attn_v.collect(prefix + ".attn_v", outp);
        attn_o.collect(prefix + ".attn_o", outp);
        ln1.collect(prefix + ".ln1", outp);
        kernel_hidden.collect(prefix + ".kernel_hidden", outp);
        kernel_out.collect(prefix + ".kernel_out", outp);
        path.collect(prefix + ".path", outp);
        outp.push_back({prefix + ".long_filter", &long_filter});
        out.collect(prefix + ".out", outp);
        ln2.collect(prefix + ".ln2", outp);
    }
};

/// Intermediate tensors of one fusion pass. Members are unset when the
/// variant skips the corresponding stage.
struct FusionTrace {
    std::optional<Var> f_av, c_attn, c_local, kernels, x_conv, gated, f_fusion;
    Var f_final;
};

// ---------------------------------------------------------------------------
// Alignment (parameter-free, outside the graph)

/// Band-mean resampling of the valid frames onto `target_len` rows:
/// row i averages frames [floor(i*n/L), max(floor((i+1)*n/L), floor(i*n/L)+1))
/// of the n valid frames (taken in order).
inline Tensor align_to_text(const Tensor& frames, std::size_t target_len, const Mask& mask = {}) {
    if (frames.rank() != 2) throw ShapeMismatch("align_to_text expects [L_src, D] frames");
    if (target_len == 0) throw ShapeMismatch("align_to_text: target length must be >= 1");
    const std::size_t rows = frames.shape[0], D = frames.shape[1];
    if (!mask.empty() && mask.size() != rows) throw ShapeMismatch("align_to_text: mask length differs");
    std::vector<std::size_t> valid;
    valid.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r)
        if (mask.empty() || mask[r]) valid.push_back(r);
    if (valid.empty()) throw EmptySource("no valid frames to align");
    const std::size_t n = valid.size();
    Tensor out({target_len, D}, 0.0);
    for (std::size_t i = 0; i < target_len; ++i) {
        const std::size_t lo = i * n / target_len;
        const std::size_t hi = std::max((i + 1) * n / target_len, lo + 1);
        for (std::size_t s = lo; s < hi; ++s)
            for (std::size_t d = 0; d < D; ++d) out.at(i, d) += frames.at(valid[s], d);
        const double inv = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t d = 0; d < D; ++d) out.at(i, d) *= inv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Block stages

inline Var build_av_context(Graph& g, Var audio, Var visual, FusionParams& p) {
    if (audio.shape().size() != 2 || visual.shape().size() != 2 || audio.shape()[0] != visual.shape()[0])
        throw ShapeMismatch("build_av_context: audio " + shape_str(audio.shape()) + " vs visual " +
                            shape_str(visual.shape()));
    return concat_lastdim(p.av_audio(g, audio), p.av_visual(g, visual));
}

/// Text queries over audio-visual keys/values. `key_pos` (optional, [L, D]) is
/// added to the projected keys so attention can locate frames in time.
inline Var cross_modal_attention(Graph& g, Var f_t, Var f_av, FusionParams& p, std::size_t n_heads,
                                 const Mask& text_mask, std::optional<Var> key_pos = std::nullopt) {
    const auto& ts = f_t.shape();
    const auto& as = f_av.shape();
    if (ts.size() != 2 || as.size() != 2 || as[0] != ts[0] || as[1] != 2 * ts[1])
        throw ShapeMismatch("cross_modal_attention: f_t " + shape_str(ts) + ", f_av " + shape_str(as));
    Var q = p.attn_q(g, f_t);
    Var k = p.attn_k(g, f_av);
    if (key_pos) k = add(k, *key_pos);
    Var v = p.attn_v(g, f_av);
    return p.attn_o(g, multi_head_attention(q, k, v, n_heads, text_mask));
}

/// Uniform attention over the valid positions: the mean-pooled context row,
/// passed through the value and output projections, broadcast to every token.
inline Var mean_pooled_context(Graph& g, Var f_av, FusionParams& p, const Mask& text_mask) {
    return p.attn_o(g, p.attn_v(g, masked_mean_broadcast(f_av, text_mask)));
}

inline Var contextualize(Graph& g, Var c_attn, Var f_t, FusionParams& p, double eps) {
    return p.ln1(g, add(c_attn, f_t), eps);
}

/// kernels[i, d, k] = MLP(c_local)[i, d * K_s + k]
inline Var generate_kernels(Graph& g, Var c_local, FusionParams& p, std::size_t k_s) {
    const std::size_t L = c_local.shape()[0], D = c_local.shape()[1];
    if (p.kernel_out.w.shape[1] != D * k_s)
        throw ShapeMismatch("kernel generator width " + std::to_string(p.kernel_out.w.shape[1]) +
                            " != D*K_s = " + std::to_string(D * k_s));
    Var hidden = activation(p.kernel_hidden(g, c_local), Activation::gelu);
    return reshape(p.kernel_out(g, hidden), {L, D, k_s});
}

/// Depthwise per-token convolution: X_conv[i, d] = sum_k kernels[i, d, k] * x1_pad[i + k, d].
inline Var dynamic_short_conv(Var x1, Var kernels) {
    const auto& xs = x1.shape();
    const auto& ks = kernels.shape();
    if (xs.size() != 2 || ks.size() != 3 || ks[0] != xs[0] || ks[1] != xs[1])
        throw ShapeMismatch("dynamic_short_conv: x1 " + shape_str(xs) + ", kernels " + shape_str(ks));
    const std::size_t k_s = ks[2];
    return sum_lastdim(mul(unfold1d(x1, k_s, (k_s - 1) / 2), kernels));
}

/// Non-causal "same" long convolution: the filter tap floor(L_f/2) lines up with
/// the output position. The input is zero-extended so the FFT convolution's
/// filter-length precondition holds for any sequence length.
inline Var long_conv_same(Var x, Var filter) {
    const std::size_t L = x.shape()[0];
    const std::size_t lf = filter.shape()[0];
    const std::size_t c = lf / 2;
    const std::size_t n = std::max(L + c, lf);
    Var full = fft_linear_conv(pad_rows(x, n - L), filter);
    return slice_rows(full, c, L);
}

struct HyenaOptions {
    bool long_conv = true;
    /// When set, replaces the dynamic short convolution output (the
    /// no-dynamic-short-conv ablation feeds the attention output here).
    std::optional<Var> short_conv_replacement;
};

struct HyenaOutput {
    std::optional<Var> x_conv;
    Var gated, y, f_fusion;
};

inline HyenaOutput hyena_operator(Graph& g, Var f_t, std::optional<Var> kernels, FusionParams& p,
                                  const Mask& text_mask, const HyenaOptions& opt = {}) {
    const std::size_t D = f_t.shape()[1];
    if (text_mask.size() != f_t.shape()[0]) throw ShapeMismatch("hyena_operator: mask length differs");
    Var proj = p.path(g, f_t);
    Var x1 = slice_lastdim(proj, 0, D);
    Var x2 = slice_lastdim(proj, D, D);
    HyenaOutput out;
    Var local;
    if (opt.short_conv_replacement) {
        local = *opt.short_conv_replacement;
    } else {
        if (!kernels) throw Error("hyena_operator: kernels required");
        // Padded rows of X1 are zeroed so windows at the sequence end see the
        // same zero padding regardless of how many pad tokens follow.
        out.x_conv = dynamic_short_conv(mask_rows(x1, text_mask), *kernels);
        local = *out.x_conv;
    }
    out.gated = mask_rows(mul(local, x2), text_mask);
    out.y = opt.long_conv ? long_conv_same(out.gated, g.param(p.long_filter)) : out.gated;
    out.f_fusion = p.out(g, out.y);
    return out;
}

/// Audio/visual streams either already aligned to the text rows or raw frames
/// with their own masks (aligned internally).
struct FusionInputs {
    Var f_t;
    Tensor audio;
    Tensor visual;
    Mask text_mask;
    Mask audio_mask;
    Mask visual_mask;
    std::optional<Var> key_pos;
};

/// Full block. Returns F_final plus every inspected intermediate.
inline FusionTrace fuse(Graph& g, const FusionInputs& in, FusionParams& p, const FusionConfig& c,
                        Variant variant = Variant::full) {
    const std::size_t L = in.f_t.shape()[0];
    Mask text_mask = in.text_mask.empty() ? Mask(L, 1) : in.text_mask;
    if (text_mask.size() != L) throw ShapeMismatch("fuse: text mask length differs");
    FusionTrace tr;
    if (variant == Variant::text_only) {
        tr.f_final = p.ln2(g, in.f_t, c.eps);
        return tr;
    }
    std::size_t n_valid = 0;
    for (auto m : text_mask) n_valid += m ? 1 : 0;
    auto aligned = [&](const Tensor& frames, const Mask& mask) {
        if (frames.rank() == 2 && frames.shape[0] == L && mask.empty()) return frames;
        Tensor a = align_to_text(frames, n_valid, mask);
        Tensor full({L, frames.shape[1]}, 0.0);
        std::size_t r = 0;
        for (std::size_t i = 0; i < L; ++i)
            if (text_mask[i]) {
                std::copy_n(a.data.begin() + r * a.shape[1], a.shape[1], full.data.begin() + i * a.shape[1]);
                ++r;
            }
        return full;
    };
    Var audio = g.constant(aligned(in.audio, in.audio_mask));
    Var visual = g.constant(aligned(in.visual, in.visual_mask));
    tr.f_av = build_av_context(g, audio, visual, p);

    tr.c_attn = variant == Variant::no_attention
                    ? mean_pooled_context(g, *tr.f_av, p, text_mask)
                    : cross_modal_attention(g, in.f_t, *tr.f_av, p, c.n_heads, text_mask, in.key_pos);

    HyenaOptions opt;
    opt.long_conv = variant != Variant::no_long_conv;
    if (variant == Variant::no_dynamic_short_conv) {
        opt.short_conv_replacement = *tr.c_attn;
    } else {
        tr.c_local = contextualize(g, *tr.c_attn, in.f_t, p, c.eps);
        tr.kernels = generate_kernels(g, *tr.c_local, p, c.k_s);
    }
    HyenaOutput h = hyena_operator(g, in.f_t, tr.kernels, p, text_mask, opt);
    tr.x_conv = h.x_conv;
    tr.gated = h.gated;
    tr.f_fusion = h.f_fusion;
    tr.f_final = p.ln2(g, add(h.f_fusion, in.f_t), c.eps);
    return tr;
}

}  // namespace dkh
