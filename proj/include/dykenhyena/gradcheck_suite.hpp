// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference checks of every differentiable operator, the fusion block
// (all variants) and a small end-to-end model. Each case reduces its output to
// a scalar with a fixed random weighting so that no gradient vanishes by symmetry.

#include <memory>
#include <string>
#include <vector>

#include "dykenhyena/gradcheck.hpp"
#include "dykenhyena/train.hpp"

namespace dkh {

struct GradCase {
    std::string name;
    std::vector<std::shared_ptr<Tensor>> owned;
    std::vector<Tensor*> params;
    std::vector<std::string> names;
    LossBuilder loss;
    std::shared_ptr<void> keepalive;  // model state for composite cases
};

struct GradCaseResult {
    std::string name;
    GradCheckReport report;
};

namespace detail {

inline Tensor random_tensor(Shape s, Rng& rng, double sd = 1.0) {
    Tensor t(std::move(s), 0.0);
    for (auto& v : t.data) v = rng.normal(0.0, sd);
    return t;
}

// Values bounded away from zero so kinks (relu) are never straddled by +-h.
inline Tensor offset_tensor(Shape s, Rng& rng) {
    Tensor t(std::move(s), 0.0);
    for (auto& v : t.data) {
        const double u = rng.normal();
        v = (u < 0 ? -1.0 : 1.0) * (0.2 + std::abs(u));
    }
    return t;
}

// sum(out * R) with R drawn once per case from a fixed seed.
inline Var weighted_sum(Graph& g, Var out, std::shared_ptr<Tensor>& weights, std::uint64_t seed) {
    if (!weights || weights->shape != out.shape()) {
        Rng rng(seed);
        weights = std::make_shared<Tensor>(random_tensor(out.shape(), rng));
    }
    return sum(mul(out, g.constant(*weights)));
}

class CaseBuilder {
public:
    CaseBuilder(std::string name, std::uint64_t seed) : seed_(seed), rng_(seed) { c_.name = std::move(name); }

    Tensor* add(std::string name, Tensor t) {
        c_.owned.push_back(std::make_shared<Tensor>(std::move(t)));
        c_.params.push_back(c_.owned.back().get());
        c_.names.push_back(std::move(name));
        return c_.params.back();
    }
    Tensor* randn(std::string name, Shape s, double sd = 1.0) { return add(std::move(name), random_tensor(std::move(s), rng_, sd)); }
    Tensor* offset(std::string name, Shape s) { return add(std::move(name), offset_tensor(std::move(s), rng_)); }
    Rng& rng() { return rng_; }

    /// `f` maps the graph to the un-reduced output.
    template <class F>
    GradCase done(F f) {
        auto w = std::make_shared<std::shared_ptr<Tensor>>();
        const std::uint64_t s = derive_seed(seed_, 77);
        c_.loss = [f, w, s](Graph& g) { return weighted_sum(g, f(g), *w, s); };
        return std::move(c_);
    }

private:
    std::uint64_t seed_;
    Rng rng_;
    GradCase c_;
};

}  // namespace detail

/// Settings of the end-to-end model case.
struct ModelGradSpec {
    std::size_t text_len = 6;
    std::size_t d_text = 8;
    std::size_t n_heads = 2;
    std::size_t k_s = 3;
    std::size_t n_encoder_layers = 1;
};

inline ModelConfig gradcheck_model_config(const ModelGradSpec& s, Variant v = Variant::full) {
    ModelConfig c;
    c.vocab_size = 12;
    c.max_len = s.text_len + 1;
    c.d_text = s.d_text;
    c.d_audio = 3;
    c.d_visual = 2;
    c.n_heads = s.n_heads;
    c.k_s = s.k_s;
    c.n_encoder_layers = s.n_encoder_layers;
    c.ffn_mult = 2;
    c.n_classes = 4;
    c.dropout = 0.0;
    c.variant = v;
    return c;
}

/// Two samples (full length and shorter, so padding is exercised) for the model case.
inline std::vector<MultimodalSample> gradcheck_samples(const ModelConfig& c, std::size_t text_len, Rng& rng) {
    std::vector<MultimodalSample> out;
    for (std::size_t L : {text_len, std::max<std::size_t>(1, text_len - 2)}) {
        MultimodalSample s;
        for (std::size_t i = 0; i < L; ++i) s.tokens.push_back(1 + static_cast<int>(rng.below(c.vocab_size - 1)));
        s.audio = detail::random_tensor({2 * L, c.d_audio}, rng);
        s.visual = detail::random_tensor({L + 1, c.d_visual}, rng);
        s.label = static_cast<int>(rng.below(c.n_classes));
        out.push_back(std::move(s));
    }
    return out;
}

/// Model case: cross-entropy of a padded two-sample batch. Parameters that are
/// zero at initialisation (kernel generator weights, output projection) are
/// perturbed so every path carries gradient.
inline GradCase model_grad_case(const ModelGradSpec& s, Variant v, std::uint64_t seed) {
    struct State {
        ModelConfig cfg;
        ModelParams params;
        Batch batch;
    };
    auto st = std::make_shared<State>();
    st->cfg = gradcheck_model_config(s, v);
    st->cfg.seed = seed;
    st->params = ModelParams::init(st->cfg);
    Rng rng(derive_seed(seed, 5));
    for (auto& x : st->params.fusion.kernel_out.w.data) x = rng.normal(0.0, 0.3);
    for (auto& x : st->params.fusion.out.w.data) x = rng.normal(0.0, 0.3);
    for (auto& x : st->params.fusion.long_filter.data) x += rng.normal(0.0, 0.3);
    const auto samples = gradcheck_samples(st->cfg, s.text_len, rng);
    st->batch = pad_and_batch(samples, samples.size()).front();

    GradCase c;
    c.name = "model/" + to_string(v);
    for (auto& np : st->params.named()) {
        c.params.push_back(np.tensor);
        c.names.push_back(np.name);
    }
    State* raw = st.get();
    c.loss = [raw](Graph& g) {
        auto r = forward(g, raw->batch, raw->cfg, raw->params);
        return cross_entropy(r.logits, raw->batch.labels);
    };
    c.keepalive = st;
    return c;
}

/// Every operator-level case.
inline std::vector<GradCase> operator_grad_cases(std::uint64_t seed = 0) {
    using detail::CaseBuilder;
    std::vector<GradCase> cases;
    std::uint64_t k = 0;
    auto builder = [&](std::string name) { return CaseBuilder(std::move(name), derive_seed(seed, k++)); };

    {
        auto b = builder("matmul");
        auto A = b.randn("a", {3, 4}), B = b.randn("b", {4, 5});
        cases.push_back(b.done([=](Graph& g) { return matmul(g.param(*A), g.param(*B)); }));
    }
    {
        auto b = builder("matmul_batched");
        auto A = b.randn("a", {2, 3, 4}), B = b.randn("b", {4, 2});
        cases.push_back(b.done([=](Graph& g) { return matmul(g.param(*A), g.param(*B)); }));
    }
    {
        auto b = builder("linear");
        auto X = b.randn("x", {4, 3}), W = b.randn("w", {3, 5}), B = b.randn("b", {5});
        cases.push_back(b.done([=](Graph& g) { return linear(g.param(*X), g.param(*W), g.param(*B)); }));
    }
    {
        auto b = builder("transpose");
        auto X = b.randn("x", {3, 5});
        cases.push_back(b.done([=](Graph& g) { return transpose(g.param(*X)); }));
    }
    {
        auto b = builder("add_mul_scale");
        auto X = b.randn("x", {3, 4}), Y = b.randn("y", {3, 4});
        cases.push_back(b.done([=](Graph& g) {
            Var x = g.param(*X), y = g.param(*Y);
            return scale(add(mul(x, y), x), -0.7);
        }));
    }
    for (auto [name, act] : {std::pair{"gelu", Activation::gelu}, std::pair{"tanh", Activation::tanh},
                             std::pair{"relu", Activation::relu}}) {
        auto b = builder(name);
        auto X = b.offset("x", {4, 3});
        cases.push_back(b.done([=](Graph& g) { return activation(g.param(*X), act); }));
    }
    {
        auto b = builder("dropout");
        auto X = b.randn("x", {5, 4});
        const std::uint64_t s = derive_seed(seed, 1000);
        cases.push_back(b.done([=](Graph& g) {
            Rng r(s);  // same mask on every evaluation
            return dropout(g.param(*X), 0.3, r);
        }));
    }
    {
        auto b = builder("sum_lastdim");
        auto X = b.randn("x", {2, 3, 4});
        cases.push_back(b.done([=](Graph& g) { return sum_lastdim(g.param(*X)); }));
    }
    {
        auto b = builder("softmax_masked");
        auto X = b.randn("x", {3, 5});
        const Mask m{1, 0, 1, 1, 0};
        cases.push_back(b.done([=](Graph& g) { return softmax_lastdim(g.param(*X), m); }));
    }
    {
        auto b = builder("layer_norm");
        auto X = b.randn("x", {3, 6}), G = b.randn("gamma", {6}), B = b.randn("beta", {6});
        cases.push_back(b.done([=](Graph& g) { return layer_norm(g.param(*X), g.param(*G), g.param(*B), 1e-5); }));
    }
    {
        auto b = builder("reshape_concat_slice");
        auto X = b.randn("x", {4, 6}), Y = b.randn("y", {4, 2});
        cases.push_back(b.done([=](Graph& g) {
            Var c = concat_lastdim(g.param(*X), g.param(*Y));
            return reshape(slice_lastdim(c, 1, 6), {2, 2, 6});
        }));
    }
    {
        auto b = builder("rows");
        auto X = b.randn("x", {3, 4}), Y = b.randn("y", {2, 4});
        const Mask m{1, 1, 0, 1, 1, 0, 0};
        cases.push_back(b.done([=](Graph& g) {
            Var c = concat_rows(g.param(*X), g.param(*Y));
            return mask_rows(pad_rows(slice_rows(c, 0, 5), 2), m);
        }));
    }
    {
        auto b = builder("masked_mean_broadcast");
        auto X = b.randn("x", {5, 3});
        const Mask m{1, 0, 1, 1, 0};
        cases.push_back(b.done([=](Graph& g) { return masked_mean_broadcast(g.param(*X), m); }));
    }
    {
        auto b = builder("embedding");
        auto T = b.randn("table", {6, 3});
        const std::vector<int> ids{2, 4, 5, 2, 1};  // the frozen row has its own test
        cases.push_back(b.done([=](Graph& g) { return embedding(g.param(*T), ids, 0); }));
    }
    {
        auto b = builder("unfold1d");
        auto X = b.randn("x", {5, 2});
        cases.push_back(b.done([=](Graph& g) { return unfold1d(g.param(*X), 3, 1); }));
    }
    {
        auto b = builder("fft_linear_conv");
        auto X = b.randn("x", {7, 3}), H = b.randn("h", {4, 3});
        cases.push_back(b.done([=](Graph& g) { return fft_linear_conv(g.param(*X), g.param(*H)); }));
    }
    {
        auto b = builder("long_conv_same");
        auto X = b.randn("x", {5, 2}), H = b.randn("h", {8, 2});
        cases.push_back(b.done([=](Graph& g) { return long_conv_same(g.param(*X), g.param(*H)); }));
    }
    {
        auto b = builder("dynamic_short_conv");
        auto X = b.randn("x", {6, 3}), K = b.randn("kernels", {6, 3, 5});
        cases.push_back(b.done([=](Graph& g) { return dynamic_short_conv(g.param(*X), g.param(*K)); }));
    }
    {
        auto b = builder("multi_head_attention");
        auto Q = b.randn("q", {4, 6}), K = b.randn("k", {5, 6}), V = b.randn("v", {5, 6});
        const Mask m{1, 1, 0, 1, 1};
        cases.push_back(b.done(
            [=](Graph& g) { return multi_head_attention(g.param(*Q), g.param(*K), g.param(*V), 2, m); }));
    }
    {
        auto b = builder("cross_entropy");
        auto Z = b.randn("logits", {4, 3}, 2.0);
        const std::vector<int> y{0, 2, 1, 2};
        GradCase c = b.done([](Graph&) -> Var { return {}; });
        c.loss = [Z, y](Graph& g) { return cross_entropy(g.param(*Z), y); };
        cases.push_back(std::move(c));
    }
    return cases;
}

/// Fusion block cases, one per variant, with every fusion parameter checked.
inline std::vector<GradCase> fusion_grad_cases(std::uint64_t seed = 0) {
    std::vector<GradCase> cases;
    for (Variant v : kAllVariants) {
        struct State {
            FusionConfig cfg;
            FusionParams p;
            Tensor f_t, audio, visual, key_pos;
        };
        auto st = std::make_shared<State>();
        st->cfg.d_text = 4;
        st->cfg.d_audio = 3;
        st->cfg.d_visual = 2;
        st->cfg.k_s = 3;
        st->cfg.n_heads = 2;
        st->cfg.kernel_mlp_hidden = 5;
        st->cfg.long_filter_len = 6;
        Rng rng(derive_seed(seed, 300 + static_cast<std::uint64_t>(v)));
        st->p = FusionParams::init(st->cfg, rng);
        for (auto& x : st->p.kernel_out.w.data) x = rng.normal(0.0, 0.3);
        for (auto& x : st->p.out.w.data) x = rng.normal(0.0, 0.3);
        for (auto& x : st->p.long_filter.data) x += rng.normal(0.0, 0.3);
        const std::size_t L = 5;
        st->f_t = detail::random_tensor({L, 4}, rng);
        st->audio = detail::random_tensor({2 * L, 3}, rng);
        st->visual = detail::random_tensor({L, 2}, rng);
        st->key_pos = detail::random_tensor({L, 4}, rng, 0.5);

        GradCase c;
        c.name = "fusion/" + to_string(v);
        auto ft = std::make_shared<Tensor>(st->f_t);
        c.owned.push_back(ft);
        c.params.push_back(ft.get());
        c.names.push_back("f_t");
        std::vector<NamedParam> named;
        st->p.collect("fusion", named);
        for (auto& np : named) {
            c.params.push_back(np.tensor);
            c.names.push_back(np.name);
        }
        State* raw = st.get();
        auto w = std::make_shared<std::shared_ptr<Tensor>>();
        const std::uint64_t ws = derive_seed(seed, 400 + static_cast<std::uint64_t>(v));
        Tensor* ftp = ft.get();
        c.loss = [raw, ftp, v, w, ws](Graph& g) {
            FusionInputs in;
            in.f_t = g.param(*ftp);
            in.audio = raw->audio;
            in.audio_mask = Mask(raw->audio.shape[0], 1);
            in.visual = raw->visual;
            in.visual_mask = Mask(raw->visual.shape[0], 1);
            in.text_mask = Mask{1, 1, 1, 1, 0};
            in.key_pos = g.constant(raw->key_pos);
            return detail::weighted_sum(g, fuse(g, in, raw->p, raw->cfg, v).f_final, *w, ws);
        };
        c.keepalive = st;
        cases.push_back(std::move(c));
    }
    return cases;
}

inline std::vector<GradCase> all_grad_cases(std::uint64_t seed = 0, const ModelGradSpec& model = {}) {
    auto cases = operator_grad_cases(seed);
    for (auto& c : fusion_grad_cases(seed)) cases.push_back(std::move(c));
    for (Variant v : kAllVariants) cases.push_back(model_grad_case(model, v, derive_seed(seed, 900)));
    return cases;
}

inline GradCaseResult run_grad_case(GradCase& c, double h, double tol) {
    return {c.name, finite_difference_check(c.loss, c.params, h, tol, c.names)};
}

}  // namespace dkh
