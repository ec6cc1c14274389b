// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dykenhyena/gradcheck_suite.hpp"
#include "dykenhyena/model.hpp"
#include "oracles.hpp"

using namespace dkh;

namespace {

ModelConfig tiny(Variant v = Variant::full) {
    ModelConfig c;
    c.vocab_size = 20;
    c.max_len = 12;
    c.d_text = 8;
    c.d_audio = 3;
    c.d_visual = 2;
    c.n_heads = 2;
    c.n_encoder_layers = 2;
    c.n_classes = 5;
    c.dropout = 0.0;
    c.variant = v;
    c.seed = 3;
    return c;
}

// Zero-initialised paths get random values so every stage matters.
void wake(ModelParams& p, std::uint64_t seed) {
    Rng rng(seed);
    for (auto* t : {&p.fusion.kernel_out.w, &p.fusion.out.w})
        for (auto& v : t->data) v = rng.normal(0.0, 0.3);
}

MultimodalSample sample(const ModelConfig& c, std::size_t L, Rng& rng) {
    MultimodalSample s;
    for (std::size_t i = 0; i < L; ++i) s.tokens.push_back(1 + static_cast<int>(rng.below(c.vocab_size - 1)));
    s.audio = oracle::random({2 * L, c.d_audio}, rng);
    s.visual = oracle::random({L + 1, c.d_visual}, rng);
    s.label = static_cast<int>(rng.below(c.n_classes));
    return s;
}

Tensor logits(const std::vector<MultimodalSample>& s, const ModelConfig& c, ModelParams& p,
              std::size_t pad_multiple = 1, std::size_t batch = 64) {
    std::vector<double> out;
    for (const auto& b : pad_and_batch(s, batch, pad_multiple)) {
        Graph g(false);
        auto r = forward(g, b, c, p);
        out.insert(out.end(), r.logits.value().data.begin(), r.logits.value().data.end());
    }
    return Tensor({s.size(), c.n_classes}, std::move(out));
}

}  // namespace

TEST(Embed, ShapesAndErrors) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    Graph g;
    std::vector<int> toks{3, 4, 5};
    Var e = embed(g, toks, p, c);
    EXPECT_EQ(e.shape(), (Shape{4, 8}));
    for (std::size_t d = 0; d < 8; ++d) {
        EXPECT_EQ(e.value().at(0, d), p.cls.data[d] + p.position.at(0, d));
        EXPECT_EQ(e.value().at(2, d), p.token_embedding.at(4, d) + p.position.at(2, d));
    }
    std::vector<int> empty;
    EXPECT_THROW(embed(g, empty, p, c), SequenceTooLong);
    std::vector<int> longer(c.max_len, 1);
    EXPECT_THROW(embed(g, longer, p, c), SequenceTooLong);
    std::vector<int> bad{1, 20};
    EXPECT_THROW(embed(g, bad, p, c), TokenOutOfRange);
}

TEST(Embed, PaddingRowIsZeroAndFrozen) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    for (std::size_t d = 0; d < 8; ++d) EXPECT_EQ(p.token_embedding.at(0, d), 0.0);
    p.token_embedding.requires_grad = true;
    p.token_embedding.zero_grad();
    Graph g;
    std::vector<int> toks{0, 2, 0};
    g.backward(sum(embed(g, toks, p, c)));
    for (std::size_t d = 0; d < 8; ++d) {
        EXPECT_EQ(p.token_embedding.grad[d], 0.0);
        EXPECT_EQ(p.token_embedding.grad[2 * 8 + d], 1.0);
    }
}

TEST(EncoderBlock, ZeroOutputProjectionsGiveIdentity) {
    ModelConfig c = tiny();
    Rng rng(1);
    EncoderLayerParams p = EncoderLayerParams::init(8, 2, rng);
    for (auto* t : {&p.o.w, &p.o.b, &p.ffn_out.w, &p.ffn_out.b}) std::fill(t->data.begin(), t->data.end(), 0.0);
    Tensor x = oracle::random({5, 8}, rng);
    Graph g;
    EXPECT_EQ(encoder_block(g, g.constant(x), p, c, Mask(5, 1)).value().data, x.data);
}

TEST(EncoderBlock, SingleValidKeyCopiesItsValue) {
    ModelConfig c = tiny();
    Rng rng(2);
    EncoderLayerParams p = EncoderLayerParams::init(8, 2, rng);
    for (auto* t : {&p.ffn_out.w, &p.ffn_out.b}) std::fill(t->data.begin(), t->data.end(), 0.0);
    Tensor x = oracle::random({4, 8}, rng);
    Graph g;
    Var y = encoder_block(g, g.constant(x), p, c, Mask{1, 0, 0, 0});
    // every query's only admissible key is row 0, so the weight on it is 1
    Var h = p.ln1(g, g.constant(x), c.eps);
    Var v0 = p.o(g, slice_rows(p.v(g, h), 0, 1));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(y.value().at(i, d), x.at(i, d) + v0.value().data[d], 1e-12);
}

TEST(CountParams, MatchesAllocatedTensors) {
    for (std::size_t k : {1, 3, 5, 7})
        for (std::size_t layers : {0, 1, 3}) {
            ModelConfig c = tiny();
            c.k_s = k;
            c.n_encoder_layers = layers;
            ModelParams p = ModelParams::init(c);
            std::size_t n = 0;
            for (auto& np : p.named()) n += np.tensor->size();
            EXPECT_EQ(count_params(c), n) << "k=" << k << " layers=" << layers;
        }
}

TEST(CountParams, KernelSizeDifferenceLaw) {
    const std::size_t D = 8;
    ModelConfig c = tiny();
    c.kernel_mlp_hidden = 6;
    std::size_t prev = 0;
    for (std::size_t k : {1, 3, 5, 7, 9}) {
        c.k_s = k;
        const std::size_t n = count_params(c);
        if (k > 1) {
            EXPECT_GT(n, prev);
            EXPECT_EQ(n - prev, 2 * D * (6 + 1));
        }
        prev = n;
    }
    ModelConfig a = tiny(), b = tiny();
    a.k_s = 3;
    b.k_s = 7;
    EXPECT_EQ(count_params(b) - count_params(a), (7 - 3) * D * (a.hidden() + 1));
}

TEST(Forward, LogitsShapeAndFinite) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    Rng rng(4);
    std::vector<MultimodalSample> s;
    for (std::size_t L : {3, 7, 1, 11}) s.push_back(sample(c, L, rng));
    Tensor l = logits(s, c, p);
    EXPECT_EQ(l.shape, (Shape{4, 5}));
    for (double v : l.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, PaddingInvariance) {
    for (Variant v : kAllVariants) {
        ModelConfig c = tiny(v);
        ModelParams p = ModelParams::init(c);
        wake(p, 5);
        Rng rng(5);
        std::vector<MultimodalSample> s;
        for (std::size_t L : {2, 3}) s.push_back(sample(c, L, rng));
        Tensor base = logits(s, c, p, 1, 1);
        // pad_multiple m rounds text 3 -> up to 11 tokens: eight pads at most
        for (std::size_t m : {2, 4, 5, 8, 11}) {
            Tensor padded = logits(s, c, p, m, 2);
            EXPECT_LE(oracle::max_abs_diff(padded, base), 1e-10) << to_string(v) << " m=" << m;
        }
    }
}

TEST(Forward, BatchCompositionAndOrderInvariance) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    wake(p, 6);
    Rng rng(6);
    std::vector<MultimodalSample> s;
    for (std::size_t L : {5, 2, 9, 4, 4, 1}) s.push_back(sample(c, L, rng));
    Tensor alone = logits(s, c, p, 1, 1);
    Tensor together = logits(s, c, p, 1, 6);
    EXPECT_LE(oracle::max_abs_diff(alone, together), 1e-10);

    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<MultimodalSample> shuffled;
    for (auto i : perm) shuffled.push_back(s[i]);
    Tensor ps = logits(shuffled, c, p, 1, 6);
    for (std::size_t r = 0; r < perm.size(); ++r)
        for (std::size_t k = 0; k < c.n_classes; ++k) EXPECT_NEAR(ps.at(r, k), together.at(perm[r], k), 1e-10);

    std::vector<MultimodalSample> twins{s[0], s[0]};
    Tensor t = logits(twins, c, p);
    for (std::size_t k = 0; k < c.n_classes; ++k) EXPECT_EQ(t.at(0, k), t.at(1, k));
}

TEST(Forward, TextOnlyIgnoresAudioAndVisual) {
    ModelConfig c = tiny(Variant::text_only);
    ModelParams p = ModelParams::init(c);
    Rng rng(7);
    std::vector<MultimodalSample> s{sample(c, 6, rng)};
    Tensor before = logits(s, c, p);
    for (auto& v : s[0].audio.data) v = rng.normal(0.0, 10.0);
    for (auto& v : s[0].visual.data) v = rng.normal(0.0, 10.0);
    EXPECT_EQ(logits(s, c, p).data, before.data);
}

TEST(Forward, FullEqualsTextOnlyAtInit) {
    Rng rng(8);
    ModelConfig full = tiny(Variant::full), text = tiny(Variant::text_only);
    ModelParams pf = ModelParams::init(full), pt = ModelParams::init(text);
    std::vector<MultimodalSample> s;
    for (std::size_t L : {3, 6, 10}) s.push_back(sample(full, L, rng));
    EXPECT_LE(oracle::max_abs_diff(logits(s, full, pf), logits(s, text, pt)), 1e-10);
}

TEST(Forward, AudioMattersOnceFusionIsAwake) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    wake(p, 9);
    Rng rng(9);
    std::vector<MultimodalSample> s{sample(c, 6, rng)};
    Tensor before = logits(s, c, p);
    for (auto& v : s[0].audio.data) v += 1.0;
    EXPECT_GT(oracle::max_abs_diff(logits(s, c, p), before), 1e-6);
}

TEST(Forward, NoDynamicShortConvIgnoresKernelGenerator) {
    ModelConfig c = tiny(Variant::no_dynamic_short_conv);
    ModelParams p = ModelParams::init(c);
    wake(p, 10);
    Rng rng(10);
    std::vector<MultimodalSample> s{sample(c, 5, rng), sample(c, 8, rng)};
    Tensor before = logits(s, c, p);
    for (auto* t : {&p.fusion.kernel_hidden.w, &p.fusion.kernel_out.w, &p.fusion.kernel_out.b, &p.fusion.ln1.gamma})
        for (auto& v : t->data) v = rng.normal();
    EXPECT_EQ(logits(s, c, p).data, before.data);
}

TEST(Forward, KeepsTracesOnRequest) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    Rng rng(11);
    std::vector<MultimodalSample> s{sample(c, 4, rng), sample(c, 2, rng)};
    auto batches = pad_and_batch(s, 2);
    Graph g(false);
    auto r = forward(g, batches[0], c, p, {.keep_traces = true});
    ASSERT_EQ(r.traces.size(), 2u);
    EXPECT_EQ(r.traces[1].kernels->shape(), (Shape{5, 8, 3}));
}

TEST(Forward, DropoutOnlyWithRng) {
    ModelConfig c = tiny();
    c.dropout = 0.5;
    ModelParams p = ModelParams::init(c);
    Rng rng(12);
    std::vector<MultimodalSample> s{sample(c, 6, rng)};
    auto b = pad_and_batch(s, 1)[0];
    Graph g1(false), g2(false), g3(false);
    const auto eval1 = forward(g1, b, c, p).logits.value().data;
    const auto eval2 = forward(g2, b, c, p).logits.value().data;
    EXPECT_EQ(eval1, eval2);
    Rng drop(1);
    EXPECT_NE(forward(g3, b, c, p, {.dropout_rng = &drop}).logits.value().data, eval1);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    ModelConfig c = tiny(Variant::no_long_conv);
    c.k_s = 5;
    ModelParams p = ModelParams::init(c);
    wake(p, 13);
    const auto path = (std::filesystem::temp_directory_path() / "dkh_test_roundtrip.ckpt").string();
    save_checkpoint(path, c, p);
    Checkpoint ck = load_checkpoint(path);
    EXPECT_EQ(ck.config.to_config().canonical(), c.to_config().canonical());
    auto a = p.named(), b = ck.params.named();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(a[i].tensor->shape, b[i].tensor->shape);
        EXPECT_EQ(a[i].tensor->data, b[i].tensor->data) << a[i].name;
    }
    Rng rng(13);
    std::vector<MultimodalSample> s{sample(c, 4, rng)};
    EXPECT_EQ(logits(s, c, p).data, logits(s, ck.config, ck.params).data);
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsOtherVersionsAndGarbage) {
    ModelConfig c = tiny();
    ModelParams p = ModelParams::init(c);
    const auto path = (std::filesystem::temp_directory_path() / "dkh_test_version.ckpt").string();
    save_checkpoint(path, c, p);
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        const std::uint32_t v = 2;
        f.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    EXPECT_THROW(load_checkpoint(path), VersionMismatch);
    {
        std::ofstream f(path, std::ios::binary);
        f << "not a checkpoint";
    }
    EXPECT_THROW(load_checkpoint(path), IoError);
    save_checkpoint(path, c, p);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    EXPECT_THROW(load_checkpoint(path), IoError);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(ModelConfig, RoundTripsThroughConfig) {
    ModelConfig c = tiny(Variant::no_attention);
    c.k_s = 7;
    c.seed = 123456789012345ULL;
    ModelConfig d = ModelConfig::from_config(c.to_config());
    EXPECT_EQ(d.to_config().canonical(), c.to_config().canonical());
    EXPECT_EQ(d.variant, Variant::no_attention);
    EXPECT_EQ(d.seed, c.seed);
    c.k_s = 4;
    EXPECT_THROW(c.validate(), BadKernelSize);
}

TEST(ModelGradient, StackedBlocksEveryVariant) {
    ModelGradSpec spec;
    spec.n_encoder_layers = 2;
    for (Variant v : kAllVariants) {
        GradCase gc = model_grad_case(spec, v, 21);
        const auto r = run_grad_case(gc, 1e-5, 1e-4);
        EXPECT_TRUE(r.report.passed) << r.name << " " << r.report.max_rel_error << " at " << r.report.worst;
    }
}
