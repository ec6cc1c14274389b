// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end classifier: token + position embedding with a prepended CLS row,
// the fusion block, a stack of pre-norm transformer layers and a linear head
// on the CLS position.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dykenhyena/config.hpp"
#include "dykenhyena/data.hpp"
#include "dykenhyena/fusion.hpp"

namespace dkh {

struct ModelConfig {
    std::size_t vocab_size = 32;
    std::size_t max_len = 16;  // includes the CLS position
    std::size_t d_text = 16;
    std::size_t d_audio = 4;
    std::size_t d_visual = 4;
    std::size_t n_heads = 2;
    std::size_t k_s = 3;
    std::size_t kernel_mlp_hidden = 0;  // 0 -> d_text
    std::size_t long_filter_len = 0;    // 0 -> max_len
    std::size_t n_encoder_layers = 2;
    std::size_t ffn_mult = 2;
    std::size_t n_classes = 4;
    Variant variant = Variant::full;
    double dropout = 0.1;
    double eps = 1e-5;
    double kernel_init_std = 0.0;
    double long_filter_init_std = 1e-4;
    /// Adds the positional table to the cross-modal attention keys.
    bool key_positions = true;
    std::uint64_t seed = 0;

    std::size_t hidden() const { return kernel_mlp_hidden ? kernel_mlp_hidden : d_text; }
    std::size_t filter_len() const { return long_filter_len ? long_filter_len : max_len; }

    FusionConfig fusion() const {
        FusionConfig f;
        f.d_text = d_text;
        f.d_audio = d_audio;
        f.d_visual = d_visual;
        f.k_s = k_s;
        f.n_heads = n_heads;
        f.kernel_mlp_hidden = hidden();
        f.long_filter_len = filter_len();
        f.eps = eps;
        f.kernel_init_std = kernel_init_std;
        f.long_filter_init_std = long_filter_init_std;
        return f;
    }

    void validate() const {
        fusion().validate();
        if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (max_len < 2) throw ConfigError("max_len must be >= 2");
        if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    }

    static ModelConfig from_config(const Config& c, const std::string& p = "model.") {
        ModelConfig m;
        m.vocab_size = c.get_size(p + "vocab_size", m.vocab_size);
        m.max_len = c.get_size(p + "max_len", m.max_len);
        m.d_text = c.get_size(p + "d_text", m.d_text);
        m.d_audio = c.get_size(p + "d_audio", m.d_audio);
        m.d_visual = c.get_size(p + "d_visual", m.d_visual);
        m.n_heads = c.get_size(p + "n_heads", m.n_heads);
        m.k_s = c.get_size(p + "k_s", m.k_s);
        m.kernel_mlp_hidden = c.get_size(p + "kernel_mlp_hidden", m.kernel_mlp_hidden);
        m.long_filter_len = c.get_size(p + "long_filter_len", m.long_filter_len);
        m.n_encoder_layers = c.get_size(p + "n_encoder_layers", m.n_encoder_layers);
        m.ffn_mult = c.get_size(p + "ffn_mult", m.ffn_mult);
        m.n_classes = c.get_size(p + "n_classes", m.n_classes);
        m.variant = parse_variant(c.get_string(p + "variant", to_string(m.variant)));
        m.dropout = c.get_double(p + "dropout", m.dropout);
        m.eps = c.get_double(p + "eps", m.eps);
        m.kernel_init_std = c.get_double(p + "kernel_init_std", m.kernel_init_std);
        m.long_filter_init_std = c.get_double(p + "long_filter_init_std", m.long_filter_init_std);
        m.key_positions = c.get_bool(p + "key_positions", m.key_positions);
        m.seed = c.get_u64(p + "seed", m.seed);
        return m;
    }

    Config to_config(const std::string& p = "model.") const {
        Config c;
        c.set(p + "vocab_size", vocab_size);
        c.set(p + "max_len", max_len);
        c.set(p + "d_text", d_text);
        c.set(p + "d_audio", d_audio);
        c.set(p + "d_visual", d_visual);
        c.set(p + "n_heads", n_heads);
        c.set(p + "k_s", k_s);
        c.set(p + "kernel_mlp_hidden", kernel_mlp_hidden);
        c.set(p + "long_filter_len", long_filter_len);
        c.set(p + "n_encoder_layers", n_encoder_layers);
        c.set(p + "ffn_mult", ffn_mult);
        c.set(p + "n_classes", n_classes);
        c.set(p + "variant", to_string(variant));
        c.set(p + "dropout", dropout);
        c.set(p + "eps", eps);
        c.set(p + "kernel_init_std", kernel_init_std);
        c.set(p + "long_filter_init_std", long_filter_init_std);
        c.set(p + "key_positions", key_positions);
        c.set(p + "seed", std::to_string(seed));
        return c;
    }
};

struct EncoderLayerParams {
    LayerNormParams ln1, ln2;
    LinearParams q, k, v, o;
    LinearParams ffn_in, ffn_out;

    static EncoderLayerParams init(std::size_t d, std::size_t ffn_mult, Rng& rng) {
        EncoderLayerParams p;
        p.ln1 = LayerNormParams(d);
        p.ln2 = LayerNormParams(d);
        p.q = LinearParams::init(d, d, rng);
        p.k = LinearParams::init(d, d, rng, false);  // a key bias shifts every score equally
        p.v = LinearParams::init(d, d, rng);
        p.o = LinearParams::init(d, d, rng);
        p.ffn_in = LinearParams::init(d, d * ffn_mult, rng);
        p.ffn_out = LinearParams::init(d * ffn_mult, d, rng);
        return p;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        ln1.collect(prefix + ".ln1", out);
        q.collect(prefix + ".q", out);
        k.collect(prefix + ".k", out);
        v.collect(prefix + ".v", out);
        o.collect(prefix + ".o", out);
        ln2.collect(prefix + ".ln2", out);
        ffn_in.collect(prefix + ".ffn_in", out);
        ffn_out.collect(prefix + ".ffn_out", out);
    }
};

struct ModelParams {
    Tensor token_embedding;  // [vocab, D], row 0 = padding
    Tensor cls;              // [1, D]
    Tensor position;         // [max_len, D]
    FusionParams fusion;
    std::vector<EncoderLayerParams> layers;
    LinearParams head;  // D -> n_classes

    static ModelParams init(const ModelConfig& c) {
        c.validate();
        Rng rng(c.seed);
        const std::size_t D = c.d_text;
        ModelParams p;
        p.token_embedding = Tensor({c.vocab_size, D}, 0.0);
        for (std::size_t i = D; i < p.token_embedding.size(); ++i) p.token_embedding.data[i] = rng.normal();
        p.cls = Tensor({1, D}, 0.0);
        for (auto& v : p.cls.data) v = rng.normal();
        p.position = Tensor({c.max_len, D}, 0.0);
        for (auto& v : p.position.data) v = rng.normal(0.0, 0.5);
        p.fusion = FusionParams::init(c.fusion(), rng);
        for (std::size_t l = 0; l < c.n_encoder_layers; ++l)
            p.layers.push_back(EncoderLayerParams::init(D, c.ffn_mult, rng));
        p.head = LinearParams::init(D, c.n_classes, rng);
        return p;
    }

    /// Every learnable tensor in a fixed order.
    std::vector<NamedParam> named() {
        std::vector<NamedParam> out;
        out.push_back({"embed.token", &token_embedding});
        out.push_back({"embed.cls", &cls});
        out.push_back({"embed.position", &position});
        fusion.collect("fusion", out);
        for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect("encoder." + std::to_string(l), out);
        head.collect("head", out);
        return out;
    }

    void zero_grad() {
        for (auto& np : named()) np.tensor->zero_grad();
    }
};

/// Learnable scalar count (the padding row of the token table included).
inline std::size_t count_params(const ModelConfig& c) {
    const std::size_t D = c.d_text, H = c.hidden(), K = c.k_s;
    auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
    std::size_t n = c.vocab_size * D + D + c.max_len * D;
    n += lin(c.d_audio, D) + lin(c.d_visual, D);
    n += lin(D, D) + 2 * D * D + lin(2 * D, D) + lin(D, D);  // attention, key without bias
    n += 2 * D;                                      // ln1
    n += lin(D, H) + lin(H, D * K);                  // kernel generator
    n += lin(D, 2 * D);                              // path projection
    n += c.filter_len() * D;                         // long filter
    n += lin(D, D) + 2 * D;                          // out projection, ln2
    const std::size_t F = D * c.ffn_mult;
    n += c.n_encoder_layers * (4 * lin(D, D) - D + 4 * D + lin(D, F) + lin(F, D));
    n += lin(D, c.n_classes);
    return n;
}

// ---------------------------------------------------------------------------
// Forward pass

/// [CLS, tokens...] + positions. Token id 0 is padding and receives no gradient.
inline Var embed(Graph& g, std::span<const int> tokens, ModelParams& p, const ModelConfig& c) {
    if (tokens.empty()) throw SequenceTooLong("empty token sequence");
    if (tokens.size() + 1 > c.max_len)
        throw SequenceTooLong(std::to_string(tokens.size()) + " tokens + CLS exceed max_len " +
                              std::to_string(c.max_len));
    Var cls = g.param(p.cls);
    Var tok = embedding(g.param(p.token_embedding), tokens, 0);
    Var pos = slice_rows(g.param(p.position), 0, tokens.size() + 1);
    return add(concat_rows(cls, tok), pos);
}

/// Pre-norm layer: x + MHA(LN(x)), then + FFN(LN(.)). Masked keys are ignored.
inline Var encoder_block(Graph& g, Var x, EncoderLayerParams& p, const ModelConfig& c, const Mask& mask,
                         const DropoutCtx& drop = {}) {
    Var h = p.ln1(g, x, c.eps);
    Var att = multi_head_attention(p.q(g, h), p.k(g, h), p.v(g, h), c.n_heads, mask, drop);
    x = add(x, p.o(g, att));
    Var h2 = p.ln2(g, x, c.eps);
    Var f = p.ffn_out(g, activation(p.ffn_in(g, h2), Activation::gelu));
    return add(x, drop(f));
}

/// Audio or visual frames of one sample aligned to its `n_tokens` text rows and
/// laid out as [CLS, tokens..., padding...]; the CLS row is the mean of the
/// aligned token rows and padding rows are zero.
inline Tensor aligned_with_cls(const Tensor& frames, const Mask& frame_mask, std::size_t n_tokens,
                               std::size_t rows) {
    Tensor a = align_to_text(frames, n_tokens, frame_mask);
    const std::size_t D = a.shape[1];
    Tensor out({rows, D}, 0.0);
    for (std::size_t i = 0; i < n_tokens; ++i)
        for (std::size_t d = 0; d < D; ++d) {
            out.at(i + 1, d) = a.at(i, d);
            out.at(0, d) += a.at(i, d);
        }
    for (std::size_t d = 0; d < D; ++d) out.at(0, d) /= static_cast<double>(n_tokens);
    return out;
}

struct ForwardResult {
    Var logits;  // [B, n_classes]
    std::vector<FusionTrace> traces;
};

struct ForwardOptions {
    bool keep_traces = false;
    Rng* dropout_rng = nullptr;  // null = evaluation mode
};

inline Var forward_sample(Graph& g, const Batch& batch, std::size_t b, const ModelConfig& c, ModelParams& p,
                          const ForwardOptions& opt, FusionTrace* trace) {
    const Mask& tm = batch.text_mask[b];
    const std::size_t n_tok = static_cast<std::size_t>(std::count(tm.begin(), tm.end(), std::uint8_t{1}));
    const std::size_t rows = batch.text_len + 1;
    Mask mask(rows, 0);
    mask[0] = 1;
    std::copy(tm.begin(), tm.end(), mask.begin() + 1);

    Var f_t = embed(g, batch.tokens_of(b), p, c);
    FusionInputs in;
    in.f_t = f_t;
    in.text_mask = mask;
    if (c.variant != Variant::text_only) {
        in.audio = aligned_with_cls(batch.audio_of(b), batch.audio_mask[b], n_tok, rows);
        in.visual = aligned_with_cls(batch.visual_of(b), batch.visual_mask[b], n_tok, rows);
        if (c.key_positions) in.key_pos = slice_rows(g.param(p.position), 0, rows);
    }
    FusionTrace tr = fuse(g, in, p.fusion, c.fusion(), c.variant);
    const DropoutCtx drop{opt.dropout_rng ? c.dropout : 0.0, opt.dropout_rng};
    Var x = tr.f_final;
    for (auto& layer : p.layers) x = encoder_block(g, x, layer, c, mask, drop);
    Var logits = p.head(g, slice_rows(x, 0, 1));
    if (trace) *trace = std::move(tr);
    return logits;
}

/// Logits for every sample of the batch. Samples are processed independently
/// (no cross-sample coupling), so a sample's logits do not depend on its batch.
inline ForwardResult forward(Graph& g, const Batch& batch, const ModelConfig& c, ModelParams& p,
                             const ForwardOptions& opt = {}) {
    ForwardResult r;
    std::vector<Var> rows;
    rows.reserve(batch.size);
    if (opt.keep_traces) r.traces.resize(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b)
        rows.push_back(forward_sample(g, batch, b, c, p, opt, opt.keep_traces ? &r.traces[b] : nullptr));
    r.logits = batch.size == 1 ? rows[0] : concat_rows(rows);
    r.logits.value().validate("logits");
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   "DKHY"  u32 version  u64 config_len  config bytes (canonical key=value text)
//   then per parameter:  u64 name_len  name bytes  u64 rank  u64 extents[rank]  f64 payload[numel]

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void put(std::ostream& o, T v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::istream& i, const std::string& path) {
    T v{};
    if (!i.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated checkpoint '" + path + "'");
    return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& c, ModelParams& p) {
    std::ofstream o(path, std::ios::binary);
    if (!o) throw IoError("cannot write checkpoint '" + path + "'");
    o.write("DKHY", 4);
    detail::put<std::uint32_t>(o, kCheckpointVersion);
    const std::string cfg = c.to_config().canonical();
    detail::put<std::uint64_t>(o, cfg.size());
    o.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (auto& np : p.named()) {
        detail::put<std::uint64_t>(o, np.name.size());
        o.write(np.name.data(), static_cast<std::streamsize>(np.name.size()));
        detail::put<std::uint64_t>(o, np.tensor->rank());
        for (auto e : np.tensor->shape) detail::put<std::uint64_t>(o, e);
        o.write(reinterpret_cast<const char*>(np.tensor->data.data()),
                static_cast<std::streamsize>(np.tensor->size() * sizeof(double)));
    }
    if (!o) throw IoError("write failed for checkpoint '" + path + "'");
}

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "DKHY", 4) != 0)
        throw IoError("'" + path + "' is not a checkpoint");
    const auto version = detail::get<std::uint32_t>(in, path);
    if (version != kCheckpointVersion)
        throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    const auto len = detail::get<std::uint64_t>(in, path);
    std::string cfg(len, '\0');
    if (!in.read(cfg.data(), static_cast<std::streamsize>(len))) throw IoError("truncated checkpoint config");
    Checkpoint ck{ModelConfig::from_config(Config::parse(cfg)), {}};
    ck.params = ModelParams::init(ck.config);
    auto named = ck.params.named();
    for (auto& np : named) {
        const auto nlen = detail::get<std::uint64_t>(in, path);
        std::string name(nlen, '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(nlen))) throw IoError("truncated checkpoint");
        if (name != np.name) throw IoError("checkpoint record '" + name + "', expected '" + np.name + "'");
        const auto rank = detail::get<std::uint64_t>(in, path);
        Shape s;
        for (std::uint64_t r = 0; r < rank; ++r) s.push_back(detail::get<std::uint64_t>(in, path));
        if (s != np.tensor->shape) throw IoError("checkpoint shape mismatch for '" + name + "'");
        if (!in.read(reinterpret_cast<char*>(np.tensor->data.data()),
                     static_cast<std::streamsize>(np.tensor->size() * sizeof(double))))
            throw IoError("truncated checkpoint payload");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in checkpoint '" + path + "'");
    return ck;
}

}  // namespace dkh
