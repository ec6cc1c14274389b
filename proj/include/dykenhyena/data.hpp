// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic multimodal datasets, JSON Lines interchange and batching.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dykenhyena/config.hpp"
#include "dykenhyena/ops.hpp"
#include "dykenhyena/rng.hpp"

namespace dkh {

struct MultimodalSample {
    std::vector<int> tokens;  // [L_t]
    Tensor audio;             // [L_a, D_a]
    Tensor visual;            // [L_v, D_v]
    int label = 0;
    bool is_oos = false;

    bool operator==(const MultimodalSample& o) const {
        return tokens == o.tokens && audio.shape == o.audio.shape && audio.data == o.audio.data &&
               visual.shape == o.visual.shape && visual.data == o.visual.data && label == o.label &&
               is_oos == o.is_oos;
    }
};

// ---------------------------------------------------------------------------
// Synthetic generation

/// Knobs of the modality-flip and OOS generators.
///
/// Vocabulary layout: 0 = pad, then `n_filler` filler tokens, then
/// `tokens_per_intent` content tokens for each intent, then `n_oos_tokens`
/// tokens reserved for out-of-scope samples.
struct SynthSpec {
    std::size_t n_samples = 1000;
    std::size_t n_intents = 4;
    double flip_fraction = 0.5;
    double tone_snr = 100.0;  // noise variance is 1/tone_snr; inf = noiseless
    double oos_fraction = 0.0;
    std::size_t min_len = 4;
    std::size_t max_len = 8;
    std::size_t frames_per_token = 2;
    std::size_t d_audio = 4;
    std::size_t d_visual = 4;
    std::size_t tokens_per_intent = 3;
    std::size_t n_filler = 12;
    std::size_t n_oos_tokens = 6;
    std::size_t distractors = 0;  // extra random-sign tone bursts on non-content tokens
    std::uint64_t seed = 0;

    std::size_t filler_base() const { return 1; }
    std::size_t intent_base() const { return 1 + n_filler; }
    std::size_t oos_base() const { return intent_base() + n_intents * tokens_per_intent; }
    std::size_t vocab_size() const { return oos_base() + n_oos_tokens; }
    bool has_oos() const { return oos_fraction > 0.0; }
    int oos_class_index() const { return static_cast<int>(n_intents); }
    std::size_t n_classes() const { return n_intents + (has_oos() ? 1 : 0); }

    int intent_of_token(int tok) const {
        const auto t = static_cast<std::size_t>(tok);
        if (t < intent_base() || t >= oos_base()) return -1;
        return static_cast<int>((t - intent_base()) / tokens_per_intent);
    }
    bool is_oos_token(int tok) const {
        const auto t = static_cast<std::size_t>(tok);
        return t >= oos_base() && t < vocab_size();
    }

    void validate() const {
        auto frac = [](double f) { return f >= 0.0 && f <= 1.0; };
        if (!frac(flip_fraction)) throw BadSpec("flip_fraction must lie in [0, 1]");
        if (!frac(oos_fraction)) throw BadSpec("oos_fraction must lie in [0, 1]");
        if (n_intents < 2 || n_intents % 2 != 0) throw BadSpec("n_intents must be even and >= 2");
        if (!(tone_snr > 0.0)) throw BadSpec("tone_snr must be positive");
        if (min_len < 1 || max_len < min_len) throw BadSpec("need 1 <= min_len <= max_len");
        if (frames_per_token < 1) throw BadSpec("frames_per_token must be >= 1");
        if (d_audio < 1 || d_visual < 1) throw BadSpec("feature dims must be >= 1");
        if (tokens_per_intent < 1 || n_filler < 1) throw BadSpec("token set sizes must be >= 1");
        if (has_oos() && n_oos_tokens < 1) throw BadSpec("n_oos_tokens must be >= 1 with OOS samples");
    }

    static SynthSpec from_config(const Config& c, const std::string& p = "data.") {
        SynthSpec s;
        s.n_samples = c.get_size(p + "n_samples", s.n_samples);
        s.n_intents = c.get_size(p + "n_intents", s.n_intents);
        s.flip_fraction = c.get_double(p + "flip_fraction", s.flip_fraction);
        s.tone_snr = c.get_double(p + "tone_snr", s.tone_snr);
        s.oos_fraction = c.get_double(p + "oos_fraction", s.oos_fraction);
        s.min_len = c.get_size(p + "min_len", s.min_len);
        s.max_len = c.get_size(p + "max_len", s.max_len);
        s.frames_per_token = c.get_size(p + "frames_per_token", s.frames_per_token);
        s.d_audio = c.get_size(p + "d_audio", s.d_audio);
        s.d_visual = c.get_size(p + "d_visual", s.d_visual);
        s.tokens_per_intent = c.get_size(p + "tokens_per_intent", s.tokens_per_intent);
        s.n_filler = c.get_size(p + "n_filler", s.n_filler);
        s.n_oos_tokens = c.get_size(p + "n_oos_tokens", s.n_oos_tokens);
        s.distractors = c.get_size(p + "distractors", s.distractors);
        s.seed = c.get_u64(p + "seed", s.seed);
        return s;
    }

    void to_config(Config& c, const std::string& p = "data.") const {
        c.set(p + "n_samples", n_samples);
        c.set(p + "n_intents", n_intents);
        c.set(p + "flip_fraction", flip_fraction);
        c.set(p + "tone_snr", tone_snr);
        c.set(p + "oos_fraction", oos_fraction);
        c.set(p + "min_len", min_len);
        c.set(p + "max_len", max_len);
        c.set(p + "frames_per_token", frames_per_token);
        c.set(p + "d_audio", d_audio);
        c.set(p + "d_visual", d_visual);
        c.set(p + "tokens_per_intent", tokens_per_intent);
        c.set(p + "n_filler", n_filler);
        c.set(p + "n_oos_tokens", n_oos_tokens);
        c.set(p + "distractors", distractors);
        c.set(p + "seed", std::to_string(seed));
    }
};

/// Paired intents: 0<->1, 2<->3, ...
inline int partner_intent(int c) { return c ^ 1; }

namespace detail {

inline MultimodalSample synth_sample(const SynthSpec& s, std::size_t index, bool allow_oos) {
    // Each sample owns a stream derived from (seed, index), so any subset of a
    // dataset can be regenerated independently.
    Rng rng(derive_seed(s.seed, index));
    MultimodalSample out;
    const std::size_t L = s.min_len + rng.below(s.max_len - s.min_len + 1);
    out.tokens.resize(L);
    for (auto& t : out.tokens) t = static_cast<int>(s.filler_base() + rng.below(s.n_filler));
    const std::size_t pos = rng.below(L);

    double tone = 1.0;
    out.is_oos = allow_oos && rng.bernoulli(s.oos_fraction);
    if (out.is_oos) {
        out.tokens[pos] = static_cast<int>(s.oos_base() + rng.below(s.n_oos_tokens));
        tone = rng.bernoulli(0.5) ? -1.0 : 1.0;
        out.label = s.oos_class_index();
    } else {
        const int c = static_cast<int>(rng.below(s.n_intents));
        out.tokens[pos] = static_cast<int>(s.intent_base() + c * s.tokens_per_intent +
                                           rng.below(s.tokens_per_intent));
        tone = rng.bernoulli(s.flip_fraction) ? -1.0 : 1.0;
        out.label = tone > 0 ? c : partner_intent(c);
    }

    const double sd = std::isinf(s.tone_snr) ? 0.0 : std::sqrt(1.0 / s.tone_snr);
    const std::size_t fpt = s.frames_per_token;
    auto noise = [&](std::size_t rows, std::size_t cols) {
        Tensor t({rows, cols}, 0.0);
        for (auto& v : t.data) v = sd * rng.normal();
        return t;
    };
    out.audio = noise(L * fpt, s.d_audio);
    out.visual = noise(L * fpt, s.d_visual);
    auto burst = [&](Tensor& frames, std::size_t token, double amp) {
        for (std::size_t f = token * fpt; f < (token + 1) * fpt; ++f) frames.at(f, 0) += amp;
    };
    burst(out.audio, pos, tone);
    if (rng.bernoulli(0.5)) burst(out.visual, pos, tone);

    if (s.distractors > 0 && L > 1) {
        std::vector<std::size_t> others;
        for (std::size_t i = 0; i < L; ++i)
            if (i != pos) others.push_back(i);
        const std::size_t n = std::min(s.distractors, others.size());
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t pick = j + rng.below(others.size() - j);
            std::swap(others[j], others[pick]);
            burst(out.audio, others[j], rng.bernoulli(0.5) ? -1.0 : 1.0);
        }
    }
    return out;
}

}  // namespace detail

/// In-scope samples only: one content token per utterance whose meaning is
/// flipped to the partner intent when the co-located audio tone is negative.
inline std::vector<MultimodalSample> generate_modality_flip(const SynthSpec& s) {
    s.validate();
    std::vector<MultimodalSample> out;
    out.reserve(s.n_samples);
    for (std::size_t i = 0; i < s.n_samples; ++i) out.push_back(detail::synth_sample(s, i, false));
    return out;
}

/// Modality-flip samples plus a Bernoulli(oos_fraction) share of out-of-scope
/// utterances built from the reserved token set, labelled `n_intents`.
inline std::vector<MultimodalSample> generate_oos(const SynthSpec& s) {
    s.validate();
    if (!s.has_oos()) throw BadSpec("generate_oos needs oos_fraction > 0");
    std::vector<MultimodalSample> out;
    out.reserve(s.n_samples);
    for (std::size_t i = 0; i < s.n_samples; ++i) out.push_back(detail::synth_sample(s, i, true));
    return out;
}

inline std::vector<MultimodalSample> generate(const SynthSpec& s) {
    return s.has_oos() ? generate_oos(s) : generate_modality_flip(s);
}

// ---------------------------------------------------------------------------
// JSON Lines

struct DatasetMeta {
    std::size_t d_audio = 0;
    std::size_t d_visual = 0;
    std::size_t n_classes = 0;
    std::size_t vocab_size = 0;
    bool has_oos = false;  // the last class is the OOS class
    std::vector<std::string> class_names;
};

inline DatasetMeta meta_for(const SynthSpec& s) {
    DatasetMeta m;
    m.d_audio = s.d_audio;
    m.d_visual = s.d_visual;
    m.n_classes = s.n_classes();
    m.vocab_size = s.vocab_size();
    for (std::size_t c = 0; c < s.n_intents; ++c) m.class_names.push_back("intent_" + std::to_string(c));
    m.has_oos = s.has_oos();
    if (s.has_oos()) m.class_names.push_back("oos");
    return m;
}

struct Dataset {
    std::optional<DatasetMeta> meta;
    std::vector<MultimodalSample> samples;
};

namespace detail {
inline nlohmann::json frames_json(const Tensor& t) {
    auto arr = nlohmann::json::array();
    for (std::size_t r = 0; r < t.shape[0]; ++r) {
        auto row = nlohmann::json::array();
        for (std::size_t c = 0; c < t.shape[1]; ++c) row.push_back(t.at(r, c));
        arr.push_back(std::move(row));
    }
    return arr;
}

inline Tensor frames_from_json(const nlohmann::json& j, std::size_t width, const char* key,
                               std::size_t line) {
    if (!j.is_array() || j.empty()) throw ShapeError(line, std::string(key) + " must be a non-empty array");
    const std::size_t w = width ? width : (j[0].is_array() ? j[0].size() : 0);
    if (w == 0) throw ShapeError(line, std::string(key) + " rows must be non-empty arrays");
    Tensor t({j.size(), w}, 0.0);
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != w)
            throw ShapeError(line, std::string(key) + " row " + std::to_string(r) + " has width " +
                                       std::to_string(j[r].is_array() ? j[r].size() : 0) + ", expected " +
                                       std::to_string(w));
        for (std::size_t c = 0; c < w; ++c) {
            if (!j[r][c].is_number()) throw ParseError(line, std::string(key) + " holds a non-number");
            t.at(r, c) = j[r][c].get<double>();
        }
    }
    return t;
}
}  // namespace detail

inline std::string to_jsonl(const MultimodalSample& s) {
    nlohmann::json j;
    j["tokens"] = s.tokens;
    j["audio"] = detail::frames_json(s.audio);
    j["visual"] = detail::frames_json(s.visual);
    j["label"] = s.label;
    j["oos"] = s.is_oos;
    return j.dump();
}

inline std::string meta_jsonl(const DatasetMeta& m) {
    nlohmann::json j;
    j["meta"] = {{"d_audio", m.d_audio},
                 {"d_visual", m.d_visual},
                 {"n_classes", m.n_classes},
                 {"vocab_size", m.vocab_size},
                 {"has_oos", m.has_oos},
                 {"class_names", m.class_names}};
    return j.dump();
}

inline void write_jsonl(const std::string& path, const Dataset& ds) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write '" + path + "'");
    if (ds.meta) f << meta_jsonl(*ds.meta) << '\n';
    for (const auto& s : ds.samples) f << to_jsonl(s) << '\n';
    if (!f) throw IoError("write failed for '" + path + "'");
}

/// Reads a JSON Lines dataset. Dimensions and the class count come from the
/// optional meta header; without one, widths are fixed by the first record
/// and labels are only checked for being non-negative.
inline Dataset load_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    Dataset ds;
    std::size_t d_a = 0, d_v = 0, n_classes = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(lineno, e.what());
        }
        if (!j.is_object()) throw ParseError(lineno, "record must be a JSON object");
        if (j.contains("meta")) {
            if (!ds.samples.empty() || ds.meta) throw ParseError(lineno, "meta header must be the first line");
            const auto& m = j["meta"];
            DatasetMeta meta;
            try {
                meta.d_audio = m.at("d_audio").get<std::size_t>();
                meta.d_visual = m.at("d_visual").get<std::size_t>();
                meta.n_classes = m.value("n_classes", std::size_t{0});
                meta.vocab_size = m.value("vocab_size", std::size_t{0});
                meta.has_oos = m.value("has_oos", false);
                meta.class_names = m.value("class_names", std::vector<std::string>{});
            } catch (const nlohmann::json::exception& e) {
                throw ParseError(lineno, std::string("bad meta header: ") + e.what());
            }
            d_a = meta.d_audio;
            d_v = meta.d_visual;
            n_classes = meta.n_classes;
            ds.meta = std::move(meta);
            continue;
        }
        for (const char* k : {"tokens", "audio", "visual", "label", "oos"})
            if (!j.contains(k)) throw ParseError(lineno, std::string("missing key '") + k + "'");
        MultimodalSample s;
        try {
            s.tokens = j["tokens"].get<std::vector<int>>();
            s.label = j["label"].get<int>();
            s.is_oos = j["oos"].get<bool>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(lineno, e.what());
        }
        if (s.tokens.empty()) throw ShapeError(lineno, "tokens must be non-empty");
        for (int t : s.tokens)
            if (t < 0) throw ParseError(lineno, "negative token id");
        s.audio = detail::frames_from_json(j["audio"], d_a, "audio", lineno);
        s.visual = detail::frames_from_json(j["visual"], d_v, "visual", lineno);
        d_a = s.audio.shape[1];
        d_v = s.visual.shape[1];
        if (s.label < 0 || (n_classes && static_cast<std::size_t>(s.label) >= n_classes))
            throw LabelError(lineno, "label " + std::to_string(s.label));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Batching

/// Padded batch. Text rows have length `text_len` (pad id 0); audio/visual are
/// [B, frames, D] with zero rows past each sample's length.
struct Batch {
    std::size_t size = 0;
    std::size_t text_len = 0;
    std::size_t audio_len = 0;
    std::size_t visual_len = 0;
    std::vector<int> tokens;  // [B * text_len]
    Tensor audio;
    Tensor visual;
    std::vector<Mask> text_mask, audio_mask, visual_mask;
    std::vector<int> labels;
    std::vector<std::uint8_t> is_oos;

    std::span<const int> tokens_of(std::size_t b) const {
        return std::span<const int>(tokens).subspan(b * text_len, text_len);
    }
    Tensor audio_of(std::size_t b) const { return slice3(audio, b); }
    Tensor visual_of(std::size_t b) const { return slice3(visual, b); }

private:
    static Tensor slice3(const Tensor& t, std::size_t b) {
        const std::size_t n = t.shape[1] * t.shape[2];
        return Tensor({t.shape[1], t.shape[2]},
                      std::vector<double>(t.data.begin() + b * n, t.data.begin() + (b + 1) * n));
    }
};

inline std::size_t round_up(std::size_t n, std::size_t m) { return m <= 1 ? n : (n + m - 1) / m * m; }

/// Packs samples in order into padded batches. Each batch pads text to its
/// longest sample rounded up to `pad_multiple`; frame axes likewise.
inline std::vector<Batch> pad_and_batch(std::span<const MultimodalSample> samples, std::size_t batch_size,
                                        std::size_t pad_multiple = 1) {
    if (batch_size < 1) throw Error("pad_and_batch: batch_size must be >= 1");
    std::vector<Batch> out;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, samples.size() - start);
        auto chunk = samples.subspan(start, n);
        Batch b;
        b.size = n;
        std::size_t da = chunk[0].audio.shape[1], dv = chunk[0].visual.shape[1];
        for (const auto& s : chunk) {
            if (s.audio.shape[1] != da || s.visual.shape[1] != dv)
                throw ShapeMismatch("pad_and_batch: feature widths differ inside a batch");
            b.text_len = std::max(b.text_len, s.tokens.size());
            b.audio_len = std::max(b.audio_len, s.audio.shape[0]);
            b.visual_len = std::max(b.visual_len, s.visual.shape[0]);
        }
        b.text_len = round_up(b.text_len, pad_multiple);
        b.audio_len = round_up(b.audio_len, pad_multiple);
        b.visual_len = round_up(b.visual_len, pad_multiple);
        b.tokens.assign(n * b.text_len, 0);
        b.audio = Tensor({n, b.audio_len, da}, 0.0);
        b.visual = Tensor({n, b.visual_len, dv}, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& s = chunk[i];
            std::copy(s.tokens.begin(), s.tokens.end(), b.tokens.begin() + i * b.text_len);
            std::copy(s.audio.data.begin(), s.audio.data.end(), b.audio.data.begin() + i * b.audio_len * da);
            std::copy(s.visual.data.begin(), s.visual.data.end(),
                      b.visual.data.begin() + i * b.visual_len * dv);
            Mask tm(b.text_len, 0), am(b.audio_len, 0), vm(b.visual_len, 0);
            std::fill_n(tm.begin(), s.tokens.size(), 1);
            std::fill_n(am.begin(), s.audio.shape[0], 1);
            std::fill_n(vm.begin(), s.visual.shape[0], 1);
            b.text_mask.push_back(std::move(tm));
            b.audio_mask.push_back(std::move(am));
            b.visual_mask.push_back(std::move(vm));
            b.labels.push_back(s.label);
            b.is_oos.push_back(s.is_oos ? 1 : 0);
        }
        out.push_back(std::move(b));
    }
    return out;
}

/// Inverse of pad_and_batch for one batch.
inline std::vector<MultimodalSample> unpad(const Batch& b) {
    std::vector<MultimodalSample> out;
    for (std::size_t i = 0; i < b.size; ++i) {
        MultimodalSample s;
        auto count = [](const Mask& m) {
            return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
        };
        const std::size_t lt = count(b.text_mask[i]), la = count(b.audio_mask[i]), lv = count(b.visual_mask[i]);
        auto toks = b.tokens_of(i);
        s.tokens.assign(toks.begin(), toks.begin() + lt);
        const std::size_t da = b.audio.shape[2], dv = b.visual.shape[2];
        auto a0 = b.audio.data.begin() + i * b.audio_len * da;
        auto v0 = b.visual.data.begin() + i * b.visual_len * dv;
        s.audio = Tensor({la, da}, std::vector<double>(a0, a0 + la * da));
        s.visual = Tensor({lv, dv}, std::vector<double>(v0, v0 + lv * dv));
        s.label = b.labels[i];
        s.is_oos = b.is_oos[i] != 0;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace dkh
