// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dykenhyena/metrics.hpp"
#include "dykenhyena/model.hpp"

namespace dkh {

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip_norm = 1.0;  // <= 0 disables clipping
    std::uint64_t shuffle_seed = 0;
    std::size_t n_runs = 5;
    std::size_t pad_multiple = 1;

    void validate() const {
        // Zero is accepted so a run can be a no-op (params stay at init).
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (n_runs < 1) throw ConfigError("n_runs must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    }

    static TrainConfig from_config(const Config& c, const std::string& p = "train.") {
        TrainConfig t;
        t.epochs = c.get_size(p + "epochs", t.epochs);
        t.batch_size = c.get_size(p + "batch_size", t.batch_size);
        t.learning_rate = c.get_double(p + "learning_rate", t.learning_rate);
        t.beta1 = c.get_double(p + "beta1", t.beta1);
        t.beta2 = c.get_double(p + "beta2", t.beta2);
        t.adam_eps = c.get_double(p + "adam_eps", t.adam_eps);
        t.weight_decay = c.get_double(p + "weight_decay", t.weight_decay);
        t.grad_clip_norm = c.get_double(p + "grad_clip_norm", t.grad_clip_norm);
        t.shuffle_seed = c.get_u64(p + "shuffle_seed", t.shuffle_seed);
        t.n_runs = c.get_size(p + "n_runs", t.n_runs);
        t.pad_multiple = c.get_size(p + "pad_multiple", t.pad_multiple);
        t.validate();
        return t;
    }

    void to_config(Config& c, const std::string& p = "train.") const {
        c.set(p + "epochs", epochs);
        c.set(p + "batch_size", batch_size);
        c.set(p + "learning_rate", learning_rate);
        c.set(p + "beta1", beta1);
        c.set(p + "beta2", beta2);
        c.set(p + "adam_eps", adam_eps);
        c.set(p + "weight_decay", weight_decay);
        c.set(p + "grad_clip_norm", grad_clip_norm);
        c.set(p + "shuffle_seed", std::to_string(shuffle_seed));
        c.set(p + "n_runs", n_runs);
        c.set(p + "pad_multiple", pad_multiple);
    }
};

// ---------------------------------------------------------------------------
// Loss and optimiser

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
    const Tensor& Z = logits.value();
    if (Z.rank() != 2) throw ShapeMismatch("cross_entropy expects [B, C] logits");
    const std::size_t B = Z.shape[0], C = Z.shape[1];
    if (labels.size() != B) throw ShapeMismatch("cross_entropy: label count differs from batch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw LabelOutOfRange("label " + std::to_string(y) + " with " + std::to_string(C) + " classes");
    std::vector<double> probs(B * C);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = Z.data.data() + b * C;
        const double mx = *std::max_element(z, z + C);
        double s = 0.0;
        for (std::size_t j = 0; j < C; ++j) s += std::exp(z[j] - mx);
        const double lse = mx + std::log(s);
        loss += lse - z[labels[b]];
        for (std::size_t j = 0; j < C; ++j) probs[b * C + j] = std::exp(z[j] - lse);
    }
    loss /= static_cast<double>(B);
    return logits.graph->record(
        Tensor::scalar(loss), {logits},
        [z = logits.id, probs = std::move(probs), labels = std::vector<int>(labels.begin(), labels.end()), B,
         C](Graph& g, std::size_t self) {
            const double G = g.grad(self)[0] / static_cast<double>(B);
            double* dz = g.grad_if_needed(z);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < C; ++j)
                    dz[b * C + j] += G * (probs[b * C + j] - (static_cast<int>(j) == labels[b] ? 1.0 : 0.0));
        },
        "cross_entropy");
}

struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::size_t t = 0;

    explicit AdamState(std::span<const NamedParam> params) {
        for (const auto& p : params) {
            m.emplace_back(p.tensor->size(), 0.0);
            v.emplace_back(p.tensor->size(), 0.0);
        }
    }
};

/// One bias-corrected Adam step on every parameter using its Tensor::grad.
/// Decoupled weight decay scales parameters by (1 - lr*wd) before the update.
inline void adam_step(std::span<const NamedParam> params, AdamState& st, const TrainConfig& c) {
    if (st.m.size() != params.size()) throw Error("adam state does not match parameters");
    ++st.t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
    const double decay = 1.0 - c.learning_rate * c.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].tensor;
        if (p.grad.size() != p.size()) p.zero_grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = p.grad[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            if (c.weight_decay > 0.0) p.data[j] *= decay;
            p.data[j] -= c.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.adam_eps);
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::span<const NamedParam> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p.tensor->grad) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NonFinite("gradient norm is not finite");
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& p : params)
            for (double& g : p.tensor->grad) g *= s;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::optional<std::size_t> oos_index_for(const ModelConfig& c, bool has_oos) {
    return has_oos ? std::optional<std::size_t>(c.n_classes - 1) : std::nullopt;
}

/// Argmax predictions (lowest index on ties) for every sample.
inline std::vector<std::size_t> predict(std::span<const MultimodalSample> data, const ModelConfig& c,
                                        ModelParams& p, std::size_t batch_size = 64) {
    std::vector<std::size_t> out;
    out.reserve(data.size());
    for (const Batch& b : pad_and_batch(data, batch_size)) {
        Graph g(false);
        auto r = forward(g, b, c, p);
        const auto& z = r.logits.value();
        for (std::size_t i = 0; i < b.size; ++i)
            out.push_back(argmax(std::span<const double>(z.data).subspan(i * c.n_classes, c.n_classes)));
    }
    return out;
}

/// Confusion-matrix metrics of the model on a labelled set. OOS metrics are
/// reported when `has_oos` (the OOS class is the last index).
inline MetricsReport evaluate(std::span<const MultimodalSample> data, const ModelConfig& c, ModelParams& p,
                              bool has_oos = false) {
    if (data.empty()) throw EmptyDataset("evaluate on an empty dataset");
    const auto pred = predict(data, c, p);
    Confusion m(c.n_classes, std::vector<long long>(c.n_classes, 0));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int y = data[i].label;
        if (y < 0 || static_cast<std::size_t>(y) >= c.n_classes)
            throw LabelOutOfRange("label " + std::to_string(y));
        ++m[static_cast<std::size_t>(y)][pred[i]];
    }
    return metrics_from_confusion(m, oos_index_for(c, has_oos));
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double grad_norm_max = 0.0;
    std::optional<MetricsReport> eval;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
};

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json j = {{"acc", r.acc},
                        {"wf", r.weighted_f1},
                        {"wp", r.weighted_precision},
                        {"f1", r.macro_f1},
                        {"prec", r.macro_precision},
                        {"rec", r.macro_recall}};
    if (r.has_oos) {
        j["oid_acc"] = r.oid_acc;
        j["f1_is"] = r.f1_is;
        j["f1_oos"] = r.f1_oos;
        j["oid_f1"] = r.oid_f1;
    }
    j["confusion"] = r.confusion;
    return j;
}

/// One JSON object per epoch.
inline std::string log_jsonl(const TrainLog& log) {
    std::string out;
    for (const auto& e : log.epochs) {
        nlohmann::json j = {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"grad_norm_max", e.grad_norm_max}};
        if (e.eval) j["eval"] = report_json(*e.eval);
        out += j.dump() + "\n";
    }
    return out;
}

struct TrainOptions {
    std::span<const MultimodalSample> eval_set = {};
    bool eval_has_oos = false;
};

/// Mini-batch Adam training. The sample order of epoch e is a Fisher-Yates
/// shuffle driven by derive_seed(shuffle_seed, e); dropout masks come from a
/// stream seeded by derive_seed(shuffle_seed, 1 << 32).
inline TrainLog train(const ModelConfig& c, ModelParams& p, std::span<const MultimodalSample> data,
                      const TrainConfig& tc, const TrainOptions& opt = {}) {
    tc.validate();
    if (data.empty()) throw EmptyDataset("train on an empty dataset");
    auto params = p.named();
    for (auto& np : params) {
        np.tensor->requires_grad = true;
        np.tensor->zero_grad();
    }
    AdamState st(params);
    Rng drop_rng(derive_seed(tc.shuffle_seed, 1ull << 32));
    std::vector<std::size_t> order(data.size());
    TrainLog log;
    for (std::size_t e = 1; e <= tc.epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(tc.shuffle_seed, e));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        std::vector<MultimodalSample> shuffled;
        shuffled.reserve(data.size());
        for (auto i : order) shuffled.push_back(data[i]);

        EpochLog el;
        el.epoch = e;
        double loss_sum = 0.0;
        for (const Batch& b : pad_and_batch(shuffled, tc.batch_size, tc.pad_multiple)) {
            for (auto& np : params) std::fill(np.tensor->grad.begin(), np.tensor->grad.end(), 0.0);
            Graph g;
            ForwardOptions fo;
            fo.dropout_rng = c.dropout > 0.0 ? &drop_rng : nullptr;
            auto r = forward(g, b, c, p, fo);
            Var loss = cross_entropy(r.logits, b.labels);
            if (!std::isfinite(loss.item())) throw NonFinite("training loss is not finite");
            loss_sum += loss.item() * static_cast<double>(b.size);
            g.backward(loss);
            el.grad_norm_max = std::max(el.grad_norm_max, clip_grad_norm(params, tc.grad_clip_norm));
            adam_step(params, st, tc);
        }
        el.mean_loss = loss_sum / static_cast<double>(data.size());
        if (!opt.eval_set.empty()) el.eval = evaluate(opt.eval_set, c, p, opt.eval_has_oos);
        log.epochs.push_back(std::move(el));
    }
    return log;
}

// ---------------------------------------------------------------------------
// Experiment harness (ablations and kernel-size sweeps)

struct ExperimentSpec {
    ModelConfig model;
    TrainConfig train;
    SynthSpec data;  // data.n_samples is ignored; the sizes below are used
    std::size_t n_train = 1000;
    std::size_t n_test = 200;
    std::uint64_t seed = 0;  // run r uses run seed derive_seed(seed, r)

    static ExperimentSpec from_config(const Config& c) {
        ExperimentSpec e;
        e.data = SynthSpec::from_config(c);
        e.model = ModelConfig::from_config(c);
        e.train = TrainConfig::from_config(c);
        e.n_train = c.get_size("experiment.n_train", e.n_train);
        e.n_test = c.get_size("experiment.n_test", e.n_test);
        e.seed = c.get_u64("experiment.seed", e.seed);
        return e;
    }

    Config to_config() const {
        Config c = model.to_config();
        train.to_config(c);
        data.to_config(c);
        c.set("experiment.n_train", n_train);
        c.set("experiment.n_test", n_test);
        c.set("experiment.seed", std::to_string(seed));
        return c;
    }
};

struct RunResult {
    std::string variant;
    std::size_t k_s = 0;
    std::uint64_t seed = 0;
    MetricsReport report;
    TrainLog log;
};

struct ExperimentData {
    std::vector<MultimodalSample> train, test;
    bool has_oos = false;
};

/// Train and test sets share the generator settings; the test set uses a derived seed.
inline ExperimentData make_experiment_data(const ExperimentSpec& e) {
    SynthSpec tr = e.data;
    tr.n_samples = e.n_train;
    SynthSpec te = e.data;
    te.n_samples = e.n_test;
    te.seed = derive_seed(e.data.seed, 0xE7A1);
    return {generate(tr), generate(te), e.data.has_oos()};
}

/// Fills vocabulary, feature widths and class count from the data spec.
inline ModelConfig model_for_data(ModelConfig m, const SynthSpec& s) {
    m.vocab_size = s.vocab_size();
    m.d_audio = s.d_audio;
    m.d_visual = s.d_visual;
    m.n_classes = s.n_classes();
    m.max_len = std::max(m.max_len, s.max_len + 1);
    return m;
}

inline std::size_t thread_count() {
    if (const char* env = std::getenv("DKH_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<std::size_t>(n);
    }
    return 1;
}

/// Runs every job, at most `threads` at a time. Results keep job order.
template <class Job>
std::vector<RunResult> run_jobs(const std::vector<Job>& jobs, std::size_t threads) {
    std::vector<RunResult> out(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
            try {
                out[i] = jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(threads, jobs.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

/// Trains and evaluates one configuration for run index r.
inline RunResult run_single(const ExperimentSpec& e, const ExperimentData& d, Variant v, std::size_t k_s,
                            std::size_t r) {
    const std::uint64_t run_seed = derive_seed(e.seed, r);
    ModelConfig mc = model_for_data(e.model, e.data);
    mc.variant = v;
    mc.k_s = k_s;
    mc.seed = derive_seed(run_seed, 1);
    TrainConfig tc = e.train;
    tc.shuffle_seed = derive_seed(run_seed, 2);
    ModelParams p = ModelParams::init(mc);
    RunResult res;
    res.variant = to_string(v);
    res.k_s = k_s;
    res.seed = run_seed;
    res.log = train(mc, p, d.train, tc);
    res.report = evaluate(d.test, mc, p, d.has_oos);
    return res;
}

/// Every variant trained on the same data with the same run seeds.
inline std::vector<RunResult> run_ablation_suite(const ExperimentSpec& e, std::span<const Variant> variants,
                                                 std::size_t threads = thread_count()) {
    if (variants.empty()) throw ConfigError("ablation needs at least one variant");
    const auto data = make_experiment_data(e);
    std::vector<std::function<RunResult()>> jobs;
    for (Variant v : variants)
        for (std::size_t r = 0; r < e.train.n_runs; ++r)
            jobs.push_back([&e, &data, v, r] { return run_single(e, data, v, e.model.k_s, r); });
    return run_jobs(jobs, threads);
}

/// The configured variant trained once per kernel size, seeds matched across sizes.
inline std::vector<RunResult> run_kernel_sweep(const ExperimentSpec& e, std::span<const std::size_t> k_values,
                                               std::size_t threads = thread_count()) {
    if (k_values.empty()) throw ConfigError("sweep needs at least one kernel size");
    for (auto k : k_values)
        if (k < 1 || k % 2 == 0) throw BadKernelSize("kernel size " + std::to_string(k) + " must be odd");
    const auto data = make_experiment_data(e);
    std::vector<std::function<RunResult()>> jobs;
    for (auto k : k_values)
        for (std::size_t r = 0; r < e.train.n_runs; ++r)
            jobs.push_back([&e, &data, k, r] { return run_single(e, data, e.model.variant, k, r); });
    return run_jobs(jobs, threads);
}

// ---------------------------------------------------------------------------
// Results CSV

inline constexpr const char* kResultsHeader = "variant,k_s,seed,acc,wf,wp,f1,prec,rec,oid_acc,f1_is,f1_oos,oid_f1";

inline std::vector<double> metric_row(const MetricsReport& r) {
    return {r.acc,      r.weighted_f1, r.weighted_precision, r.macro_f1, r.macro_precision,
            r.macro_recall, r.oid_acc, r.f1_is,              r.f1_oos,   r.oid_f1};
}

/// One row per run, then `variant,k_s,mean,...` and `variant,k_s,std,...`
/// (sample standard deviation) per group, groups in first-appearance order.
/// OOS columns are empty when the task has no OOS class.
inline std::string results_csv(std::span<const RunResult> runs) {
    std::ostringstream o;
    o << kResultsHeader << '\n';
    auto emit = [&](const std::vector<double>& vals, bool oos) {
        for (std::size_t i = 0; i < vals.size(); ++i) {
            o << ',';
            if (i < 6 || oos) o << format_double(vals[i]);
        }
        o << '\n';
    };
    for (const auto& r : runs) {
        o << r.variant << ',' << r.k_s << ',' << r.seed;
        emit(metric_row(r.report), r.report.has_oos);
    }
    std::vector<std::pair<std::string, std::size_t>> groups;
    for (const auto& r : runs)
        if (std::find(groups.begin(), groups.end(), std::pair{r.variant, r.k_s}) == groups.end())
            groups.emplace_back(r.variant, r.k_s);
    for (const auto& [v, k] : groups) {
        std::vector<std::vector<double>> rows;
        bool oos = false;
        for (const auto& r : runs)
            if (r.variant == v && r.k_s == k) {
                rows.push_back(metric_row(r.report));
                oos = r.report.has_oos;
            }
        const std::size_t n = rows.size(), w = rows[0].size();
        std::vector<double> mean(w, 0.0), sd(w, 0.0);
        for (const auto& row : rows)
            for (std::size_t i = 0; i < w; ++i) mean[i] += row[i] / static_cast<double>(n);
        if (n > 1) {
            for (const auto& row : rows)
                for (std::size_t i = 0; i < w; ++i) sd[i] += (row[i] - mean[i]) * (row[i] - mean[i]);
            for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n - 1));
        }
        o << v << ',' << k << ",mean";
        emit(mean, oos);
        o << v << ',' << k << ",std";
        emit(sd, oos);
    }
    return o.str();
}

/// Mean of one metric over the runs of a group.
template <class F>
double group_mean(std::span<const RunResult> runs, const std::string& variant, std::size_t k_s, F metric) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : runs)
        if (r.variant == variant && r.k_s == k_s) {
            s += metric(r.report);
            ++n;
        }
    if (n == 0) throw Error("no runs for group " + variant + "/" + std::to_string(k_s));
    return s / static_cast<double>(n);
}

}  // namespace dkh
