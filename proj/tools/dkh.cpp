// SPDX-License-Identifier: Apache-2.0
//
// dkh: command-line front end for data generation, training, evaluation,
// ablation/kernel sweeps and gradient checks.
//
// Exit codes: 0 ok, 1 check failed, 2 config error, 3 IO error, 4 checkpoint
// version mismatch.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "dykenhyena/gradcheck_suite.hpp"
#include "dykenhyena/train.hpp"

namespace fs = std::filesystem;
using namespace dkh;

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3, kVersionError = 4 };

struct Options {
    std::string config, data, out, checkpoint, variant, k;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

std::string sha256_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read '" + path + "' for checksum");
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (f.read(buf, sizeof buf) || f.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(f.gcount()));
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    EVP_DigestFinal_ex(ctx, md, &n);
    EVP_MD_CTX_free(ctx);
    std::ostringstream o;
    for (unsigned int i = 0; i < n; ++i) o << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return o.str();
}

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Writes `text` to `path` through a temporary file and a rename, so readers
/// never observe a partial file.
void write_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot write '" + tmp + "'");
        f << text;
        if (!f.flush()) throw IoError("write failed for '" + tmp + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << text;
    if (!f.flush()) throw IoError("write failed for '" + path + "'");
}

class Manifest {
public:
    Manifest(std::string command, const Config& cfg) : started_(utc_now()) {
        j_["command"] = std::move(command);
        j_["config"] = cfg.canonical();
        j_["inputs"] = nlohmann::json::object();
        j_["outputs"] = nlohmann::json::object();
        j_["seeds"] = nlohmann::json::object();
    }
    void input(const std::string& path) { j_["inputs"][path] = sha256_file(path); }
    void output(const std::string& path) { j_["outputs"][path] = sha256_file(path); }
    void seed(const std::string& name, std::uint64_t v) { j_["seeds"][name] = v; }
    void write(const std::string& path) {
        j_["started"] = started_;
        j_["finished"] = utc_now();
        write_atomic(path, j_.dump(2) + "\n");
    }

private:
    nlohmann::json j_;
    std::string started_;
};

/// A config file, or a manifest (JSON with a "config" member) to rerun from.
Config load_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string text = ss.str();
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        try {
            return Config::parse(nlohmann::json::parse(text).at("config").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("'" + path + "' is not a run manifest: " + e.what());
        }
    }
    return Config::parse(text);
}

void ensure_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

Dataset load_data(const std::string& path) {
    if (path.empty()) throw ConfigError("--data is required");
    return load_jsonl(path);
}

bool dataset_has_oos(const Dataset& d) {
    if (d.meta) return d.meta->has_oos;
    for (const auto& s : d.samples)
        if (s.is_oos) return true;
    return false;
}

/// Model dimensions taken from the data (meta header, else the samples).
ModelConfig model_for_dataset(ModelConfig m, const Dataset& d) {
    if (d.samples.empty()) throw EmptyDataset("dataset has no samples");
    std::size_t vocab = 0, len = 0;
    int max_label = 0;
    for (const auto& s : d.samples) {
        for (int t : s.tokens) vocab = std::max(vocab, static_cast<std::size_t>(t) + 1);
        len = std::max(len, s.tokens.size());
        max_label = std::max(max_label, s.label);
    }
    m.vocab_size = d.meta && d.meta->vocab_size ? std::max(d.meta->vocab_size, vocab) : vocab;
    m.n_classes = d.meta && d.meta->n_classes ? d.meta->n_classes : static_cast<std::size_t>(max_label) + 1;
    m.d_audio = d.samples[0].audio.shape[1];
    m.d_visual = d.samples[0].visual.shape[1];
    m.max_len = std::max(m.max_len, len + 1);
    return m;
}

std::string report_table(const MetricsReport& r) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(4);
    auto row = [&](const char* k, double v) { o << "  " << std::left << std::setw(10) << k << v << '\n'; };
    row("acc", r.acc);
    row("wf", r.weighted_f1);
    row("wp", r.weighted_precision);
    row("f1", r.macro_f1);
    row("prec", r.macro_precision);
    row("rec", r.macro_recall);
    if (r.has_oos) {
        row("oid_acc", r.oid_acc);
        row("f1_is", r.f1_is);
        row("f1_oos", r.f1_oos);
        row("oid_f1", r.oid_f1);
    }
    o << "  confusion (rows = true class)\n";
    for (const auto& cr : r.confusion) {
        o << "   ";
        for (auto v : cr) o << ' ' << std::right << std::setw(5) << v;
        o << '\n';
    }
    return o.str();
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const Options& o) {
    Config cfg = load_config(o.config);
    if (o.seed) cfg.set("gradcheck.seed", std::to_string(*o.seed));
    const double h = cfg.get_double("gradcheck.h", 1e-5);
    const double tol = cfg.get_double("gradcheck.tolerance", 1e-4);
    const std::uint64_t seed = cfg.get_u64("gradcheck.seed", 0);
    ModelGradSpec ms;
    ms.text_len = cfg.get_size("gradcheck.text_len", ms.text_len);
    ms.d_text = cfg.get_size("gradcheck.d_text", ms.d_text);
    ms.n_heads = cfg.get_size("gradcheck.n_heads", ms.n_heads);
    ms.k_s = cfg.get_size("gradcheck.k_s", ms.k_s);
    ms.n_encoder_layers = cfg.get_size("gradcheck.n_encoder_layers", ms.n_encoder_layers);
    if (!(h > 0.0)) throw ConfigError("gradcheck.h must be positive");
    if (ms.k_s % 2 == 0) throw ConfigError("gradcheck.k_s must be odd");
    if (ms.n_heads == 0 || ms.d_text % ms.n_heads) throw ConfigError("gradcheck.n_heads must divide d_text");

    auto cases = all_grad_cases(seed, ms);
    bool ok = true;
    std::ostringstream table;
    table << std::left << std::setw(32) << "case" << std::setw(10) << "checked" << std::setw(14) << "max_rel_err"
          << "status  worst\n";
    for (auto& c : cases) {
        const auto r = run_grad_case(c, h, tol);
        ok = ok && r.report.passed;
        table << std::left << std::setw(32) << r.name << std::setw(10) << r.report.n_checked << std::setw(14)
              << std::scientific << std::setprecision(3) << r.report.max_rel_error << std::defaultfloat
              << (r.report.passed ? "ok      " : "FAIL    ") << r.report.worst << '\n';
    }
    if (!o.quiet) std::cout << table.str();
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << tol << ", h " << h << ")\n";
    if (!o.out.empty()) {
        ensure_dir(o.out);
        const std::string rep = join(o.out, "gradcheck.txt");
        write_text(rep, table.str());
        Manifest m("gradcheck", cfg);
        m.seed("gradcheck.seed", seed);
        m.output(rep);
        m.write(join(o.out, "gradcheck.manifest.json"));
    }
    return ok ? kOk : kCheckFailed;
}

int cmd_gen_data(const Options& o) {
    Config cfg = load_config(o.config);
    if (o.seed) cfg.set("data.seed", std::to_string(*o.seed));
    const SynthSpec spec = SynthSpec::from_config(cfg);
    spec.validate();
    if (o.out.empty()) throw ConfigError("--out <file.jsonl> is required");
    Config resolved;
    spec.to_config(resolved);
    const fs::path out(o.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path().string());
    write_jsonl(o.out, Dataset{meta_for(spec), generate(spec)});
    Manifest m("gen-data", resolved);
    m.seed("data.seed", spec.seed);
    m.output(o.out);
    m.write(o.out + ".manifest.json");
    if (!o.quiet) std::cout << "wrote " << spec.n_samples << " samples to " << o.out << '\n';
    return kOk;
}

int cmd_train(const Options& o) {
    Config cfg = load_config(o.config);
    if (o.seed) {
        cfg.set("model.seed", std::to_string(*o.seed));
        cfg.set("train.shuffle_seed", std::to_string(*o.seed));
    }
    if (!o.variant.empty()) cfg.set("model.variant", o.variant);
    const Dataset data = load_data(o.data);
    ModelConfig mc = model_for_dataset(ModelConfig::from_config(cfg), data);
    mc.validate();
    const TrainConfig tc = TrainConfig::from_config(cfg);
    ensure_dir(o.out);

    Config resolved = mc.to_config();
    tc.to_config(resolved);
    ModelParams p = ModelParams::init(mc);
    const TrainLog log = train(mc, p, data.samples, tc);

    const std::string ckpt = join(o.out, "model.ckpt"), log_path = join(o.out, "train_log.jsonl");
    save_checkpoint(ckpt, mc, p);
    write_text(log_path, log_jsonl(log));
    Manifest m("train", resolved);
    m.input(o.data);
    m.seed("model.seed", mc.seed);
    m.seed("train.shuffle_seed", tc.shuffle_seed);
    m.output(ckpt);
    m.output(log_path);
    m.write(join(o.out, "train.manifest.json"));
    if (!o.quiet)
        for (const auto& e : log.epochs)
            std::cout << "epoch " << e.epoch << "  loss " << format_double(e.mean_loss) << '\n';
    return kOk;
}

int cmd_eval(const Options& o) {
    const Config cfg = load_config(o.config);
    std::string ckpt = o.checkpoint.empty() ? cfg.get_string("eval.checkpoint", "") : o.checkpoint;
    if (ckpt.empty()) {
        if (o.out.empty()) throw ConfigError("eval needs --checkpoint, eval.checkpoint or --out holding model.ckpt");
        ckpt = join(o.out, "model.ckpt");
    }
    const Dataset data = load_data(o.data);
    Checkpoint ck = load_checkpoint(ckpt);
    const bool has_oos = dataset_has_oos(data);
    const MetricsReport r = evaluate(data.samples, ck.config, ck.params, has_oos);

    RunResult rr;
    rr.variant = to_string(ck.config.variant);
    rr.k_s = ck.config.k_s;
    rr.seed = ck.config.seed;
    rr.report = r;
    const std::vector<RunResult> one{rr};
    std::string csv = results_csv(one);
    csv = csv.substr(0, csv.find('\n', csv.find('\n') + 1) + 1);  // header + the run row
    std::cout << "variant " << rr.variant << ", k_s " << rr.k_s << ", " << data.samples.size() << " samples\n"
              << report_table(r) << csv;
    if (!o.out.empty()) {
        ensure_dir(o.out);
        const std::string csv_path = join(o.out, "eval.csv"), txt = join(o.out, "eval.txt");
        write_text(csv_path, csv);
        write_text(txt, report_table(r));
        Manifest m("eval", ck.config.to_config());
        m.input(o.data);
        m.input(ckpt);
        m.seed("model.seed", ck.config.seed);
        m.output(csv_path);
        m.output(txt);
        m.write(join(o.out, "eval.manifest.json"));
    }
    return kOk;
}

/// Train/test data for ablate and sweep: `--data train.jsonl,test.jsonl`, or
/// synthesised from the data.* keys when --data is absent.
struct ExperimentInput {
    ExperimentSpec spec;
    std::optional<ExperimentData> data;
    std::vector<std::string> files;
};

ExperimentInput experiment_input(Config& cfg, const Options& o) {
    if (o.seed) cfg.set("experiment.seed", std::to_string(*o.seed));
    ExperimentInput in;
    in.spec = ExperimentSpec::from_config(cfg);
    if (!o.data.empty()) {
        in.files = Config::split_list(o.data);
        if (in.files.size() != 2) throw ConfigError("--data expects train.jsonl,test.jsonl");
        const Dataset tr = load_jsonl(in.files[0]), te = load_jsonl(in.files[1]);
        in.spec.model = model_for_dataset(in.spec.model, tr);
        in.data = ExperimentData{tr.samples, te.samples, dataset_has_oos(tr) || dataset_has_oos(te)};
    } else {
        in.spec.data.validate();
        in.spec.model = model_for_data(in.spec.model, in.spec.data);
    }
    in.spec.model.validate();
    return in;
}

std::vector<RunResult> run_experiment(const ExperimentInput& in, const std::vector<Variant>& variants,
                                      const std::vector<std::size_t>& ks) {
    const ExperimentData data = in.data ? *in.data : make_experiment_data(in.spec);
    std::vector<std::function<RunResult()>> jobs;
    const auto& e = in.spec;
    for (Variant v : variants)
        for (std::size_t k : ks)
            for (std::size_t r = 0; r < e.train.n_runs; ++r)
                jobs.push_back([&e, &data, v, k, r] { return run_single(e, data, v, k, r); });
    return run_jobs(jobs, thread_count());
}

int finish_experiment(const char* name, const Config& resolved, const ExperimentInput& in,
                      const std::vector<RunResult>& runs, const Options& o) {
    ensure_dir(o.out);
    const std::string csv_path = join(o.out, "results.csv");
    const std::string csv = results_csv(runs);
    write_text(csv_path, csv);
    Manifest m(name, resolved);
    for (const auto& f : in.files) m.input(f);
    m.seed("experiment.seed", in.spec.seed);
    m.seed("data.seed", in.spec.data.seed);
    for (std::size_t r = 0; r < in.spec.train.n_runs; ++r)
        m.seed("run." + std::to_string(r), derive_seed(in.spec.seed, r));
    m.output(csv_path);
    m.write(join(o.out, std::string(name) + ".manifest.json"));
    if (!o.quiet) std::cout << csv;
    return kOk;
}

int cmd_ablate(const Options& o) {
    Config cfg = load_config(o.config);
    std::string list = o.variant.empty() ? cfg.get_string("ablate.variants", "") : o.variant;
    if (list.empty()) list = "full,no_attention,no_dynamic_short_conv,no_long_conv";
    cfg.set("ablate.variants", list);
    std::vector<Variant> variants;
    for (const auto& s : Config::split_list(list)) variants.push_back(parse_variant(s));
    if (variants.empty()) throw ConfigError("no variants to ablate");
    ExperimentInput in = experiment_input(cfg, o);
    Config resolved = in.spec.to_config();
    resolved.set("ablate.variants", list);
    const auto runs = run_experiment(in, variants, {in.spec.model.k_s});
    return finish_experiment("ablate", resolved, in, runs, o);
}

int cmd_sweep(const Options& o) {
    Config cfg = load_config(o.config);
    std::string list = o.k.empty() ? cfg.get_string("sweep.k", "1,3,5") : o.k;
    if (!o.variant.empty()) cfg.set("model.variant", o.variant);
    std::vector<std::size_t> ks;
    for (const auto& s : Config::split_list(list)) {
        Config tmp;
        tmp.set("k", s);
        const auto k = tmp.get_size("k", 0);
        if (k < 1 || k % 2 == 0) throw BadKernelSize("kernel size " + s + " must be odd");
        ks.push_back(k);
    }
    if (ks.empty()) throw ConfigError("no kernel sizes to sweep");
    cfg.set("sweep.k", list);
    ExperimentInput in = experiment_input(cfg, o);
    Config resolved = in.spec.to_config();
    resolved.set("sweep.k", list);
    const std::vector<Variant> v{in.spec.model.variant};
    const auto runs = run_experiment(in, v, ks);
    return finish_experiment("sweep", resolved, in, runs, o);
}

int guarded(const std::function<int()>& f) {
    try {
        return f();
    } catch (const VersionMismatch& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kVersionError;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const BadSpec& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const BadKernelSize& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIoError;
    } catch (const LineError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIoError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dkh - multimodal fusion with dynamic kernels and long convolutions"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;

    auto common = [&](CLI::App* s) {
        s->add_option("--config", o.config, "key=value config file or a run manifest");
        s->add_option("--out", o.out, "output directory (gen-data: output file)");
        s->add_option("--seed", seed, "seed override")->each([&](const std::string&) { o.seed = seed; });
        s->add_flag("--quiet", o.quiet, "print less");
    };
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every operator and the model");
    common(gc);
    auto* gd = app.add_subcommand("gen-data", "write a synthetic JSON Lines dataset");
    common(gd);
    auto* tr = app.add_subcommand("train", "train a model and write a checkpoint and log");
    common(tr);
    tr->add_option("--data", o.data, "training set (JSON Lines)");
    tr->add_option("--variant", o.variant, "model variant");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    common(ev);
    ev->add_option("--data", o.data, "evaluation set (JSON Lines)");
    ev->add_option("--checkpoint", o.checkpoint, "checkpoint (default <out>/model.ckpt)");
    auto* ab = app.add_subcommand("ablate", "train and compare variants");
    common(ab);
    ab->add_option("--data", o.data, "train.jsonl,test.jsonl (default: synthesise from data.*)");
    ab->add_option("--variant", o.variant, "comma list of variants");
    auto* sw = app.add_subcommand("sweep", "train one variant per kernel size");
    common(sw);
    sw->add_option("--data", o.data, "train.jsonl,test.jsonl (default: synthesise from data.*)");
    sw->add_option("--variant", o.variant, "model variant");
    sw->add_option("--k", o.k, "comma list of odd kernel sizes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }
    if (*gc) return guarded([&] { return cmd_gradcheck(o); });
    if (*gd) return guarded([&] { return cmd_gen_data(o); });
    if (*tr) return guarded([&] { return cmd_train(o); });
    if (*ev) return guarded([&] { return cmd_eval(o); });
    if (*ab) return guarded([&] { return cmd_ablate(o); });
    if (*sw) return guarded([&] { return cmd_sweep(o); });
    return kConfigError;
}
