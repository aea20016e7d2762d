// SPDX-License-Identifier: Apache-2.0
//
// rank1lab: train a tiny transformer policy on countdown arithmetic with
// verifiable rewards, and analyze how the weight updates decompose (rank-1
// extraction, singular spectra, adapter alignment).
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rank1lab/align.hpp"
#include "rank1lab/config_io.hpp"
#include "rank1lab/report.hpp"
#include "rank1lab/rlvr.hpp"

namespace fs = std::filesystem;
using namespace rank1lab;

namespace {

struct UsageFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_input(const std::string& path, const char* what) {
    if (!fs::exists(path))
        throw UsageFailure(std::string(what) + " not found: " + path);
}

nlohmann::json load_json_file(const std::string& path) {
    require_input(path, "config file");
    std::ifstream in(path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw UsageFailure("config file is not valid JSON: " + path);
    return j;
}

int env_threads() {
    if (const char* env = std::getenv("RANK1_LAB_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    int64_t size = 1000;
    uint64_t seed = 1;
    int k_min = 3, k_max = 4;
    int64_t num_min = 1, num_max = 20;
    int64_t target_min = 1, target_max = 99;
    int64_t test_size = 0;
    std::string out = "dataset.jsonl";
};

int cmd_gen_data(const GenDataArgs& args) {
    tasks::GenConfig cfg;
    cfg.seed = args.seed;
    cfg.size = args.size;
    cfg.k_min = args.k_min;
    cfg.k_max = args.k_max;
    cfg.num_min = args.num_min;
    cfg.num_max = args.num_max;
    cfg.target_min = args.target_min;
    cfg.target_max = args.target_max;
    auto ds = tasks::generate_dataset(cfg);
    tasks::save_dataset(ds, args.out);

    nlohmann::json manifest{{"size", cfg.size},
                            {"seed", cfg.seed},
                            {"k_range", {cfg.k_min, cfg.k_max}},
                            {"num_range", {cfg.num_min, cfg.num_max}},
                            {"target_range", {cfg.target_min, cfg.target_max}},
                            {"dataset", args.out},
                            {"test_size", args.test_size},
                            {"split", "last test_size instances form the test set"}};
    std::ofstream mf(args.out + ".manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    std::cout << "wrote " << ds.size() << " instances to " << args.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string mode;
    std::string algo;
    std::string out_dir;
    int steps = -1;
    int k = -1;
    int64_t seed = -1;
    int threads = -1;
    bool fp64 = false;
};

template <typename Real>
int run_training(const rlvr::RunConfig& rc) {
    rlvr::Trainer<Real> trainer(rc);
    auto result = trainer.train();
    std::cout << "completed " << result.rows.size() << " steps";
    if (!result.rows.empty())
        std::cout << "; final mean reward " << result.rows.back().mean_reward;
    if (!result.evals.empty())
        std::cout << "; last test accuracy " << result.evals.back().accuracy;
    std::cout << "\n";
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
    return 0;
}

int cmd_train(const TrainArgs& args) {
    rlvr::RunConfig rc;
    if (!args.config.empty()) rc = config::run_config_from_json(load_json_file(args.config));
    if (!args.mode.empty()) rc.mode = config::mode_from_string(args.mode);
    if (!args.algo.empty()) rc.algo.algo = config::algo_from_string(args.algo);
    if (!args.out_dir.empty()) rc.out_dir = args.out_dir;
    if (args.steps >= 0) rc.schedule.steps = args.steps;
    if (args.k >= 0) rc.algo.substitution_period = args.k;
    if (args.seed >= 0) rc.seed = static_cast<uint64_t>(args.seed);
    if (args.threads >= 0)
        rc.threads = args.threads;
    else if (rc.threads == 0)
        rc.threads = env_threads();
    if (args.fp64) rc.fp64 = true;
    rc.validate();

    fs::create_directories(rc.out_dir);
    {
        std::ofstream resolved(fs::path(rc.out_dir) / "resolved_config.json",
                               std::ios::trunc);
        resolved << config::run_config_to_json(rc).dump(2) << "\n";
    }
    return rc.fp64 ? run_training<double>(rc) : run_training<float>(rc);
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

struct SpectrumArgs {
    std::string base, tuned, out_dir = "reports";
    std::string series_dir;
    std::vector<std::string> patterns;
    bool include_embeddings = false;
    bool table = false;
    double max_ratio = 0.70;
    int top_k = 7;
    bool svg = false;
};

void emit_spectrum(const ckpt::Checkpoint& base, const ckpt::Checkpoint& tuned,
                   const SpectrumArgs& args, const std::string& tag) {
    auto patterns = args.patterns.empty()
                        ? ckpt::default_linear_patterns(args.include_embeddings)
                        : args.patterns;
    auto ds = ckpt::select_linear(ckpt::delta(base, tuned), patterns);
    auto rep = spectral::spectrum(ds);
    const fs::path dir(args.out_dir);
    report::write_spectrum_csv(rep, (dir / ("spectrum" + tag + ".csv")).string());
    report::write_spectrum_json(rep, (dir / ("spectrum" + tag + ".json")).string());
    if (args.table) {
        auto rows = spectral::sigma_ratio_table(rep, args.max_ratio, args.top_k);
        report::write_sigma_table_csv(rows,
                                      (dir / ("sigma_table" + tag + ".csv")).string());
    }
    if (args.svg) {
        for (const auto& row : rep.rows) {
            std::string safe = row.name;
            for (auto& c : safe)
                if (c == '.' || c == '/') c = '_';
            report::write_spectrum_svg(row, (dir / (safe + tag + ".svg")).string());
        }
    }
}

int cmd_spectrum(const SpectrumArgs& args) {
    require_input(args.base, "base checkpoint");
    fs::create_directories(args.out_dir);
    auto base = ckpt::load(args.base);
    if (!args.series_dir.empty()) {
        require_input(args.series_dir, "snapshot directory");
        std::vector<std::pair<int, fs::path>> snaps;
        for (const auto& entry : fs::directory_iterator(args.series_dir)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("step", 0) == 0 && name.find(".ckpt") != std::string::npos &&
                name.find("_merged") == std::string::npos) {
                const int step = std::atoi(name.c_str() + 4);
                if (step > 0) snaps.emplace_back(step, entry.path());
            }
        }
        std::sort(snaps.begin(), snaps.end());
        for (const auto& [step, path] : snaps) {
            auto tuned = ckpt::load(path.string());
            emit_spectrum(base, tuned, args, "_step" + std::to_string(step));
        }
        std::cout << "wrote " << snaps.size() << " spectrum reports to " << args.out_dir
                  << "\n";
        return 0;
    }
    require_input(args.tuned, "tuned checkpoint");
    auto tuned = ckpt::load(args.tuned);
    emit_spectrum(base, tuned, args, "");
    std::cout << "wrote spectrum reports to " << args.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// extract-rank1
// ---------------------------------------------------------------------------

struct ExtractArgs {
    std::string base, tuned, out;
    std::vector<std::string> patterns;
    bool include_embeddings = false;
    std::string others = "tuned";
    bool no_rescale = false;
};

int cmd_extract_rank1(const ExtractArgs& args) {
    require_input(args.base, "base checkpoint");
    require_input(args.tuned, "tuned checkpoint");
    if (args.others != "tuned" && args.others != "base")
        throw UsageFailure("--others must be tuned or base");
    auto base = ckpt::load(args.base);
    auto tuned = ckpt::load(args.tuned);
    spectral::BuildOptions opts;
    opts.selection = args.patterns.empty()
                         ? ckpt::default_linear_patterns(args.include_embeddings)
                         : args.patterns;
    opts.others = args.others == "tuned" ? spectral::OthersMode::Tuned
                                         : spectral::OthersMode::Base;
    opts.rescale = !args.no_rescale;
    auto out = spectral::build_rank1_model(base, tuned, opts);
    ckpt::save(out, args.out);
    std::cout << "wrote rank-1 model to " << args.out << " (degenerate layers: "
              << out.metadata.at("rank1.degenerate_count") << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

struct AlignArgs {
    std::string lora, base, tuned, out_dir = "reports";
    bool allow_higher_rank = false;
};

int cmd_align(const AlignArgs& args) {
    require_input(args.lora, "lora checkpoint");
    require_input(args.base, "base checkpoint");
    require_input(args.tuned, "tuned checkpoint");
    fs::create_directories(args.out_dir);
    auto lora_ckpt = ckpt::load(args.lora);
    auto base = ckpt::load(args.base);
    auto tuned = ckpt::load(args.tuned);
    auto params = model::restore_params<double>(lora_ckpt);
    auto adapters = model::restore_adapters<double>(lora_ckpt, params);
    auto ds = ckpt::delta(base, tuned);
    auto rows = align::align_report(adapters, ds, args.allow_higher_rank);
    report::write_alignment_csv(rows, (fs::path(args.out_dir) / "alignment.csv").string());
    report::write_alignment_json(rows, (fs::path(args.out_dir) / "alignment.json").string());
    std::cout << "wrote alignment report for " << rows.size() << " layers to " << args.out_dir
              << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, dataset, out;
    int64_t test_size = 0; // 0: evaluate the whole file
    int samples = 0;       // 0: greedy accuracy only
    std::vector<int> pass_at_k;
    double temperature = 1.0;
    double top_p = 0.95;
    int max_new_tokens = 16;
    uint64_t seed = 1;
    int threads = -1;
};

template <typename Real>
nlohmann::json eval_model(const ckpt::Checkpoint& c, const EvalArgs& args,
                          const std::vector<tasks::CountdownInstance>& split) {
    auto params = model::restore_params<Real>(c);
    std::unique_ptr<model::LoraAdapter<Real>> adapters;
    if (c.metadata.count("lora_r")) {
        adapters = std::make_unique<model::LoraAdapter<Real>>(
            model::restore_adapters<Real>(c, params));
    }
    const int threads = args.threads >= 0 ? args.threads : env_threads();
    const int n = static_cast<int>(split.size());

    std::vector<int> greedy_correct(n, 0);
    std::vector<int> sample_correct(n, 0);
    rlvr::parallel_for(n, threads, [&](int i) {
        model::Tape<Real> scratch;
        auto prompt = tasks::render_prompt(split[i]);
        model::SampleConfig sc;
        sc.greedy = true;
        sc.max_new_tokens = args.max_new_tokens;
        sc.eos_id = tasks::codec::EOS;
        auto rng = RngStream::from(args.seed, {0x67ULL, static_cast<uint64_t>(i)});
        auto g = model::sample<Real>(params, adapters.get(), prompt, sc, rng, scratch);
        greedy_correct[i] = tasks::verify(split[i], g.tokens) ? 1 : 0;
        if (args.samples > 0) {
            model::SampleConfig ssc;
            ssc.greedy = false;
            ssc.temperature = args.temperature;
            ssc.top_p = args.top_p;
            ssc.max_new_tokens = args.max_new_tokens;
            ssc.eos_id = tasks::codec::EOS;
            for (int s = 0; s < args.samples; ++s) {
                auto srng = RngStream::from(
                    args.seed, {0x73ULL, static_cast<uint64_t>(i), static_cast<uint64_t>(s)});
                auto r = model::sample<Real>(params, adapters.get(), prompt, ssc, srng, scratch);
                sample_correct[i] += tasks::verify(split[i], r.tokens) ? 1 : 0;
            }
        }
    });

    int64_t c_greedy = 0;
    for (int v : greedy_correct) c_greedy += v;
    nlohmann::json out{{"n", n},
                       {"c", c_greedy},
                       {"accuracy", n > 0 ? static_cast<double>(c_greedy) / n : 0.0}};
    if (args.samples > 0 && !args.pass_at_k.empty()) {
        nlohmann::json pk = nlohmann::json::object();
        for (int k : args.pass_at_k) {
            if (k < 1 || k > args.samples)
                throw UsageFailure("pass@k needs 1 <= k <= samples");
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
                acc += tasks::pass_at_k(args.samples, sample_correct[i], k);
            pk["pass@" + std::to_string(k)] = n > 0 ? acc / n : 0.0;
        }
        out["samples_per_instance"] = args.samples;
        out["pass_at_k"] = pk;
    }
    return out;
}

int cmd_eval(const EvalArgs& args) {
    require_input(args.ckpt, "checkpoint");
    require_input(args.dataset, "dataset");
    auto c = ckpt::load(args.ckpt);
    auto ds = tasks::load_dataset(args.dataset);
    std::vector<tasks::CountdownInstance> split = ds;
    if (args.test_size > 0) split = tasks::split(ds, args.test_size).second;

    bool any_f64 = false;
    for (const auto& [name, t] : c.tensors)
        if (t.dtype == ckpt::Dtype::F64) any_f64 = true;
    nlohmann::json out = any_f64 ? eval_model<double>(c, args, split)
                                 : eval_model<float>(c, args, split);
    const std::string payload = out.dump(2) + "\n";
    if (args.out.empty()) {
        std::cout << payload;
    } else {
        std::ofstream f(args.out, std::ios::trunc);
        f << payload;
        std::cout << "wrote eval report to " << args.out << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for rank-1 analysis of RL weight updates"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* cgen = app.add_subcommand("gen-data", "generate a countdown dataset (jsonl)");
    cgen->add_option("--size", gen.size, "number of instances")->check(CLI::PositiveNumber);
    cgen->add_option("--seed", gen.seed, "generation seed");
    cgen->add_option("--k-min", gen.k_min, "min numbers per instance");
    cgen->add_option("--k-max", gen.k_max, "max numbers per instance");
    cgen->add_option("--num-min", gen.num_min, "smallest operand");
    cgen->add_option("--num-max", gen.num_max, "largest operand");
    cgen->add_option("--target-min", gen.target_min, "smallest target");
    cgen->add_option("--target-max", gen.target_max, "largest target");
    cgen->add_option("--test-size", gen.test_size, "held-out tail recorded in the manifest");
    cgen->add_option("--out", gen.out, "output jsonl path");

    TrainArgs train;
    auto* ctrain = app.add_subcommand("train", "run RL training with telemetry");
    ctrain->add_option("--config", train.config, "run config json");
    ctrain->add_option("--mode", train.mode, "full | periodic-rank1 | lora");
    ctrain->add_option("--algo", train.algo, "grpo | dapo | gspo");
    ctrain->add_option("--out", train.out_dir, "output directory");
    ctrain->add_option("--steps", train.steps, "training steps");
    ctrain->add_option("--k", train.k, "substitution period (periodic-rank1)");
    ctrain->add_option("--seed", train.seed, "master seed");
    ctrain->add_option("--threads", train.threads, "worker cap (env RANK1_LAB_THREADS)");
    ctrain->add_flag("--fp64", train.fp64, "64-bit training arithmetic");

    SpectrumArgs spec;
    auto* cspec = app.add_subcommand("spectrum", "singular spectra of checkpoint deltas");
    cspec->add_option("--base", spec.base, "base checkpoint")->required();
    cspec->add_option("--tuned", spec.tuned, "tuned checkpoint");
    cspec->add_option("--series-dir", spec.series_dir, "directory of stepN.ckpt snapshots");
    cspec->add_option("--out", spec.out_dir, "report directory");
    cspec->add_option("--patterns", spec.patterns, "layer glob patterns");
    cspec->add_flag("--include-embeddings", spec.include_embeddings,
                    "also select embedding/head matrices");
    cspec->add_flag("--table", spec.table, "emit the sigma-ratio table");
    cspec->add_option("--max-ratio", spec.max_ratio, "sigma2/sigma1 table threshold");
    cspec->add_option("--top-k", spec.top_k, "values per table row");
    cspec->add_flag("--svg", spec.svg, "per-layer spectrum plots");

    ExtractArgs extract;
    auto* cext = app.add_subcommand("extract-rank1", "build a rank-1 model checkpoint");
    cext->add_option("--base", extract.base, "base checkpoint")->required();
    cext->add_option("--tuned", extract.tuned, "tuned checkpoint")->required();
    cext->add_option("--out", extract.out, "output checkpoint")->required();
    cext->add_option("--patterns", extract.patterns, "layer glob patterns");
    cext->add_flag("--include-embeddings", extract.include_embeddings,
                   "also select embedding/head matrices");
    cext->add_option("--others", extract.others, "non-selected parameters: tuned | base");
    cext->add_flag("--no-rescale", extract.no_rescale, "skip the frobenius rescale");

    AlignArgs al;
    auto* calign = app.add_subcommand("align", "adapter vs rank-1 subspace alignment");
    calign->add_option("--lora", al.lora, "checkpoint with lora factors")->required();
    calign->add_option("--base", al.base, "full-run base checkpoint")->required();
    calign->add_option("--tuned", al.tuned, "full-run tuned checkpoint")->required();
    calign->add_option("--out", al.out_dir, "report directory");
    calign->add_flag("--allow-higher-rank", al.allow_higher_rank,
                     "angles via canonical correlations for r > 1");

    EvalArgs ev;
    auto* ceval = app.add_subcommand("eval", "accuracy and pass@k of a checkpoint");
    ceval->add_option("--ckpt", ev.ckpt, "model checkpoint")->required();
    ceval->add_option("--dataset", ev.dataset, "jsonl dataset")->required();
    ceval->add_option("--test-size", ev.test_size, "evaluate only the last N instances");
    ceval->add_option("--samples", ev.samples, "samples per instance for pass@k");
    ceval->add_option("--pass-at-k", ev.pass_at_k, "k values, needs --samples");
    ceval->add_option("--temperature", ev.temperature, "sampling temperature");
    ceval->add_option("--top-p", ev.top_p, "nucleus mass");
    ceval->add_option("--max-new-tokens", ev.max_new_tokens, "generation cap");
    ceval->add_option("--seed", ev.seed, "sampling seed");
    ceval->add_option("--threads", ev.threads, "worker cap");
    ceval->add_option("--out", ev.out, "write the json report here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        if (cgen->parsed()) return cmd_gen_data(gen);
        if (ctrain->parsed()) return cmd_train(train);
        if (cspec->parsed()) return cmd_spectrum(spec);
        if (cext->parsed()) return cmd_extract_rank1(extract);
        if (calign->parsed()) return cmd_align(al);
        if (ceval->parsed()) return cmd_eval(ev);
    } catch (const UsageFailure& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DomainError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
