// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: every criterion below prints one PASS/FAIL line with the
// measured quantity and its pinned tolerance. The binary exits nonzero if
// any criterion fails.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "loss_oracle.hpp"
#include "oracles.hpp"
#include "rank1lab/align.hpp"
#include "rank1lab/config_io.hpp"
#include "rank1lab/rlvr.hpp"

using namespace rank1lab;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] %-34s %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path out_root() {
    auto p = fs::temp_directory_path() / "rank1lab_acceptance";
    fs::create_directories(p);
    return p;
}

// ---------------------------------------------------------------------------
// svd oracle suite: 200 seeded matrices, shapes up to 512x512
// ---------------------------------------------------------------------------

void criterion_svd_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_recon = 0.0, worst_orth = 0.0, worst_sv = 0.0;
    bool ok = true;
    auto shape_rng = RngStream::from(2024, {0});
    for (int trial = 0; trial < 200; ++trial) {
        int m, n;
        if (trial == 0) {
            m = n = 512; // pin the largest shape
        } else if (trial == 1) {
            m = 512;
            n = 333;
        } else {
            // log-uniform sizes in [1, 512]
            m = std::max<int>(1, static_cast<int>(std::exp(shape_rng.uniform() * std::log(512.0))));
            n = std::max<int>(1, static_cast<int>(std::exp(shape_rng.uniform() * std::log(512.0))));
        }
        auto rng = RngStream::from(77, {static_cast<uint64_t>(trial)});
        linalg::Matrix a(m, n);
        for (auto& v : a.data()) v = rng.normal();
        // a few rank-deficient inputs
        if (trial % 13 == 5) {
            const int r = std::max(1, std::min(m, n) / 3);
            linalg::Matrix u(m, r), w(r, n);
            for (auto& v : u.data()) v = rng.normal();
            for (auto& v : w.data()) v = rng.normal();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int k = 0; k < r; ++k) acc += u.at(i, k) * w.at(k, j);
                    a.at(i, j) = acc;
                }
        }

        auto r = linalg::svd(a);
        const double fro = linalg::frobenius_norm(a);
        const int k = static_cast<int>(r.s.size());

        double recon = 0.0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int c = 0; c < k; ++c) acc += r.u.at(i, c) * r.s[c] * r.v.at(j, c);
                const double d = acc - a.at(i, j);
                recon += d * d;
            }
        recon = std::sqrt(recon) / std::max(fro, 1e-300);
        worst_recon = std::max(worst_recon, recon);

        auto orth = [&](const linalg::Matrix& q) {
            double worst = 0.0;
            for (int x = 0; x < q.cols(); ++x)
                for (int y = x; y < q.cols(); ++y) {
                    double acc = 0.0;
                    for (int i = 0; i < q.rows(); ++i) acc += q.at(i, x) * q.at(i, y);
                    worst = std::max(worst, std::abs(acc - (x == y ? 1.0 : 0.0)));
                }
            return worst;
        };
        worst_orth = std::max({worst_orth, orth(r.u), orth(r.v)});

        // compare in the eigenvalue domain: sigma_i^2 vs eig_i(M^T M). Values
        // resolvable above the eigensolver's own O(n eps ev0) noise floor are
        // held to the relative tolerance; every value (including the null
        // space of rank-deficient inputs, where both algorithms return pure
        // rounding noise) is held to the same tolerance scaled by the top of
        // the spectrum.
        auto ev = oracles::symmetric_eigenvalues(oracles::gram(a.data(), m, n), n);
        const double ev0 = std::max(ev.empty() ? 0.0 : ev[0], 1e-300);
        for (int i = 0; i < k; ++i) {
            const double err = std::abs(r.s[i] * r.s[i] - ev[i]);
            if (ev[i] > 1e-6 * ev0) worst_sv = std::max(worst_sv, err / ev[i]);
            worst_sv = std::max(worst_sv, err / ev0);
        }
        if (worst_recon > 1e-8 || worst_orth > 1e-8 || worst_sv > 1e-8) ok = false;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "200 matrices <=512x512: recon %.2e orth %.2e sv-vs-eig %.2e (tol 1e-8), %.0fs "
                  "(target <120s)",
                  worst_recon, worst_orth, worst_sv, secs);
    report("svd-oracle-suite", ok && secs < 120.0, buf);
}

// ---------------------------------------------------------------------------
// toy runs shared by several criteria
// ---------------------------------------------------------------------------

rlvr::RunConfig protocol_config(const fs::path& out, uint64_t seed, rlvr::TrainMode mode) {
    rlvr::RunConfig rc;
    rc.task.gen.seed = 7;
    rc.task.gen.size = 512;
    rc.task.gen.k_min = 2;
    rc.task.gen.k_max = 2;
    rc.task.gen.num_min = 1;
    rc.task.gen.num_max = 2;
    rc.task.gen.target_min = 1;
    rc.task.gen.target_max = 4;
    rc.task.test_size = 64;
    rc.task.reward.format_bonus = 0.25;
    rc.model.vocab_size = 24;
    rc.model.d_model = 64;
    rc.model.n_layers = 2;
    rc.model.n_heads = 4;
    rc.model.d_ff = 128;
    rc.model.max_seq_len = 24;
    rc.algo.algo = rlvr::Algo::GRPO;
    rc.algo.group_size = 8;
    rc.algo.lr = 5e-4; // the reference 5e-6 scaled x100 for toy dimensions
    rc.algo.max_new_tokens = 4;
    rc.algo.temperature = 1.2;
    rc.algo.top_p = 1.0;
    rc.algo.substitution_period = 10;
    rc.schedule.steps = 300;
    rc.schedule.eval_interval = 50;
    rc.schedule.snapshot_interval = 50;
    rc.schedule.batch_prompts = 32;
    rc.mode = mode;
    rc.out_dir = out.string();
    rc.run_id = (mode == rlvr::TrainMode::Full ? "full-s" : "p1-s") + std::to_string(seed);
    rc.seed = seed;
    rc.threads = 2;
    return rc;
}

struct ProtocolRun {
    rlvr::TrainResult result;
    fs::path dir;
};

std::map<std::string, ProtocolRun> g_runs; // "full-1", "p1-1", ...

void run_protocol_matrix() {
    for (uint64_t seed : {1, 2, 3}) {
        for (auto mode : {rlvr::TrainMode::Full, rlvr::TrainMode::PeriodicRank1}) {
            const std::string key =
                (mode == rlvr::TrainMode::Full ? "full-" : "p1-") + std::to_string(seed);
            const fs::path dir = out_root() / ("proto_" + key);
            fs::remove_all(dir);
            auto rc = protocol_config(dir, seed, mode);
            rlvr::Trainer<float> trainer(rc);
            g_runs[key] = ProtocolRun{trainer.train(), dir};
        }
    }
}

double trailing_mean(const std::vector<rlvr::TelemetryRow>& rows, int upto_step, int window) {
    double acc = 0.0;
    int count = 0;
    for (const auto& r : rows)
        if (r.step > upto_step - window && r.step <= upto_step) {
            acc += r.mean_reward;
            ++count;
        }
    return count > 0 ? acc / count : 0.0;
}

void criterion_toy_protocol(double matrix_seconds) {
    // (a) reward improvement per seed on the full runs: trailing-25 mean at
    // step 300 vs the first rollout batch (the untrained policy)
    bool ok_a = true;
    std::string detail_a;
    for (uint64_t seed : {1, 2, 3}) {
        const auto& rows = g_runs.at("full-" + std::to_string(seed)).result.rows;
        const double start = rows.front().mean_reward;
        const double end = trailing_mean(rows, 300, 25);
        char buf[64];
        std::snprintf(buf, sizeof(buf), " s%llu:%+.3f", static_cast<unsigned long long>(seed),
                      end - start);
        detail_a += buf;
        if (end - start < 0.1) ok_a = false;
    }
    report("toy-protocol-a-reward-gain", ok_a,
           "full-run trailing-25 mean(step300) - step1 batch >= 0.1:" + detail_a);

    // (b) seed-averaged trailing-25 curves: periodic-rank1 <= full at every
    // matched step. Before the first eval milestone both curves sit near zero
    // (they share rollout seeds until the first substitution at step 10), so
    // a noise floor of 1e-3 -- one standard error of the seed-averaged
    // windowed batch-reward estimator -- applies there; from step 50 on the
    // comparison is strict.
    bool ok_b = true;
    int worst_step = 0;
    double worst_gap = -1.0;
    double gap_at_300 = 0.0;
    for (int step = 1; step <= 300; ++step) {
        double full = 0.0, periodic = 0.0;
        for (uint64_t seed : {1, 2, 3}) {
            full += trailing_mean(g_runs.at("full-" + std::to_string(seed)).result.rows, step, 25);
            periodic +=
                trailing_mean(g_runs.at("p1-" + std::to_string(seed)).result.rows, step, 25);
        }
        full /= 3.0;
        periodic /= 3.0;
        const double allow = step < 50 ? 1e-3 : 0.0;
        if (periodic > full + allow) {
            ok_b = false;
            if (periodic - full > worst_gap) {
                worst_gap = periodic - full;
                worst_step = step;
            }
        }
        if (step == 300) gap_at_300 = full - periodic;
    }
    char buf_b[192];
    if (ok_b)
        std::snprintf(buf_b, sizeof(buf_b),
                      "periodic <= full at matched steps (strict from step 50); full leads by "
                      "%.3f at step 300",
                      gap_at_300);
    else
        std::snprintf(buf_b, sizeof(buf_b), "violated at step %d by %.4f (seed-averaged)",
                      worst_step, worst_gap);
    report("toy-protocol-b-substitution-lag", ok_b, buf_b);

    // (c) side-by-side test accuracy, reported not asserted
    std::printf("       test accuracy (greedy, n=64) per eval step:\n");
    std::printf("       %8s %28s %28s\n", "step", "full s1/s2/s3", "periodic-rank1 s1/s2/s3");
    for (size_t e = 0; e < g_runs.at("full-1").result.evals.size(); ++e) {
        const int step = g_runs.at("full-1").result.evals[e].step;
        char line[160];
        std::snprintf(line, sizeof(line), "       %8d %10.3f/%.3f/%.3f %20.3f/%.3f/%.3f\n",
                      step, g_runs.at("full-1").result.evals[e].accuracy,
                      g_runs.at("full-2").result.evals[e].accuracy,
                      g_runs.at("full-3").result.evals[e].accuracy,
                      g_runs.at("p1-1").result.evals[e].accuracy,
                      g_runs.at("p1-2").result.evals[e].accuracy,
                      g_runs.at("p1-3").result.evals[e].accuracy);
        std::fputs(line, stdout);
    }
    char buf_c[128];
    std::snprintf(buf_c, sizeof(buf_c),
                  "6 runs x 300 steps in %.0fs (target <1800s); accuracies reported above",
                  matrix_seconds);
    report("toy-protocol-c-report", matrix_seconds < 1800.0, buf_c);
}

// ---------------------------------------------------------------------------
// rank-1 extraction invariants over every snapshot of a toy run
// ---------------------------------------------------------------------------

void criterion_rank1_extraction() {
    const auto& run = g_runs.at("full-1");
    auto base = ckpt::load((run.dir / "snapshots" / "step0.ckpt").string());
    double worst_norm = 0.0, worst_ratio = 0.0;
    int layers = 0;
    bool ok = true;
    for (const auto& entry : fs::directory_iterator(run.dir / "snapshots")) {
        const std::string name = entry.path().filename().string();
        if (name == "step0.ckpt" || name.find(".ckpt") == std::string::npos) continue;
        auto snap = ckpt::load(entry.path().string());
        auto ds = ckpt::select_linear(ckpt::delta(base, snap), ckpt::default_linear_patterns());
        for (const auto& [lname, tensor] : ds.entries) {
            const auto dw = tensor.to_matrix();
            if (linalg::frobenius_norm(dw) == 0.0) continue;
            auto r1 = spectral::extract_rank1(dw);
            auto mat = r1.materialize(true);
            const double nr = linalg::frobenius_norm(mat) / linalg::frobenius_norm(dw);
            worst_norm = std::max(worst_norm, std::abs(nr - 1.0));
            auto sv = linalg::svd(mat);
            const double ratio = sv.s.size() > 1 ? sv.s[1] / sv.s[0] : 0.0;
            worst_ratio = std::max(worst_ratio, ratio);
            ++layers;
            if (std::abs(nr - 1.0) > 1e-9 || ratio > 1e-10) ok = false;
        }
    }
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "%d layer-snapshots: |norm ratio - 1| %.2e (tol 1e-9), sigma2/sigma1 %.2e "
                  "(tol 1e-10)",
                  layers, worst_norm, worst_ratio);
    report("rank1-extraction-invariants", ok && layers > 0, buf);
}

// ---------------------------------------------------------------------------
// per-token rank-1 gradient law on 20 seeded configs
// ---------------------------------------------------------------------------

void criterion_rank1_gradient_law() {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        model::ModelConfig cfg;
        cfg.vocab_size = 10 + static_cast<int>(seed % 4) * 2;
        cfg.d_model = 8 + static_cast<int>(seed % 3) * 4;
        cfg.n_heads = (seed % 2) ? 2 : 4;
        if (cfg.d_model % (2 * cfg.n_heads) != 0) cfg.n_heads = 2;
        cfg.n_layers = 1 + static_cast<int>(seed % 2);
        cfg.d_ff = cfg.d_model + 4;
        cfg.max_seq_len = 8;
        cfg.norm_type = (seed % 3 == 0) ? "layernorm" : "rmsnorm";
        auto rep = align::rank1_gradient_check(cfg, seed, {1, 2, 3});
        for (const auto& row : rep.rows) {
            if (!row.zero_prob) worst = std::max(worst, row.ratio_prob);
            if (!row.zero_logprob) worst = std::max(worst, row.ratio_logprob);
            if ((!row.zero_prob && row.ratio_prob > 1e-6) ||
                (!row.zero_logprob && row.ratio_logprob > 1e-6))
                ok = false;
        }
        for (const auto& row : rep.growth)
            for (size_t i = 0; i < row.ranks.size(); ++i)
                if (row.ranks[i] > rep.t_values[i]) ok = false;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "20 configs: worst sigma2/sigma1 %.2e (tol 1e-6); T-token rank <= T; %.1fs "
                  "(target <60s)",
                  worst, secs);
    report("per-token-rank1-law", ok && secs < 60.0, buf);
}

// ---------------------------------------------------------------------------
// gradient correctness: losses vs central finite differences (64-bit)
// ---------------------------------------------------------------------------

struct LossFixture {
    model::PolicyParams<double> params;
    std::optional<model::LoraAdapter<double>> adapters;
    std::vector<rlvr::RolloutGroup> groups;
    rlvr::AlgoConfig cfg;
    std::vector<std::vector<double>> advantages;
};

LossFixture make_fixture(rlvr::Algo algo, bool clip_active, bool lora, uint64_t seed) {
    LossFixture f;
    model::ModelConfig mc;
    mc.vocab_size = 12;
    mc.d_model = 8;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_ff = 12;
    mc.max_seq_len = 12;
    mc.seed = seed;
    f.params = model::init_params<double>(mc);
    if (lora) {
        f.adapters = model::init_lora<double>(f.params, ckpt::default_linear_patterns(), 1,
                                              0.7, seed + 5);
        auto rng = RngStream::from(seed, {11});
        for (auto& e : f.adapters->entries)
            for (auto& v : e.b) v = 0.05 * rng.normal();
    }
    f.cfg.algo = algo;
    f.cfg.beta = 0.0;

    auto rng = RngStream::from(seed, {13});
    for (int gi = 0; gi < 2; ++gi) {
        rlvr::RolloutGroup group;
        group.prompt = {1, static_cast<int>(rng.uniform_int(2, mc.vocab_size - 1))};
        std::vector<double> rewards;
        for (int i = 0; i < 3; ++i) {
            rlvr::Response resp;
            const int len = 2 + static_cast<int>(rng.uniform_int(0, 2));
            for (int t = 0; t < len; ++t)
                resp.tokens.push_back(static_cast<int>(rng.uniform_int(0, mc.vocab_size - 1)));
            rewards.push_back(rng.uniform() < 0.5 ? 1.0 : 0.0);
            group.responses.push_back(std::move(resp));
        }
        if (rewards[0] == rewards[1] && rewards[1] == rewards[2]) rewards[0] = 1.0 - rewards[0];
        f.advantages.push_back(rlvr::group_advantages(rewards).advantages);
        group.responses[0].reward = rewards[0];
        group.responses[1].reward = rewards[1];
        group.responses[2].reward = rewards[2];
        f.groups.push_back(std::move(group));
    }
    f.cfg.group_size = 3;

    // old log-probs from the current parameters (clip inactive) or shifted so
    // some ratios clear the clip bounds (clip active)
    auto shift_rng = RngStream::from(seed, {17});
    for (auto& group : f.groups) {
        for (auto& resp : group.responses) {
            std::vector<int> full = group.prompt;
            full.insert(full.end(), resp.tokens.begin(), resp.tokens.end());
            model::Tape<double> tape;
            model::forward<double>(f.params, f.adapters ? &*f.adapters : nullptr, full, tape,
                                   true);
            const size_t plen = group.prompt.size();
            for (size_t j = 0; j < resp.tokens.size(); ++j) {
                double lp = model::logprob_at<double>(
                    {tape.logits.data() + (plen - 1 + j) * mc.vocab_size,
                     static_cast<size_t>(mc.vocab_size)},
                    resp.tokens[j]);
                if (clip_active) lp -= 0.6 * (shift_rng.uniform() - 0.3); // ratios far from 1
                resp.old_logps.push_back(lp);
            }
        }
    }
    return f;
}

// objective as a function of parameters, with old log-probs frozen
double fixture_objective(LossFixture& f) {
    std::vector<rlvr::GroupLogps> loss_groups(f.groups.size());
    for (size_t gi = 0; gi < f.groups.size(); ++gi) {
        loss_groups[gi].advantages = f.advantages[gi];
        for (auto& resp : f.groups[gi].responses) {
            std::vector<int> full = f.groups[gi].prompt;
            full.insert(full.end(), resp.tokens.begin(), resp.tokens.end());
            model::Tape<double> tape;
            model::forward<double>(f.params, f.adapters ? &*f.adapters : nullptr, full, tape,
                                   true);
            const size_t plen = f.groups[gi].prompt.size();
            std::vector<double> new_lp(resp.tokens.size());
            for (size_t j = 0; j < resp.tokens.size(); ++j)
                new_lp[j] = model::logprob_at<double>(
                    {tape.logits.data() + (plen - 1 + j) * f.params.cfg.vocab_size,
                     static_cast<size_t>(f.params.cfg.vocab_size)},
                    resp.tokens[j]);
            loss_groups[gi].old_lp.push_back(resp.old_logps);
            loss_groups[gi].new_lp.push_back(std::move(new_lp));
        }
    }
    return rlvr::policy_loss(loss_groups, f.cfg).objective;
}

model::Gradients<double> fixture_analytic_grads(LossFixture& f) {
    std::vector<rlvr::GroupLogps> loss_groups(f.groups.size());
    std::vector<std::vector<model::Tape<double>>> tapes(f.groups.size());
    for (size_t gi = 0; gi < f.groups.size(); ++gi) {
        loss_groups[gi].advantages = f.advantages[gi];
        tapes[gi].resize(f.groups[gi].responses.size());
        for (size_t ri = 0; ri < f.groups[gi].responses.size(); ++ri) {
            auto& resp = f.groups[gi].responses[ri];
            std::vector<int> full = f.groups[gi].prompt;
            full.insert(full.end(), resp.tokens.begin(), resp.tokens.end());
            model::forward<double>(f.params, f.adapters ? &*f.adapters : nullptr, full,
                                   tapes[gi][ri], true);
            const size_t plen = f.groups[gi].prompt.size();
            std::vector<double> new_lp(resp.tokens.size());
            for (size_t j = 0; j < resp.tokens.size(); ++j)
                new_lp[j] = model::logprob_at<double>(
                    {tapes[gi][ri].logits.data() + (plen - 1 + j) * f.params.cfg.vocab_size,
                     static_cast<size_t>(f.params.cfg.vocab_size)},
                    resp.tokens[j]);
            loss_groups[gi].old_lp.push_back(resp.old_logps);
            loss_groups[gi].new_lp.push_back(std::move(new_lp));
        }
    }
    auto loss = rlvr::policy_loss(loss_groups, f.cfg);
    auto grads = model::Gradients<double>::zeros_like(f.params,
                                                      f.adapters ? &*f.adapters : nullptr);
    for (size_t gi = 0; gi < f.groups.size(); ++gi) {
        for (size_t ri = 0; ri < f.groups[gi].responses.size(); ++ri) {
            auto& resp = f.groups[gi].responses[ri];
            const size_t plen = f.groups[gi].prompt.size();
            const size_t full_len = plen + resp.tokens.size();
            std::vector<double> w(full_len, 0.0);
            std::vector<int> targets(full_len, 0);
            for (size_t j = 0; j < resp.tokens.size(); ++j) {
                w[plen - 1 + j] = loss.weights[gi][ri][j];
                targets[plen - 1 + j] = resp.tokens[j];
            }
            auto dl = model::dlogits_weighted_logprob<double>(tapes[gi][ri], w, targets);
            model::backward<double>(tapes[gi][ri], f.params,
                                    f.adapters ? &*f.adapters : nullptr, dl, grads);
        }
    }
    return grads;
}

void criterion_gradient_correctness() {
    bool ok = true;
    double worst = 0.0;
    std::string worst_case;
    const double h = 1e-5;
    for (auto algo : {rlvr::Algo::GRPO, rlvr::Algo::DAPO, rlvr::Algo::GSPO}) {
        for (bool clip_active : {false, true}) {
            for (bool lora : {false, true}) {
                LossFixture f = make_fixture(algo, clip_active, lora,
                                             17 + static_cast<uint64_t>(algo) * 3 +
                                                 (clip_active ? 1 : 0));
                auto analytic = fixture_analytic_grads(f);
                auto check_vec = [&](std::vector<double>& theta,
                                     const std::vector<double>& an, const std::string& label) {
                    double num = 0.0, den = 0.0;
                    for (size_t i = 0; i < theta.size(); ++i) {
                        const double keep = theta[i];
                        theta[i] = keep + h;
                        const double up = fixture_objective(f);
                        theta[i] = keep - h;
                        const double down = fixture_objective(f);
                        theta[i] = keep;
                        const double fd = (up - down) / (2.0 * h);
                        num += (fd - an[i]) * (fd - an[i]);
                        den += fd * fd;
                    }
                    const double rel = std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
                    if (rel > worst) {
                        worst = rel;
                        worst_case = label;
                    }
                    if (rel > 1e-4) ok = false;
                };
                if (!lora) {
                    for (auto& t : f.params.set.tensors)
                        check_vec(t.data, analytic.base.at(t.name).data,
                                  config::algo_to_string(algo) + std::string(":") + t.name);
                } else {
                    for (size_t e = 0; e < f.adapters->entries.size(); ++e) {
                        check_vec(f.adapters->entries[e].a, analytic.lora_a[e],
                                  config::algo_to_string(algo) + std::string(":lora_A"));
                        check_vec(f.adapters->entries[e].b, analytic.lora_b[e],
                                  config::algo_to_string(algo) + std::string(":lora_B"));
                    }
                }
            }
        }
    }
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "3 losses x {clip on,off} x {base,lora}: worst rel err %.2e (%s, tol 1e-4)",
                  worst, worst_case.c_str());
    report("gradient-correctness-fd", ok, buf);
}

// ---------------------------------------------------------------------------
// lora asymmetry law on 20 seeded cases
// ---------------------------------------------------------------------------

void criterion_lora_asymmetry() {
    bool ok = true;
    double worst_cos = 1.0, worst_err = 0.0;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        model::ModelConfig cfg;
        cfg.vocab_size = 12;
        cfg.d_model = 8 + static_cast<int>(seed % 2) * 4;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 12;
        cfg.max_seq_len = 10;
        auto rep = align::lora_asymmetry_check(cfg, seed, 6);
        for (const auto& row : rep.single) {
            if (row.a_defined) worst_cos = std::min(worst_cos, row.cos_a);
            if (row.b_defined) worst_cos = std::min(worst_cos, row.cos_b);
            if ((row.a_defined && row.cos_a < 1.0 - 1e-8) ||
                (row.b_defined && row.cos_b < 1.0 - 1e-8))
                ok = false;
        }
        for (const auto& row : rep.multi) {
            worst_err = std::max({worst_err, row.grad_a_oracle_err, row.grad_b_oracle_err});
            if (row.grad_a_oracle_err > 1e-10 || row.grad_b_oracle_err > 1e-10) ok = false;
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "20 cases: min |cos| %.12f (tol 1-1e-8); multi-position oracle err %.2e "
                  "(tol 1e-10)",
                  worst_cos, worst_err);
    report("lora-asymmetry-law", ok, buf);
}

// ---------------------------------------------------------------------------
// loss-formula oracles on 50 seeded batches
// ---------------------------------------------------------------------------

std::vector<rlvr::GroupLogps> synthetic_batch(uint64_t seed, int groups, int g, int max_len,
                                              double spread) {
    auto rng = RngStream::from(seed, {0x6f7261636cULL});
    std::vector<rlvr::GroupLogps> batch(groups);
    for (auto& grp : batch) {
        std::vector<double> rewards(g);
        for (auto& r : rewards) r = rng.uniform() < 0.4 ? 1.0 : 0.0;
        bool uniform = true;
        for (double r : rewards) uniform = uniform && r == rewards[0];
        if (uniform) rewards[0] = 1.0 - rewards[0];
        grp.advantages = rlvr::group_advantages(rewards).advantages;
        grp.old_lp.resize(g);
        grp.new_lp.resize(g);
        for (int i = 0; i < g; ++i) {
            const int len = 1 + static_cast<int>(rng.uniform_int(0, max_len - 1));
            grp.old_lp[i].resize(len);
            grp.new_lp[i].resize(len);
            for (int t = 0; t < len; ++t) {
                grp.old_lp[i][t] = -0.8 - 2.0 * rng.uniform();
                grp.new_lp[i][t] = grp.old_lp[i][t] + spread * (rng.uniform() - 0.5);
            }
        }
    }
    return batch;
}

void criterion_loss_oracles() {
    bool ok = true;
    double worst_obj = 0.0, worst_s = 0.0;
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        auto batch = synthetic_batch(seed, 2 + seed % 3, 4, 6, 0.9);
        loss_oracle::Batch ob;
        for (const auto& g : batch) {
            ob.old_lp.push_back(g.old_lp);
            ob.new_lp.push_back(g.new_lp);
            ob.advantages.push_back(g.advantages);
        }
        rlvr::AlgoConfig cfg;
        cfg.group_size = 4;
        cfg.algo = rlvr::Algo::GRPO;
        worst_obj = std::max(worst_obj, std::abs(rlvr::policy_loss(batch, cfg).objective -
                                                 loss_oracle::grpo_objective(ob, cfg.eps)));
        cfg.algo = rlvr::Algo::DAPO;
        worst_obj = std::max(worst_obj,
                             std::abs(rlvr::policy_loss(batch, cfg).objective -
                                      loss_oracle::dapo_objective(ob, cfg.eps_low, cfg.eps_high)));
        cfg.algo = rlvr::Algo::GSPO;
        worst_obj = std::max(worst_obj, std::abs(rlvr::policy_loss(batch, cfg).objective -
                                                 loss_oracle::gspo_objective(ob, cfg.eps)));
        // sequence ratio vs the direct-product geometric mean
        for (size_t i = 0; i < batch[0].new_lp.size(); ++i) {
            double mean_log = 0.0;
            for (size_t t = 0; t < batch[0].new_lp[i].size(); ++t)
                mean_log += batch[0].new_lp[i][t] - batch[0].old_lp[i][t];
            const double s = std::exp(mean_log / batch[0].new_lp[i].size());
            const double direct =
                loss_oracle::geometric_mean_ratio(batch[0].old_lp[i], batch[0].new_lp[i]);
            worst_s = std::max(worst_s, std::abs(s - direct) / std::max(direct, 1e-300));
        }
    }
    if (worst_obj > 1e-10 || worst_s > 1e-12) ok = false;

    // token-mean vs sample-mean normalization on the worked mixed-length batch
    rlvr::GroupLogps g;
    g.advantages = {1.0, -1.0};
    g.old_lp = {std::vector<double>(3, -1.0), std::vector<double>(7, -1.0)};
    g.new_lp = g.old_lp;
    rlvr::AlgoConfig dapo;
    dapo.algo = rlvr::Algo::DAPO;
    auto dout = rlvr::policy_loss({g}, dapo);
    rlvr::AlgoConfig grpo;
    grpo.algo = rlvr::Algo::GRPO;
    auto gout = rlvr::policy_loss({g}, grpo);
    for (double w : dout.weights[0][0])
        if (std::abs(w - 0.1) > 1e-12) ok = false; // 1 / (3 + 7)
    for (double w : dout.weights[0][1])
        if (std::abs(w + 0.1) > 1e-12) ok = false;
    for (double w : gout.weights[0][0])
        if (std::abs(w - 1.0 / (2.0 * 3.0)) > 1e-12) ok = false; // A/(G |y_i|)
    for (double w : gout.weights[0][1])
        if (std::abs(w + 1.0 / (2.0 * 7.0)) > 1e-12) ok = false;

    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "50 batches x 3 algos: obj err %.2e (tol 1e-10); s_i err %.2e (tol 1e-12); "
                  "token-mean 1/10 exact",
                  worst_obj, worst_s);
    report("loss-formula-oracles", ok, buf);
}

// ---------------------------------------------------------------------------
// small exact criteria
// ---------------------------------------------------------------------------

void criterion_advantages() {
    auto st = rlvr::group_advantages(std::vector<double>{1, 0, 0, 0});
    bool ok = std::abs(st.advantages[0] - 1.7321) <= 1e-4;
    for (int i = 1; i < 4; ++i) ok = ok && std::abs(st.advantages[i] + 0.5774) <= 1e-4;
    auto zero = rlvr::group_advantages(std::vector<double>{1, 1, 1, 1});
    for (double a : zero.advantages) ok = ok && a == 0.0;
    report("advantage-normalization", ok,
           "[1,0,0,0] -> [+1.7321,-0.5774,...] (tol 1e-4); sigma=0 -> zeros");
}

void criterion_overlong() {
    tasks::RewardConfig cfg;
    cfg.l_max = 30;
    cfg.l_cache = 20;
    cfg.enable_overlong = true;
    bool ok = tasks::overlong_penalty(10, cfg) == 0.0;         // soft cap boundary
    ok = ok && tasks::overlong_penalty(5, cfg) == 0.0;         // below
    ok = ok && tasks::overlong_penalty(20, cfg) == -0.5;       // midpoint of the ramp
    ok = ok && tasks::overlong_penalty(30, cfg) == -1.0;       // hard cap boundary
    ok = ok && tasks::overlong_penalty(31, cfg) == -1.0;       // beyond
    report("overlong-shaping-branches", ok, "piecewise values 0 / -0.5 / -1 exact at boundaries");
}

void criterion_dynamic_sampling() {
    rlvr::RolloutGroup g;
    g.responses.resize(8);
    for (auto& r : g.responses) r.correct = true;
    bool ok = !rlvr::dynamic_sampling_filter(g);
    for (auto& r : g.responses) r.correct = false;
    ok = ok && !rlvr::dynamic_sampling_filter(g);
    for (int c = 1; c < 8; ++c) {
        for (int i = 0; i < 8; ++i) g.responses[i].correct = i < c;
        ok = ok && rlvr::dynamic_sampling_filter(g);
    }
    report("dynamic-sampling-filter", ok, "0 or G correct dropped, 1..G-1 kept, exact");
}

void criterion_pass_at_k() {
    bool ok = true;
    for (int n = 1; n <= 12 && ok; ++n) {
        for (int c = 0; c <= n; ++c) {
            double prev_k = -1.0;
            for (int k = 1; k <= n; ++k) {
                // enumeration oracle over all C(n,k) subsets
                std::vector<int> idx(k);
                for (int i = 0; i < k; ++i) idx[i] = i;
                int64_t total = 0, hit = 0;
                while (true) {
                    ++total;
                    bool any = false;
                    for (int i : idx)
                        if (i < c) any = true;
                    if (any) ++hit;
                    int i = k - 1;
                    while (i >= 0 && idx[i] == n - k + i) --i;
                    if (i < 0) break;
                    ++idx[i];
                    for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
                }
                const double expect = static_cast<double>(hit) / static_cast<double>(total);
                const double got = tasks::pass_at_k(n, c, k);
                if (std::abs(got - expect) > 1e-12) ok = false;
                if (got + 1e-12 < prev_k) ok = false; // monotone in k
                prev_k = got;
                if (c > 0 && tasks::pass_at_k(n, c - 1, k) > got + 1e-12) ok = false;
            }
        }
    }
    report("pass-at-k-estimator", ok, "matches subset enumeration for n<=12; monotone in k and c");
}

void criterion_table2_format() {
    spectral::SpectrumReport rep;
    spectral::SpectrumRow row;
    row.name = "layers.0.mlp.gate_proj";
    row.svals = {10.0, 4.240, 4.185, 4.158};
    row.ratios = {1.0, 0.4240, 0.4185, 0.4158};
    rep.rows.push_back(row);
    auto rows = spectral::sigma_ratio_table(rep, 0.70, 7);
    const std::string got = rows.size() == 1 ? spectral::format_sigma_row(rows[0]) : "(no row)";
    const bool ok = got == "100.00%, 42.40%, 41.85%, 41.58%";
    report("table2-format-reproduction", ok, "spectrum [10,4.240,4.185,4.158] -> \"" + got + "\"");
}

// ---------------------------------------------------------------------------
// substitution protocol: K=10 run, events at 10,20,30, rank-1 snapshot deltas
// ---------------------------------------------------------------------------

void criterion_substitution_protocol() {
    const fs::path dir = out_root() / "substitution";
    fs::remove_all(dir);
    auto rc = protocol_config(dir, 5, rlvr::TrainMode::PeriodicRank1);
    rc.schedule.steps = 30;
    rc.schedule.snapshot_interval = 10; // snapshots land after each substitution
    rc.schedule.eval_interval = 30;
    rc.algo.substitution_period = 10;
    // 64-bit training so the snapshot-vs-base delta keeps the rank-1 structure
    // beyond float rounding
    rlvr::Trainer<double> trainer(rc);
    auto result = trainer.train();

    bool ok = result.substitution_steps == std::vector<int>{10, 20, 30};
    auto base = ckpt::load((dir / "snapshots" / "step0.ckpt").string());
    double worst_ratio = 0.0;
    int checked = 0;
    for (int step : {10, 20, 30}) {
        auto snap = ckpt::load((dir / "snapshots" / ("step" + std::to_string(step) + ".ckpt")).string());
        auto ds = ckpt::select_linear(ckpt::delta(base, snap), ckpt::default_linear_patterns());
        for (const auto& [name, tensor] : ds.entries) {
            auto sv = linalg::svd(tensor.to_matrix());
            if (sv.s[0] == 0.0) continue; // untouched layer, rank 0
            const double ratio = sv.s[1] / sv.s[0];
            worst_ratio = std::max(worst_ratio, ratio);
            if (ratio > 1e-10) ok = false;
            ++checked;
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "events at {10,20,30}; %d layer-snapshots sigma2/sigma1 %.2e (tol 1e-10)",
                  checked, worst_ratio);
    report("substitution-protocol", ok && checked > 0, buf);
}

// ---------------------------------------------------------------------------
// determinism of the cli commands
// ---------------------------------------------------------------------------

void criterion_determinism() {
#ifndef RANK1LAB_CLI_PATH
    report("cli-determinism", false, "cli path not wired into the build");
#else
    const std::string cli = RANK1LAB_CLI_PATH;
    const fs::path dir = out_root() / "determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);

    rlvr::RunConfig rc = protocol_config(dir / "ra", 9, rlvr::TrainMode::Full);
    rc.schedule.steps = 12;
    rc.schedule.eval_interval = 6;
    rc.schedule.snapshot_interval = 6;
    rc.task.gen.size = 64;
    rc.task.test_size = 8;
    rc.schedule.batch_prompts = 4;
    {
        std::ofstream cfg(dir / "cfg.json");
        auto j = config::run_config_to_json(rc);
        j.erase("out_dir");
        cfg << j.dump(2) << "\n";
    }
    auto run = [&](const std::string& out) {
        std::ostringstream cmd;
        cmd << '"' << cli << "\" train --config \"" << (dir / "cfg.json").string()
            << "\" --out \"" << (dir / out).string() << "\" > /dev/null 2>&1";
        return std::system(cmd.str().c_str());
    };
    bool ok = run("ra") == 0 && run("rb") == 0;
    const std::string ta = read_file((dir / "ra" / "telemetry.csv").string());
    ok = ok && !ta.empty() && ta == read_file((dir / "rb" / "telemetry.csv").string());
    const std::string ea = read_file((dir / "ra" / "events.jsonl").string());
    ok = ok && !ea.empty() && ea == read_file((dir / "rb" / "events.jsonl").string());

    auto gen = [&](const std::string& out) {
        std::ostringstream cmd;
        cmd << '"' << cli << "\" gen-data --size 200 --seed 3 --out \""
            << (dir / out).string() << "\" > /dev/null 2>&1";
        return std::system(cmd.str().c_str());
    };
    ok = ok && gen("da.jsonl") == 0 && gen("db.jsonl") == 0;
    const std::string da = read_file((dir / "da.jsonl").string());
    ok = ok && !da.empty() && da == read_file((dir / "db.jsonl").string());
    report("cli-determinism", ok,
           "two train runs: telemetry.csv and events.jsonl byte-identical; gen-data "
           "byte-identical");
#endif
}

} // namespace

int main() {
    std::printf("rank1lab acceptance suite\n");
    std::printf(
        "[NOTE] full-scale LLM results (7B-32B reward curves, benchmark tables,\n"
        "       pretrained-model spectra) are out of desk-scale scope; acceptance rests\n"
        "       on the property suites and the toy-scale protocol below.\n");

    criterion_svd_oracle();
    criterion_rank1_gradient_law();
    criterion_gradient_correctness();
    criterion_lora_asymmetry();
    criterion_loss_oracles();
    criterion_advantages();
    criterion_overlong();
    criterion_dynamic_sampling();
    criterion_pass_at_k();
    criterion_table2_format();
    criterion_substitution_protocol();

    const auto t0 = std::chrono::steady_clock::now();
    run_protocol_matrix();
    const double matrix_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    criterion_rank1_extraction();
    criterion_toy_protocol(matrix_seconds);
    criterion_determinism();

    if (g_failures == 0) {
        std::printf("all acceptance criteria passed\n");
        return 0;
    }
    std::printf("%d acceptance criteria FAILED\n", g_failures);
    return 1;
}
