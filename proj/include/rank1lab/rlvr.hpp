// SPDX-License-Identifier: Apache-2.0
//
// Rollout collection, group-normalized advantages, the clipped surrogate
// losses (token-ratio sample-mean, token-ratio token-mean with asymmetric
// bounds, and sequence-ratio variants), AdamW, periodic rank-1 substitution
// and the training loop with CSV/JSONL telemetry.
#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <thread>

#include "rank1lab/model.hpp"
#include "rank1lab/spectral.hpp"
#include "rank1lab/tasks.hpp"

namespace rank1lab::rlvr {

enum class Algo { GRPO, DAPO, GSPO };
enum class Aggregation { Auto, SampleMean, TokenMean };
enum class RefPolicy { Base, PostSubstitution };

struct AlgoConfig {
    Algo algo = Algo::GRPO;
    double eps = 0.2;        // symmetric clip for GRPO/GSPO
    double eps_low = 0.2;    // asymmetric clip for DAPO
    double eps_high = 0.28;
    double beta = 0.0;       // KL coefficient (GRPO only)
    int group_size = 8;      // G
    bool dynamic_sampling = false;
    Aggregation aggregation = Aggregation::Auto;
    double lr = 5e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    int substitution_period = 10; // K, 0 = off
    bool substitution_rescale = true;
    bool reset_moments_on_substitution = true;
    RefPolicy ref_policy = RefPolicy::Base;
    double temperature = 1.0;
    double top_p = 0.95;
    int max_new_tokens = 16;
    bool greedy_rollout = false; // debugging aid: all G responses identical
    int inner_epochs = 1;

    Aggregation resolved_aggregation() const {
        if (aggregation != Aggregation::Auto) return aggregation;
        return algo == Algo::DAPO ? Aggregation::TokenMean : Aggregation::SampleMean;
    }
    void validate() const {
        if (eps <= 0 || eps_low <= 0 || eps_high <= 0) throw ConfigError("clip widths must be > 0");
        if (beta < 0) throw ConfigError("beta must be >= 0");
        if (beta > 0 && algo != Algo::GRPO)
            throw ConfigError("the KL penalty applies to the GRPO objective only");
        if (group_size < 2) throw ConfigError("group size must be >= 2");
        if (substitution_period < 0) throw ConfigError("substitution period must be >= 0");
        if (inner_epochs < 1) throw ConfigError("inner epochs must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// rollouts and advantages
// ---------------------------------------------------------------------------

struct Response {
    std::vector<int> tokens;      // generated tokens, EOS included when reached
    std::vector<double> old_logps; // recorded at sampling time
    double reward = 0.0;
    bool correct = false;
};

struct RolloutGroup {
    int64_t instance_id = 0;
    std::vector<int> prompt;
    std::vector<Response> responses; // exactly G
};

struct GroupStats {
    double mu = 0.0;
    double sigma = 0.0;
    std::vector<double> advantages;
};

inline GroupStats group_advantages(std::span<const double> rewards) {
    const size_t g = rewards.size();
    if (g < 2) throw DomainError("advantage groups need at least 2 responses");
    GroupStats st;
    for (double r : rewards) st.mu += r;
    st.mu /= static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) var += (r - st.mu) * (r - st.mu);
    st.sigma = std::sqrt(var / static_cast<double>(g)); // population std
    st.advantages.assign(g, 0.0);
    if (st.sigma >= 1e-8) {
        for (size_t i = 0; i < g; ++i) st.advantages[i] = (rewards[i] - st.mu) / st.sigma;
    }
    return st;
}

// keep only groups with mixed correctness: 0 < #correct < G
inline bool dynamic_sampling_filter(const RolloutGroup& group) {
    int correct = 0;
    for (const auto& r : group.responses) correct += r.correct ? 1 : 0;
    return correct > 0 && correct < static_cast<int>(group.responses.size());
}

// per-token estimator exp(d) - d - 1 with d = logp_ref - logp_theta;
// non-negative, zero iff the policies agree on the token
inline double kl_penalty_token(double logp_theta, double logp_ref) {
    const double d = logp_ref - logp_theta;
    return std::exp(d) - d - 1.0;
}

// ---------------------------------------------------------------------------
// surrogate losses on precomputed log-probs (pure double math, shared by the
// trainer and by the oracle tests)
// ---------------------------------------------------------------------------

struct GroupLogps {
    std::vector<double> advantages;              // per response
    std::vector<std::vector<double>> old_lp;     // per response, per token
    std::vector<std::vector<double>> new_lp;
    std::vector<std::vector<double>> ref_lp;     // empty unless beta > 0
};

struct LossOutput {
    double objective = 0.0; // J, the maximized surrogate
    double kl_value = 0.0;  // mean per-token KL estimate when beta > 0
    std::vector<std::vector<std::vector<double>>> weights; // dJ/dlogpi per token
    double clip_fraction = 0.0;
    double mean_ratio = 1.0;
    int64_t token_count = 0;
};

inline LossOutput policy_loss(const std::vector<GroupLogps>& groups, const AlgoConfig& cfg) {
    cfg.validate();
    const double lo = 1.0 - (cfg.algo == Algo::DAPO ? cfg.eps_low : cfg.eps);
    const double hi = 1.0 + (cfg.algo == Algo::DAPO ? cfg.eps_high : cfg.eps);
    const bool sequence_ratio = cfg.algo == Algo::GSPO;
    const bool token_mean = cfg.resolved_aggregation() == Aggregation::TokenMean;
    const double batch = static_cast<double>(groups.size());
    if (groups.empty()) throw DomainError("empty loss batch");

    int64_t total_tokens = 0;
    for (const auto& g : groups)
        for (const auto& lp : g.new_lp) total_tokens += static_cast<int64_t>(lp.size());
    if (total_tokens == 0) throw DomainError("loss batch has no tokens");

    LossOutput out;
    out.token_count = total_tokens;
    out.weights.resize(groups.size());
    double ratio_sum = 0.0;
    int64_t clipped_tokens = 0;
    double kl_sum = 0.0; // aggregated with the same normalization as the objective

    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const double gsize = static_cast<double>(g.new_lp.size());
        out.weights[gi].resize(g.new_lp.size());
        if (cfg.beta > 0.0 && g.ref_lp.size() != g.new_lp.size())
            throw MissingReference("beta > 0 requires reference log-probs");
        for (size_t i = 0; i < g.new_lp.size(); ++i) {
            const auto& old_lp = g.old_lp[i];
            const auto& new_lp = g.new_lp[i];
            const double adv = g.advantages[i];
            const size_t len = new_lp.size();
            out.weights[gi][i].assign(len, 0.0);
            if (len == 0) continue;
            // normalizer for one token of this response
            const double norm = token_mean
                                    ? 1.0 / static_cast<double>(total_tokens)
                                    : 1.0 / (batch * gsize * static_cast<double>(len));

            if (sequence_ratio) {
                double mean_diff = 0.0;
                for (size_t t = 0; t < len; ++t) mean_diff += new_lp[t] - old_lp[t];
                mean_diff /= static_cast<double>(len);
                const double s = std::exp(mean_diff);
                const double unclipped = s * adv;
                const double clipped = std::clamp(s, lo, hi) * adv;
                const double term = std::min(unclipped, clipped);
                out.objective += term * norm * static_cast<double>(len);
                ratio_sum += s * static_cast<double>(len);
                const bool clip_binding = unclipped > clipped;
                if (clip_binding) clipped_tokens += static_cast<int64_t>(len);
                const double wtok = clip_binding ? 0.0 : s * adv / static_cast<double>(len);
                for (size_t t = 0; t < len; ++t)
                    out.weights[gi][i][t] = wtok * norm * static_cast<double>(len);
            } else {
                for (size_t t = 0; t < len; ++t) {
                    const double r = std::exp(new_lp[t] - old_lp[t]);
                    const double unclipped = r * adv;
                    const double clipped = std::clamp(r, lo, hi) * adv;
                    const double term = std::min(unclipped, clipped);
                    out.objective += term * norm;
                    ratio_sum += r;
                    const bool clip_binding = unclipped > clipped;
                    if (clip_binding) {
                        ++clipped_tokens;
                    } else {
                        out.weights[gi][i][t] = r * adv * norm;
                    }
                }
            }

            if (cfg.beta > 0.0) {
                const auto& ref_lp = g.ref_lp[i];
                const double knorm = 1.0 / (batch * gsize * static_cast<double>(len));
                for (size_t t = 0; t < len; ++t) {
                    const double d = ref_lp[t] - new_lp[t];
                    kl_sum += (std::exp(d) - d - 1.0) * knorm;
                    // d/dlogpi of -beta * kl
                    out.weights[gi][i][t] += cfg.beta * (std::exp(d) - 1.0) * knorm;
                }
            }
        }
    }
    if (cfg.beta > 0.0) {
        out.kl_value = kl_sum;
        out.objective -= cfg.beta * kl_sum;
    }
    out.clip_fraction = static_cast<double>(clipped_tokens) / static_cast<double>(total_tokens);
    out.mean_ratio = ratio_sum / static_cast<double>(total_tokens);
    return out;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and global-norm gradient clipping
// ---------------------------------------------------------------------------

template <typename Real>
struct AdamState {
    std::vector<std::vector<Real>> m, v;       // base tensors
    std::vector<std::vector<Real>> ma, va;     // adapter A factors
    std::vector<std::vector<Real>> mb, vb;     // adapter B factors
    int64_t t = 0;

    static AdamState zeros_like(const model::PolicyParams<Real>& params,
                                const model::LoraAdapter<Real>* adapters) {
        AdamState s;
        for (const auto& p : params.set.tensors) {
            s.m.emplace_back(p.data.size(), Real(0));
            s.v.emplace_back(p.data.size(), Real(0));
        }
        if (adapters) {
            for (const auto& e : adapters->entries) {
                s.ma.emplace_back(e.a.size(), Real(0));
                s.va.emplace_back(e.a.size(), Real(0));
                s.mb.emplace_back(e.b.size(), Real(0));
                s.vb.emplace_back(e.b.size(), Real(0));
            }
        }
        return s;
    }

    void reset() {
        t = 0;
        for (auto& x : m) std::fill(x.begin(), x.end(), Real(0));
        for (auto& x : v) std::fill(x.begin(), x.end(), Real(0));
        for (auto& x : ma) std::fill(x.begin(), x.end(), Real(0));
        for (auto& x : va) std::fill(x.begin(), x.end(), Real(0));
        for (auto& x : mb) std::fill(x.begin(), x.end(), Real(0));
        for (auto& x : vb) std::fill(x.begin(), x.end(), Real(0));
    }
};

template <typename Real>
double global_grad_norm(const model::Gradients<Real>& grads) {
    double acc = 0.0;
    for (const auto& t : grads.base.tensors)
        for (Real g : t.data) acc += static_cast<double>(g) * static_cast<double>(g);
    for (const auto& v : grads.lora_a)
        for (Real g : v) acc += static_cast<double>(g) * static_cast<double>(g);
    for (const auto& v : grads.lora_b)
        for (Real g : v) acc += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(acc);
}

// grads are gradients of the minimized loss; returns the pre-clip global norm
template <typename Real>
double optimizer_step(model::PolicyParams<Real>& params, model::LoraAdapter<Real>* adapters,
                      const model::Gradients<Real>& grads, AdamState<Real>& state,
                      const AlgoConfig& cfg, bool update_base = true) {
    const double gnorm = global_grad_norm(grads);
    const double scale = (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip)
                             ? cfg.grad_clip / gnorm
                             : 1.0;
    state.t += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));

    auto update = [&](Real* p, const Real* g, Real* m, Real* v, size_t n, bool apply) {
        for (size_t i = 0; i < n; ++i) {
            const double gi = static_cast<double>(g[i]) * scale;
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            if (!apply) continue;
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double step = cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                          cfg.weight_decay * static_cast<double>(p[i]));
            p[i] = static_cast<Real>(static_cast<double>(p[i]) - step);
        }
    };

    for (size_t ti = 0; ti < params.set.tensors.size(); ++ti) {
        auto& p = params.set.tensors[ti];
        update(p.data.data(), grads.base.tensors[ti].data.data(), state.m[ti].data(),
               state.v[ti].data(), p.data.size(), update_base);
    }
    if (adapters) {
        for (size_t e = 0; e < adapters->entries.size(); ++e) {
            auto& entry = adapters->entries[e];
            update(entry.a.data(), grads.lora_a[e].data(), state.ma[e].data(),
                   state.va[e].data(), entry.a.size(), true);
            update(entry.b.data(), grads.lora_b[e].data(), state.mb[e].data(),
                   state.vb[e].data(), entry.b.size(), true);
        }
    }
    return gnorm;
}

// ---------------------------------------------------------------------------
// periodic rank-1 substitution
// ---------------------------------------------------------------------------

struct SubstitutionEvent {
    int step = 0;
    struct LayerInfo {
        std::string name;
        double sigma1 = 0.0;
        double scale = 1.0;
    };
    std::vector<LayerInfo> layers;
    std::vector<std::string> degenerate; // kept-current layers
};

// new weight = base + rank-1(current - base) on the selected 2-D layers;
// everything else keeps its current value
template <typename Real>
SubstitutionEvent periodic_rank1_substitute(const ckpt::Checkpoint& base,
                                            model::PolicyParams<Real>& current,
                                            const std::vector<std::string>& selection,
                                            bool rescale = true) {
    SubstitutionEvent ev;
    for (auto& t : current.set.tensors) {
        if (!t.is_matrix() || !ckpt::matches_any(selection, t.name)) continue;
        auto bit = base.tensors.find(t.name);
        if (bit == base.tensors.end()) continue;
        const auto& bt = bit->second;
        if (bt.numel() != static_cast<int64_t>(t.data.size())) continue;
        linalg::Matrix dw(t.rows, t.cols);
        for (size_t i = 0; i < t.data.size(); ++i)
            dw.data()[i] = static_cast<double>(t.data[i]) - bt.data[i];
        try {
            auto r1 = spectral::extract_rank1(dw);
            linalg::Matrix d1 = r1.materialize(rescale);
            for (size_t i = 0; i < t.data.size(); ++i)
                t.data[i] = static_cast<Real>(bt.data[i] + d1.data()[i]);
            ev.layers.push_back({t.name, r1.sigma1, r1.scale});
        } catch (const DegenerateDelta&) {
            ev.degenerate.push_back(t.name); // keep current values
        }
    }
    return ev;
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

enum class TrainMode { Full, PeriodicRank1, Lora };

struct ScheduleConfig {
    int steps = 300;
    int eval_interval = 25;
    int snapshot_interval = 10;
    int batch_prompts = 8;
    int resample_cap_mult = 10; // dynamic sampling retry budget, x batch
    int eval_samples = 0;       // per-instance samples for pass@k rows (0 = greedy only)
    std::vector<int> eval_pass_at_k;
};

struct TaskConfig {
    tasks::GenConfig gen;
    int64_t test_size = 128;
    tasks::RewardConfig reward;
    tasks::Grammar grammar = tasks::Grammar::Infix;
    std::string dataset_file; // optional: load instead of generating
};

struct LoraTrainConfig {
    int r = 1;
    double alpha = 1.0;
    std::vector<std::string> targets; // defaults to the linear-layer patterns
};

struct RunConfig {
    TaskConfig task;
    model::ModelConfig model;
    AlgoConfig algo;
    ScheduleConfig schedule;
    TrainMode mode = TrainMode::Full;
    LoraTrainConfig lora;
    std::string out_dir = "out";
    std::string run_id = "run";
    uint64_t seed = 1;
    int threads = 0; // 0 = hardware concurrency
    bool fp64 = false;

    void validate() const {
        algo.validate();
        model.validate();
        if (schedule.steps < 0 || schedule.eval_interval < 1 || schedule.snapshot_interval < 1 ||
            schedule.batch_prompts < 1)
            throw ConfigError("invalid schedule");
        if (task.test_size < 0 || task.test_size >= task.gen.size)
            throw ConfigError("test_size must be < dataset size");
    }
};

// ---------------------------------------------------------------------------
// deterministic static-partition parallel map; results depend only on inputs,
// never on the thread count
// ---------------------------------------------------------------------------

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

struct TelemetryRow {
    int step = 0;
    double mean_reward = 0.0;
    double loss = 0.0;
    double clip_fraction = 0.0;
    double mean_ratio = 1.0;
    double entropy = 0.0;
};

struct EvalRow {
    int step = 0;
    int64_t n = 0;
    int64_t c = 0;
    double accuracy = 0.0;
};

struct TrainResult {
    std::vector<TelemetryRow> rows;
    std::vector<EvalRow> evals;
    std::vector<int> substitution_steps;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::string fmt_double(double v) {
    if (v == 0.0) v = 0.0; // normalize -0
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

template <typename Real>
class Trainer {
public:
    explicit Trainer(const RunConfig& rc) : rc_(rc) {
        rc_.validate();
        namespace fs = std::filesystem;
        fs::create_directories(fs::path(rc_.out_dir) / "snapshots");

        dataset_ = rc_.task.dataset_file.empty() ? tasks::generate_dataset(rc_.task.gen)
                                                 : tasks::load_dataset(rc_.task.dataset_file);
        auto [train, test] = tasks::split(dataset_, rc_.task.test_size);
        train_ = std::move(train);
        test_ = std::move(test);
        if (train_.empty()) throw ConfigError("empty training split");

        model::ModelConfig mc = rc_.model;
        mc.seed = rc_.seed; // one master seed drives init and sampling
        params_ = model::init_params<Real>(mc);
        if (rc_.mode == TrainMode::Lora) {
            auto targets = rc_.lora.targets.empty() ? ckpt::default_linear_patterns()
                                                    : rc_.lora.targets;
            adapters_ = model::init_lora<Real>(params_, targets, rc_.lora.r, rc_.lora.alpha,
                                               rc_.seed);
            has_adapters_ = true;
        }
        base_ckpt_ = model::snapshot<Real>(params_, has_adapters_ ? &adapters_ : nullptr);
        stamp(base_ckpt_, 0);
        ckpt::save(base_ckpt_, snapshot_path(0));

        if (rc_.algo.beta > 0.0) ref_params_ = params_;

        telemetry_.open(out_path("telemetry.csv"), std::ios::trunc);
        events_.open(out_path("events.jsonl"), std::ios::trunc);
        if (!telemetry_ || !events_) throw IoError("cannot open telemetry outputs");
        telemetry_ << "step,mean_reward,loss,clip_fraction,mean_ratio,entropy\n";
    }

    TrainResult train() {
        evaluate(0);
        for (int step = 1; step <= rc_.schedule.steps; ++step) run_step(step);
        telemetry_.flush();
        events_.flush();
        return result_;
    }

    const model::PolicyParams<Real>& params() const { return params_; }
    const model::LoraAdapter<Real>* adapters() const {
        return has_adapters_ ? &adapters_ : nullptr;
    }
    const ckpt::Checkpoint& base_checkpoint() const { return base_ckpt_; }
    const std::vector<tasks::CountdownInstance>& test_split() const { return test_; }

private:
    std::string out_path(const std::string& name) const {
        return (std::filesystem::path(rc_.out_dir) / name).string();
    }
    std::string snapshot_path(int step) const {
        return (std::filesystem::path(rc_.out_dir) / "snapshots" /
                ("step" + std::to_string(step) + ".ckpt"))
            .string();
    }
    void stamp(ckpt::Checkpoint& c, int step) const {
        c.metadata["step"] = std::to_string(step);
        c.metadata["seed"] = std::to_string(rc_.seed);
        c.metadata["run_id"] = rc_.run_id;
    }

    void emit_event(const nlohmann::json& j) {
        events_ << j.dump() << "\n";
    }

    void evaluate(int step) {
        if (test_.empty()) return;
        const int n = static_cast<int>(test_.size());
        const int samples = rc_.schedule.eval_samples;
        std::vector<int> correct(n, 0);
        std::vector<int> sampled_correct(n, 0);
        parallel_for(n, rc_.threads, [&](int i) {
            model::Tape<Real> scratch;
            model::SampleConfig sc;
            sc.greedy = true;
            sc.max_new_tokens = rc_.algo.max_new_tokens;
            sc.eos_id = tasks::codec::EOS;
            auto rng = RngStream::from(rc_.seed, {0x6576616cULL, static_cast<uint64_t>(i)});
            auto prompt = tasks::render_prompt(test_[i]);
            auto s = model::sample<Real>(params_, has_adapters_ ? &adapters_ : nullptr, prompt,
                                         sc, rng, scratch);
            correct[i] = tasks::verify(test_[i], s.tokens, rc_.task.grammar) ? 1 : 0;
            if (samples > 0) {
                model::SampleConfig ssc;
                ssc.temperature = rc_.algo.temperature;
                ssc.top_p = rc_.algo.top_p;
                ssc.max_new_tokens = rc_.algo.max_new_tokens;
                ssc.eos_id = tasks::codec::EOS;
                for (int k = 0; k < samples; ++k) {
                    auto srng = RngStream::from(rc_.seed,
                                                {0x6576616cbbULL, static_cast<uint64_t>(step),
                                                 static_cast<uint64_t>(i),
                                                 static_cast<uint64_t>(k)});
                    auto r = model::sample<Real>(params_, has_adapters_ ? &adapters_ : nullptr,
                                                 prompt, ssc, srng, scratch);
                    sampled_correct[i] +=
                        tasks::verify(test_[i], r.tokens, rc_.task.grammar) ? 1 : 0;
                }
            }
        });
        EvalRow row;
        row.step = step;
        row.n = n;
        for (int c : correct) row.c += c;
        row.accuracy = static_cast<double>(row.c) / static_cast<double>(n);
        result_.evals.push_back(row);
        nlohmann::json ev{{"type", "eval"},
                          {"step", step},
                          {"n", row.n},
                          {"c", row.c},
                          {"accuracy", row.accuracy}};
        if (samples > 0 && !rc_.schedule.eval_pass_at_k.empty()) {
            nlohmann::json pk = nlohmann::json::object();
            for (int k : rc_.schedule.eval_pass_at_k) {
                if (k < 1 || k > samples) continue;
                double acc = 0.0;
                for (int i = 0; i < n; ++i)
                    acc += tasks::pass_at_k(samples, sampled_correct[i], k);
                pk["pass@" + std::to_string(k)] = acc / n;
            }
            ev["samples_per_instance"] = samples;
            ev["pass_at_k"] = pk;
        }
        emit_event(ev);
    }

    RolloutGroup rollout_group(int step, int slot) {
        const uint64_t ustep = static_cast<uint64_t>(step);
        const uint64_t uslot = static_cast<uint64_t>(slot);
        auto pick = RngStream::from(rc_.seed, {0x626174ULL, ustep, uslot});
        const auto& inst =
            train_[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(train_.size()) - 1))];
        RolloutGroup group;
        group.instance_id = inst.id;
        group.prompt = tasks::render_prompt(inst);
        group.responses.resize(rc_.algo.group_size);
        model::SampleConfig sc;
        sc.temperature = rc_.algo.temperature;
        sc.top_p = rc_.algo.top_p;
        sc.max_new_tokens = rc_.algo.max_new_tokens;
        sc.greedy = rc_.algo.greedy_rollout;
        sc.eos_id = tasks::codec::EOS;
        model::Tape<Real> scratch;
        for (int g = 0; g < rc_.algo.group_size; ++g) {
            auto rng = RngStream::from(
                rc_.seed, {0x726f6cULL, ustep, uslot, static_cast<uint64_t>(g)});
            auto s = model::sample<Real>(params_, has_adapters_ ? &adapters_ : nullptr,
                                         group.prompt, sc, rng, scratch);
            Response resp;
            resp.tokens = std::move(s.tokens);
            resp.old_logps = std::move(s.logps);
            resp.correct = tasks::verify(inst, resp.tokens, rc_.task.grammar);
            resp.reward = tasks::reward(inst, resp.tokens, rc_.task.reward, rc_.task.grammar);
            group.responses[g] = std::move(resp);
        }
        return group;
    }

    void run_step(int step) {
        const int B = rc_.schedule.batch_prompts;
        // rollouts, deterministically parallel across prompt slots
        std::vector<RolloutGroup> groups(B);
        parallel_for(B, rc_.threads, [&](int slot) { groups[slot] = rollout_group(step, slot); });

        double reward_sum = 0.0;
        int64_t reward_count = 0;
        for (const auto& g : groups)
            for (const auto& r : g.responses) {
                reward_sum += r.reward;
                ++reward_count;
            }

        if (rc_.algo.dynamic_sampling) {
            std::vector<RolloutGroup> kept;
            for (auto& g : groups)
                if (dynamic_sampling_filter(g)) kept.push_back(std::move(g));
            int slot = B;
            const int cap = rc_.schedule.resample_cap_mult * B;
            while (static_cast<int>(kept.size()) < B && slot < cap) {
                // refills are sequential; each slot is its own stream
                auto g = rollout_group(step, slot++);
                for (const auto& r : g.responses) {
                    reward_sum += r.reward;
                    ++reward_count;
                }
                if (dynamic_sampling_filter(g)) kept.push_back(std::move(g));
            }
            if (static_cast<int>(kept.size()) < B) {
                const std::string msg = "resample cap exceeded at step " + std::to_string(step);
                result_.warnings.push_back(msg);
                emit_event({{"type", "warning"},
                            {"step", step},
                            {"what", "resample_cap_exceeded"},
                            {"kept", kept.size()}});
            }
            groups = std::move(kept);
        }

        TelemetryRow row;
        row.step = step;
        row.mean_reward = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;

        if (!groups.empty()) {
            const int epochs = rc_.algo.inner_epochs;
            for (int epoch = 0; epoch < epochs; ++epoch) {
                TelemetryRow lrow = update_once(step, groups);
                if (epoch == 0) {
                    row.loss = lrow.loss;
                    row.clip_fraction = lrow.clip_fraction;
                    row.mean_ratio = lrow.mean_ratio;
                    row.entropy = lrow.entropy;
                }
            }
        }

        telemetry_ << row.step << ',' << detail::fmt_double(row.mean_reward) << ','
                   << detail::fmt_double(row.loss) << ','
                   << detail::fmt_double(row.clip_fraction) << ','
                   << detail::fmt_double(row.mean_ratio) << ','
                   << detail::fmt_double(row.entropy) << '\n';
        result_.rows.push_back(row);

        if (rc_.mode == TrainMode::PeriodicRank1 && rc_.algo.substitution_period > 0 &&
            step % rc_.algo.substitution_period == 0) {
            auto ev = periodic_rank1_substitute<Real>(base_ckpt_, params_,
                                                      ckpt::default_linear_patterns(),
                                                      rc_.algo.substitution_rescale);
            ev.step = step;
            if (rc_.algo.reset_moments_on_substitution && adam_) adam_->reset();
            if (rc_.algo.beta > 0.0 && rc_.algo.ref_policy == RefPolicy::PostSubstitution)
                ref_params_ = params_;
            result_.substitution_steps.push_back(step);
            nlohmann::json layers = nlohmann::json::array();
            for (const auto& li : ev.layers)
                layers.push_back(
                    {{"name", li.name}, {"sigma1", li.sigma1}, {"scale", li.scale}});
            emit_event({{"type", "substitution"},
                        {"step", step},
                        {"layers", layers},
                        {"degenerate", ev.degenerate}});
        }

        if (step % rc_.schedule.eval_interval == 0) evaluate(step);
        if (step % rc_.schedule.snapshot_interval == 0 || step == rc_.schedule.steps) {
            auto c = model::snapshot<Real>(params_, has_adapters_ ? &adapters_ : nullptr);
            stamp(c, step);
            ckpt::save(c, snapshot_path(step));
            if (has_adapters_) {
                auto merged =
                    model::snapshot<Real>(params_, &adapters_, /*merge_adapters=*/true);
                stamp(merged, step);
                ckpt::save(merged, out_path("snapshots/step" + std::to_string(step) +
                                            "_merged.ckpt"));
            }
        }
    }

    // one gradient update over the rolled-out groups; returns telemetry pieces
    TelemetryRow update_once(int step, const std::vector<RolloutGroup>& groups) {
        if (!adam_)
            adam_ = AdamState<Real>::zeros_like(params_, has_adapters_ ? &adapters_ : nullptr);
        const double temp = rc_.algo.temperature;

        struct Prepared {
            std::vector<int> full;
            model::Tape<Real> tape;
            std::vector<double> new_lp;
            std::vector<double> ref_lp;
            double entropy_sum = 0.0;
            int64_t entropy_count = 0;
        };
        std::vector<std::vector<Prepared>> prep(groups.size());
        std::vector<int> flat_group, flat_resp;
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            prep[gi].resize(groups[gi].responses.size());
            for (size_t ri = 0; ri < groups[gi].responses.size(); ++ri) {
                flat_group.push_back(static_cast<int>(gi));
                flat_resp.push_back(static_cast<int>(ri));
            }
        }
        parallel_for(static_cast<int>(flat_group.size()), rc_.threads, [&](int idx) {
            const auto& group = groups[flat_group[idx]];
            const auto& resp = group.responses[flat_resp[idx]];
            auto& p = prep[flat_group[idx]][flat_resp[idx]];
            p.full = group.prompt;
            p.full.insert(p.full.end(), resp.tokens.begin(), resp.tokens.end());
            model::forward<Real>(params_, has_adapters_ ? &adapters_ : nullptr, p.full, p.tape,
                                 true);
            const size_t plen = group.prompt.size();
            const int V = params_.cfg.vocab_size;
            p.new_lp.resize(resp.tokens.size());
            for (size_t j = 0; j < resp.tokens.size(); ++j) {
                const size_t pos = plen - 1 + j;
                p.new_lp[j] = model::logprob_at<Real>(
                    {p.tape.logits.data() + pos * V, static_cast<size_t>(V)}, resp.tokens[j],
                    temp);
                p.entropy_sum += model::entropy_row<Real>(
                    {p.tape.logits.data() + pos * V, static_cast<size_t>(V)}, temp);
                ++p.entropy_count;
            }
            if (rc_.algo.beta > 0.0) {
                model::Tape<Real> ref_tape;
                model::forward<Real>(ref_params_, nullptr, p.full, ref_tape, true);
                p.ref_lp.resize(resp.tokens.size());
                for (size_t j = 0; j < resp.tokens.size(); ++j) {
                    const size_t pos = plen - 1 + j;
                    p.ref_lp[j] = model::logprob_at<Real>(
                        {ref_tape.logits.data() + pos * V, static_cast<size_t>(V)},
                        resp.tokens[j], temp);
                }
            }
        });

        std::vector<GroupLogps> loss_groups(groups.size());
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            std::vector<double> rewards;
            for (const auto& r : groups[gi].responses) rewards.push_back(r.reward);
            loss_groups[gi].advantages = group_advantages(rewards).advantages;
            for (size_t ri = 0; ri < groups[gi].responses.size(); ++ri) {
                loss_groups[gi].old_lp.push_back(groups[gi].responses[ri].old_logps);
                loss_groups[gi].new_lp.push_back(prep[gi][ri].new_lp);
                if (rc_.algo.beta > 0.0) loss_groups[gi].ref_lp.push_back(prep[gi][ri].ref_lp);
            }
        }
        auto loss = policy_loss(loss_groups, rc_.algo);

        TelemetryRow row;
        row.loss = -loss.objective;
        row.clip_fraction = loss.clip_fraction;
        row.mean_ratio = loss.mean_ratio;
        double esum = 0.0;
        int64_t ecount = 0;
        for (const auto& gp : prep)
            for (const auto& p : gp) {
                esum += p.entropy_sum;
                ecount += p.entropy_count;
            }
        row.entropy = ecount > 0 ? esum / static_cast<double>(ecount) : 0.0;

        if (!std::isfinite(loss.objective)) {
            nan_abort(step, row, "objective");
        }

        if (!grads_)
            grads_ = model::Gradients<Real>::zeros_like(params_,
                                                        has_adapters_ ? &adapters_ : nullptr);
        grads_->zero();
        model::BackwardOptions<Real> opts;
        opts.accumulate_base = rc_.mode != TrainMode::Lora;
        for (size_t gi = 0; gi < groups.size(); ++gi) {
            for (size_t ri = 0; ri < groups[gi].responses.size(); ++ri) {
                const auto& group = groups[gi];
                const auto& resp = group.responses[ri];
                auto& p = prep[gi][ri];
                const size_t plen = group.prompt.size();
                std::vector<double> w(p.full.size(), 0.0);
                std::vector<int> targets(p.full.size(), 0);
                bool any = false;
                for (size_t j = 0; j < resp.tokens.size(); ++j) {
                    const double wj = -loss.weights[gi][ri][j]; // minimize -J
                    w[plen - 1 + j] = wj;
                    targets[plen - 1 + j] = resp.tokens[j];
                    any = any || wj != 0.0;
                }
                if (!any) continue;
                auto dl = model::dlogits_weighted_logprob<Real>(p.tape, w, targets, temp);
                model::backward<Real>(p.tape, params_, has_adapters_ ? &adapters_ : nullptr, dl,
                                      *grads_, opts);
            }
        }
        const double gnorm = global_grad_norm(*grads_);
        if (!std::isfinite(gnorm)) nan_abort(step, row, "gradient");
        optimizer_step(params_, has_adapters_ ? &adapters_ : nullptr, *grads_, *adam_, rc_.algo,
                       rc_.mode != TrainMode::Lora);
        return row;
    }

    [[noreturn]] void nan_abort(int step, const TelemetryRow& row, const char* where) {
        nlohmann::json dump{{"type", "nan_abort"},
                            {"step", step},
                            {"where", where},
                            {"loss", detail::fmt_double(row.loss)},
                            {"mean_ratio", detail::fmt_double(row.mean_ratio)}};
        emit_event(dump);
        std::ofstream out(out_path("nan_dump.json"), std::ios::trunc);
        out << dump.dump(2) << "\n";
        telemetry_.flush();
        events_.flush();
        throw NanLoss("non-finite " + std::string(where) + " at step " + std::to_string(step));
    }

    RunConfig rc_;
    std::vector<tasks::CountdownInstance> dataset_, train_, test_;
    model::PolicyParams<Real> params_;
    model::PolicyParams<Real> ref_params_;
    model::LoraAdapter<Real> adapters_;
    bool has_adapters_ = false;
    ckpt::Checkpoint base_ckpt_;
    std::optional<AdamState<Real>> adam_;
    std::optional<model::Gradients<Real>> grads_;
    std::ofstream telemetry_;
    std::ofstream events_;
    TrainResult result_;
};

} // namespace rank1lab::rlvr
