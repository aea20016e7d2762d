// SPDX-License-Identifier: Apache-2.0
//
// Tiny decoder-only transformer with hand-written forward and backward
// passes. Parameter names mirror the q/k/v/o + gate/up/down convention so
// checkpoint-level spectra read like the usual per-layer reports. Everything
// is templated on the scalar type: float for the training path, double for
// gradient checks and analysis.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rank1lab/checkpoint.hpp"
#include "rank1lab/errors.hpp"
#include "rank1lab/rng.hpp"

namespace rank1lab::model {

struct ModelConfig {
    int vocab_size = 48;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 128;
    int max_seq_len = 64;
    std::string norm_type = "rmsnorm"; // or "layernorm" (scale-only)
    bool tied_head = false;
    uint64_t seed = 1;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
            max_seq_len < 1)
            throw ConfigError("model dimensions must be >= 1");
        if (d_model % n_heads != 0) throw ConfigError("d_model must divide by n_heads");
        if (head_dim() % 2 != 0) throw ConfigError("head_dim must be even (rotary pairs)");
        if (norm_type != "rmsnorm" && norm_type != "layernorm")
            throw ConfigError("norm_type must be rmsnorm or layernorm");
    }

    bool operator==(const ModelConfig&) const = default;

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size}, {"d_model", d_model},
                {"n_layers", n_layers},     {"n_heads", n_heads},
                {"d_ff", d_ff},             {"max_seq_len", max_seq_len},
                {"norm_type", norm_type},   {"tied_head", tied_head},
                {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.norm_type = j.at("norm_type").get<std::string>();
        c.tied_head = j.at("tied_head").get<bool>();
        c.seed = j.at("seed").get<uint64_t>();
        c.validate();
        return c;
    }

    std::string config_hash() const {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a(to_json().dump().c_str())));
        return buf;
    }
};

// ---------------------------------------------------------------------------
// parameter containers
// ---------------------------------------------------------------------------

template <typename Real>
struct NamedTensor {
    std::string name;
    int rows = 0;
    int cols = 0; // 0 marks a 1-D tensor of length rows
    std::vector<Real> data;

    bool is_matrix() const { return cols > 0; }
    size_t numel() const { return data.size(); }
};

template <typename Real>
struct ParamSet {
    std::vector<NamedTensor<Real>> tensors;
    std::map<std::string, int> index;

    NamedTensor<Real>& add(const std::string& name, int rows, int cols) {
        index[name] = static_cast<int>(tensors.size());
        NamedTensor<Real> t;
        t.name = name;
        t.rows = rows;
        t.cols = cols;
        t.data.assign(static_cast<size_t>(rows) * (cols > 0 ? cols : 1), Real(0));
        tensors.push_back(std::move(t));
        return tensors.back();
    }

    bool has(const std::string& name) const { return index.count(name) > 0; }

    NamedTensor<Real>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("no tensor named " + name);
        return tensors[it->second];
    }
    const NamedTensor<Real>& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("no tensor named " + name);
        return tensors[it->second];
    }

    void zero() {
        for (auto& t : tensors) std::fill(t.data.begin(), t.data.end(), Real(0));
    }

    static ParamSet zeros_like(const ParamSet& other) {
        ParamSet s;
        s.index = other.index;
        s.tensors.reserve(other.tensors.size());
        for (const auto& t : other.tensors) {
            NamedTensor<Real> z;
            z.name = t.name;
            z.rows = t.rows;
            z.cols = t.cols;
            z.data.assign(t.data.size(), Real(0));
            s.tensors.push_back(std::move(z));
        }
        return s;
    }
};

template <typename Real>
struct PolicyParams {
    ModelConfig cfg;
    ParamSet<Real> set;
};

inline std::string layer_name(int layer, const char* suffix) {
    return "layers." + std::to_string(layer) + "." + suffix;
}

template <typename Real>
PolicyParams<Real> init_params(const ModelConfig& cfg) {
    cfg.validate();
    PolicyParams<Real> p;
    p.cfg = cfg;
    const double init_std = 0.02;
    auto fill_normal = [&](NamedTensor<Real>& t, double std_dev) {
        auto rng = RngStream::from(cfg.seed, {fnv1a(t.name.c_str())});
        for (auto& v : t.data) v = static_cast<Real>(std_dev * rng.normal());
    };
    auto fill_ones = [](NamedTensor<Real>& t) {
        std::fill(t.data.begin(), t.data.end(), Real(1));
    };

    fill_normal(p.set.add("embed_tokens", cfg.vocab_size, cfg.d_model), init_std);
    for (int l = 0; l < cfg.n_layers; ++l) {
        fill_ones(p.set.add(layer_name(l, "input_norm"), cfg.d_model, 0));
        fill_normal(p.set.add(layer_name(l, "self_attn.q_proj"), cfg.d_model, cfg.d_model),
                    init_std);
        fill_normal(p.set.add(layer_name(l, "self_attn.k_proj"), cfg.d_model, cfg.d_model),
                    init_std);
        fill_normal(p.set.add(layer_name(l, "self_attn.v_proj"), cfg.d_model, cfg.d_model),
                    init_std);
        fill_normal(p.set.add(layer_name(l, "self_attn.o_proj"), cfg.d_model, cfg.d_model),
                    init_std);
        fill_ones(p.set.add(layer_name(l, "post_attn_norm"), cfg.d_model, 0));
        fill_normal(p.set.add(layer_name(l, "mlp.gate_proj"), cfg.d_ff, cfg.d_model), init_std);
        fill_normal(p.set.add(layer_name(l, "mlp.up_proj"), cfg.d_ff, cfg.d_model), init_std);
        fill_normal(p.set.add(layer_name(l, "mlp.down_proj"), cfg.d_model, cfg.d_ff), init_std);
    }
    fill_ones(p.set.add("final_norm", cfg.d_model, 0));
    if (!cfg.tied_head)
        fill_normal(p.set.add("lm_head", cfg.vocab_size, cfg.d_model), init_std);
    return p;
}

// ---------------------------------------------------------------------------
// rank-r adapters: effective weight W + alpha * A * B, A seeded normal and
// B zero so attaching an adapter is behavior-preserving.
// ---------------------------------------------------------------------------

template <typename Real>
struct LoraAdapter {
    struct Entry {
        std::string layer;
        int d_out = 0;
        int d_in = 0;
        std::vector<Real> a; // d_out x r
        std::vector<Real> b; // r x d_in
    };
    double alpha = 1.0;
    int r = 1;
    std::vector<Entry> entries;
    std::map<std::string, int> index;

    const Entry* find(const std::string& layer) const {
        auto it = index.find(layer);
        return it == index.end() ? nullptr : &entries[it->second];
    }
    Entry* find(const std::string& layer) {
        auto it = index.find(layer);
        return it == index.end() ? nullptr : &entries[it->second];
    }

    // alpha * A * B as a double matrix
    linalg::Matrix materialize(const Entry& e) const {
        linalg::Matrix m(e.d_out, e.d_in);
        for (int i = 0; i < e.d_out; ++i)
            for (int j = 0; j < e.d_in; ++j) {
                double acc = 0.0;
                for (int k = 0; k < r; ++k)
                    acc += static_cast<double>(e.a[static_cast<size_t>(i) * r + k]) *
                           static_cast<double>(e.b[static_cast<size_t>(k) * e.d_in + j]);
                m.at(i, j) = alpha * acc;
            }
        return m;
    }
};

template <typename Real>
LoraAdapter<Real> init_lora(const PolicyParams<Real>& params,
                            const std::vector<std::string>& target_patterns, int r,
                            double alpha, uint64_t seed) {
    if (r < 1) throw ConfigError("lora rank must be >= 1");
    LoraAdapter<Real> ad;
    ad.alpha = alpha;
    ad.r = r;
    for (const auto& t : params.set.tensors) {
        if (!t.is_matrix() || t.name == "embed_tokens" || t.name == "lm_head") continue;
        if (!ckpt::matches_any(target_patterns, t.name)) continue;
        typename LoraAdapter<Real>::Entry e;
        e.layer = t.name;
        e.d_out = t.rows;
        e.d_in = t.cols;
        e.a.resize(static_cast<size_t>(e.d_out) * r);
        e.b.assign(static_cast<size_t>(r) * e.d_in, Real(0));
        auto rng = RngStream::from(seed, {fnv1a((t.name + ".lora_A").c_str())});
        for (auto& v : e.a) v = static_cast<Real>(0.02 * rng.normal());
        ad.index[e.layer] = static_cast<int>(ad.entries.size());
        ad.entries.push_back(std::move(e));
    }
    return ad;
}

// ---------------------------------------------------------------------------
// activation tape
// ---------------------------------------------------------------------------

template <typename Real>
struct Tape {
    ModelConfig cfg;
    std::vector<int> tokens;
    int len = 0;
    bool logits_all = false;

    std::vector<Real> x0; // len x d

    struct LayerTape {
        std::vector<Real> ln1_out, ln1_rstd, ln1_mean;
        std::vector<Real> q, k, v; // len x d, q/k post-rotation
        std::vector<Real> probs;   // heads x len x len, causal-masked
        std::vector<Real> ctx;     // len x d
        std::vector<Real> x_mid;   // len x d
        std::vector<Real> ln2_out, ln2_rstd, ln2_mean;
        std::vector<Real> gate, up, act; // len x d_ff
        std::vector<Real> x_out;         // len x d
    };
    std::vector<LayerTape> layers;

    std::vector<Real> fnorm_out, fnorm_rstd, fnorm_mean;
    std::vector<Real> logits; // len x V when logits_all, else V
    std::vector<Real> rope_cos, rope_sin; // len x head_dim/2
};

// records (layer input x_t, output gradient g_t) pairs for chosen layers
struct LinearProbe {
    std::vector<std::string> wanted;
    struct Record {
        std::vector<std::vector<double>> xs;
        std::vector<std::vector<double>> gs;
    };
    std::map<std::string, Record> records;

    bool wants(const std::string& name) const {
        return std::find(wanted.begin(), wanted.end(), name) != wanted.end();
    }
};

namespace detail {

// y = W x  (W row-major rows x cols)
template <typename Real>
inline void matvec(const Real* w, int rows, int cols, const Real* x, Real* y) {
    for (int i = 0; i < rows; ++i) {
        const Real* row = w + static_cast<size_t>(i) * cols;
        Real acc = Real(0);
        for (int j = 0; j < cols; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
}

// y += W^T g
template <typename Real>
inline void matvec_t_add(const Real* w, int rows, int cols, const Real* g, Real* y) {
    for (int i = 0; i < rows; ++i) {
        const Real gi = g[i];
        if (gi == Real(0)) continue;
        const Real* row = w + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) y[j] += row[j] * gi;
    }
}

// W += g x^T
template <typename Real>
inline void outer_add(Real* w, int rows, int cols, const Real* g, const Real* x) {
    for (int i = 0; i < rows; ++i) {
        const Real gi = g[i];
        if (gi == Real(0)) continue;
        Real* row = w + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) row[j] += gi * x[j];
    }
}

template <typename Real>
inline void rmsnorm_fwd(const Real* x, const Real* w, int d, Real* out, Real* rstd) {
    Real ms = Real(0);
    for (int i = 0; i < d; ++i) ms += x[i] * x[i];
    ms = ms / Real(d) + Real(1e-6);
    const Real r = Real(1) / std::sqrt(ms);
    for (int i = 0; i < d; ++i) out[i] = w[i] * x[i] * r;
    *rstd = r;
}

// dx += backprop of rmsnorm; dw accumulates the scale gradient
template <typename Real>
inline void rmsnorm_bwd(const Real* x, const Real* w, Real rstd, const Real* dout, int d,
                        Real* dx, Real* dw) {
    Real dot = Real(0);
    for (int i = 0; i < d; ++i) {
        const Real xhat = x[i] * rstd;
        dw[i] += dout[i] * xhat;
        dot += dout[i] * w[i] * xhat;
    }
    dot /= Real(d);
    for (int i = 0; i < d; ++i) {
        const Real g = dout[i] * w[i];
        dx[i] += rstd * (g - x[i] * rstd * dot);
    }
}

template <typename Real>
inline void layernorm_fwd(const Real* x, const Real* w, int d, Real* out, Real* rstd,
                          Real* mean) {
    Real mu = Real(0);
    for (int i = 0; i < d; ++i) mu += x[i];
    mu /= Real(d);
    Real var = Real(0);
    for (int i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= Real(d);
    const Real r = Real(1) / std::sqrt(var + Real(1e-6));
    for (int i = 0; i < d; ++i) out[i] = w[i] * (x[i] - mu) * r;
    *rstd = r;
    *mean = mu;
}

template <typename Real>
inline void layernorm_bwd(const Real* x, const Real* w, Real rstd, Real mean,
                          const Real* dout, int d, Real* dx, Real* dw) {
    Real gsum = Real(0), gxsum = Real(0);
    for (int i = 0; i < d; ++i) {
        const Real xhat = (x[i] - mean) * rstd;
        dw[i] += dout[i] * xhat;
        const Real g = dout[i] * w[i];
        gsum += g;
        gxsum += g * xhat;
    }
    gsum /= Real(d);
    gxsum /= Real(d);
    for (int i = 0; i < d; ++i) {
        const Real xhat = (x[i] - mean) * rstd;
        const Real g = dout[i] * w[i];
        dx[i] += rstd * (g - gsum - xhat * gxsum);
    }
}

template <typename Real>
inline Real silu(Real z) {
    return z / (Real(1) + std::exp(-z));
}

template <typename Real>
inline Real silu_grad(Real z) {
    const Real s = Real(1) / (Real(1) + std::exp(-z));
    return s * (Real(1) + z * (Real(1) - s));
}

// adapter contribution y += alpha * A (B x)
template <typename Real>
inline void lora_fwd_add(const typename LoraAdapter<Real>::Entry& e, int r, Real alpha,
                         const Real* x, Real* y) {
    for (int k = 0; k < r; ++k) {
        const Real* brow = e.b.data() + static_cast<size_t>(k) * e.d_in;
        Real acc = Real(0);
        for (int j = 0; j < e.d_in; ++j) acc += brow[j] * x[j];
        acc *= alpha;
        const Real* acol = e.a.data() + k; // stride r
        for (int i = 0; i < e.d_out; ++i) y[i] += acol[static_cast<size_t>(i) * r] * acc;
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <typename Real>
void forward(const PolicyParams<Real>& params, const LoraAdapter<Real>* adapters,
             std::span<const int> tokens, Tape<Real>& tape, bool logits_all) {
    const ModelConfig& cfg = params.cfg;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int dff = cfg.d_ff;
    const int V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int half = hd / 2;

    if (T < 1) throw SequenceTooLong("empty token sequence");
    if (T > cfg.max_seq_len) throw SequenceTooLong("sequence exceeds max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= V) throw TokenOutOfRange("token id " + std::to_string(t));

    tape.cfg = cfg;
    tape.tokens.assign(tokens.begin(), tokens.end());
    tape.len = T;
    tape.logits_all = logits_all;
    tape.layers.resize(cfg.n_layers);

    const bool rms = cfg.norm_type == "rmsnorm";
    const Real inv_sqrt_hd = Real(1) / std::sqrt(Real(hd));

    // rotary tables, adjacent-pair convention, base 10000
    tape.rope_cos.resize(static_cast<size_t>(T) * half);
    tape.rope_sin.resize(static_cast<size_t>(T) * half);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < half; ++i) {
            const double theta =
                t * std::pow(10000.0, -2.0 * static_cast<double>(i) / hd);
            tape.rope_cos[static_cast<size_t>(t) * half + i] = static_cast<Real>(std::cos(theta));
            tape.rope_sin[static_cast<size_t>(t) * half + i] = static_cast<Real>(std::sin(theta));
        }

    const auto& embed = params.set.at("embed_tokens");
    tape.x0.resize(static_cast<size_t>(T) * d);
    for (int t = 0; t < T; ++t)
        std::copy_n(embed.data.data() + static_cast<size_t>(tokens[t]) * d, d,
                    tape.x0.data() + static_cast<size_t>(t) * d);

    const Real* x_in = tape.x0.data();
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lt = tape.layers[l];
        lt.ln1_out.resize(static_cast<size_t>(T) * d);
        lt.ln1_rstd.resize(T);
        lt.ln1_mean.resize(rms ? 0 : T);
        lt.q.resize(static_cast<size_t>(T) * d);
        lt.k.resize(static_cast<size_t>(T) * d);
        lt.v.resize(static_cast<size_t>(T) * d);
        lt.probs.assign(static_cast<size_t>(H) * T * T, Real(0));
        lt.ctx.resize(static_cast<size_t>(T) * d);
        lt.x_mid.resize(static_cast<size_t>(T) * d);
        lt.ln2_out.resize(static_cast<size_t>(T) * d);
        lt.ln2_rstd.resize(T);
        lt.ln2_mean.resize(rms ? 0 : T);
        lt.gate.resize(static_cast<size_t>(T) * dff);
        lt.up.resize(static_cast<size_t>(T) * dff);
        lt.act.resize(static_cast<size_t>(T) * dff);
        lt.x_out.resize(static_cast<size_t>(T) * d);

        const auto& norm1 = params.set.at(layer_name(l, "input_norm"));
        const auto& wq = params.set.at(layer_name(l, "self_attn.q_proj"));
        const auto& wk = params.set.at(layer_name(l, "self_attn.k_proj"));
        const auto& wv = params.set.at(layer_name(l, "self_attn.v_proj"));
        const auto& wo = params.set.at(layer_name(l, "self_attn.o_proj"));
        const auto& norm2 = params.set.at(layer_name(l, "post_attn_norm"));
        const auto& wg = params.set.at(layer_name(l, "mlp.gate_proj"));
        const auto& wu = params.set.at(layer_name(l, "mlp.up_proj"));
        const auto& wd = params.set.at(layer_name(l, "mlp.down_proj"));

        const typename LoraAdapter<Real>::Entry* aq = nullptr;
        const typename LoraAdapter<Real>::Entry* ak = nullptr;
        const typename LoraAdapter<Real>::Entry* av = nullptr;
        const typename LoraAdapter<Real>::Entry* ao = nullptr;
        const typename LoraAdapter<Real>::Entry* ag = nullptr;
        const typename LoraAdapter<Real>::Entry* au = nullptr;
        const typename LoraAdapter<Real>::Entry* ad_ = nullptr;
        Real alpha = Real(0);
        int r = 0;
        if (adapters) {
            alpha = static_cast<Real>(adapters->alpha);
            r = adapters->r;
            aq = adapters->find(layer_name(l, "self_attn.q_proj"));
            ak = adapters->find(layer_name(l, "self_attn.k_proj"));
            av = adapters->find(layer_name(l, "self_attn.v_proj"));
            ao = adapters->find(layer_name(l, "self_attn.o_proj"));
            ag = adapters->find(layer_name(l, "mlp.gate_proj"));
            au = adapters->find(layer_name(l, "mlp.up_proj"));
            ad_ = adapters->find(layer_name(l, "mlp.down_proj"));
        }

        // norm + q/k/v projections + rotation
        for (int t = 0; t < T; ++t) {
            const Real* x = x_in + static_cast<size_t>(t) * d;
            Real* a = lt.ln1_out.data() + static_cast<size_t>(t) * d;
            if (rms)
                detail::rmsnorm_fwd(x, norm1.data.data(), d, a, &lt.ln1_rstd[t]);
            else
                detail::layernorm_fwd(x, norm1.data.data(), d, a, &lt.ln1_rstd[t],
                                      &lt.ln1_mean[t]);
            Real* q = lt.q.data() + static_cast<size_t>(t) * d;
            Real* k = lt.k.data() + static_cast<size_t>(t) * d;
            Real* v = lt.v.data() + static_cast<size_t>(t) * d;
            detail::matvec(wq.data.data(), d, d, a, q);
            detail::matvec(wk.data.data(), d, d, a, k);
            detail::matvec(wv.data.data(), d, d, a, v);
            if (aq) detail::lora_fwd_add<Real>(*aq, r, alpha, a, q);
            if (ak) detail::lora_fwd_add<Real>(*ak, r, alpha, a, k);
            if (av) detail::lora_fwd_add<Real>(*av, r, alpha, a, v);
            const Real* cosr = tape.rope_cos.data() + static_cast<size_t>(t) * half;
            const Real* sinr = tape.rope_sin.data() + static_cast<size_t>(t) * half;
            for (int h = 0; h < H; ++h) {
                Real* qh = q + h * hd;
                Real* kh = k + h * hd;
                for (int i = 0; i < half; ++i) {
                    const Real c = cosr[i], s = sinr[i];
                    const Real q0 = qh[2 * i], q1 = qh[2 * i + 1];
                    qh[2 * i] = q0 * c - q1 * s;
                    qh[2 * i + 1] = q0 * s + q1 * c;
                    const Real k0 = kh[2 * i], k1 = kh[2 * i + 1];
                    kh[2 * i] = k0 * c - k1 * s;
                    kh[2 * i + 1] = k0 * s + k1 * c;
                }
            }
        }

        // causal attention
        std::vector<Real> scores;
        for (int t = 0; t < T; ++t) {
            const Real* q = lt.q.data() + static_cast<size_t>(t) * d;
            Real* ctx = lt.ctx.data() + static_cast<size_t>(t) * d;
            for (int h = 0; h < H; ++h) {
                const Real* qh = q + h * hd;
                scores.assign(t + 1, Real(0));
                Real smax = -std::numeric_limits<Real>::infinity();
                for (int j = 0; j <= t; ++j) {
                    const Real* kh = lt.k.data() + static_cast<size_t>(j) * d + h * hd;
                    Real acc = Real(0);
                    for (int i = 0; i < hd; ++i) acc += qh[i] * kh[i];
                    acc *= inv_sqrt_hd;
                    scores[j] = acc;
                    smax = std::max(smax, acc);
                }
                Real denom = Real(0);
                for (int j = 0; j <= t; ++j) {
                    scores[j] = std::exp(scores[j] - smax);
                    denom += scores[j];
                }
                Real* prow =
                    lt.probs.data() + (static_cast<size_t>(h) * T + t) * T;
                for (int j = 0; j <= t; ++j) prow[j] = scores[j] / denom;
                Real* ctxh = ctx + h * hd;
                std::fill_n(ctxh, hd, Real(0));
                for (int j = 0; j <= t; ++j) {
                    const Real p = prow[j];
                    const Real* vh = lt.v.data() + static_cast<size_t>(j) * d + h * hd;
                    for (int i = 0; i < hd; ++i) ctxh[i] += p * vh[i];
                }
            }
        }

        // o-projection + residual, then the mlp
        for (int t = 0; t < T; ++t) {
            const Real* ctx = lt.ctx.data() + static_cast<size_t>(t) * d;
            Real* xm = lt.x_mid.data() + static_cast<size_t>(t) * d;
            detail::matvec(wo.data.data(), d, d, ctx, xm);
            if (ao) detail::lora_fwd_add<Real>(*ao, r, alpha, ctx, xm);
            const Real* x = x_in + static_cast<size_t>(t) * d;
            for (int i = 0; i < d; ++i) xm[i] += x[i];

            Real* b = lt.ln2_out.data() + static_cast<size_t>(t) * d;
            if (rms)
                detail::rmsnorm_fwd(xm, norm2.data.data(), d, b, &lt.ln2_rstd[t]);
            else
                detail::layernorm_fwd(xm, norm2.data.data(), d, b, &lt.ln2_rstd[t],
                                      &lt.ln2_mean[t]);
            Real* gate = lt.gate.data() + static_cast<size_t>(t) * dff;
            Real* up = lt.up.data() + static_cast<size_t>(t) * dff;
            Real* act = lt.act.data() + static_cast<size_t>(t) * dff;
            detail::matvec(wg.data.data(), dff, d, b, gate);
            detail::matvec(wu.data.data(), dff, d, b, up);
            if (ag) detail::lora_fwd_add<Real>(*ag, r, alpha, b, gate);
            if (au) detail::lora_fwd_add<Real>(*au, r, alpha, b, up);
            for (int i = 0; i < dff; ++i) act[i] = detail::silu(gate[i]) * up[i];
            Real* xo = lt.x_out.data() + static_cast<size_t>(t) * d;
            detail::matvec(wd.data.data(), d, dff, act, xo);
            if (ad_) detail::lora_fwd_add<Real>(*ad_, r, alpha, act, xo);
            for (int i = 0; i < d; ++i) xo[i] += xm[i];
        }
        x_in = lt.x_out.data();
    }

    // final norm + head
    const auto& fnorm = params.set.at("final_norm");
    const auto& head = params.set.at(cfg.tied_head ? "embed_tokens" : "lm_head");
    tape.fnorm_out.resize(static_cast<size_t>(T) * d);
    tape.fnorm_rstd.resize(T);
    tape.fnorm_mean.resize(rms ? 0 : T);
    tape.logits.resize(logits_all ? static_cast<size_t>(T) * V : static_cast<size_t>(V));
    for (int t = 0; t < T; ++t) {
        const Real* x = x_in + static_cast<size_t>(t) * d;
        Real* f = tape.fnorm_out.data() + static_cast<size_t>(t) * d;
        if (rms)
            detail::rmsnorm_fwd(x, fnorm.data.data(), d, f, &tape.fnorm_rstd[t]);
        else
            detail::layernorm_fwd(x, fnorm.data.data(), d, f, &tape.fnorm_rstd[t],
                                  &tape.fnorm_mean[t]);
        if (logits_all)
            detail::matvec(head.data.data(), V, d, f,
                           tape.logits.data() + static_cast<size_t>(t) * V);
        else if (t == T - 1)
            detail::matvec(head.data.data(), V, d, f, tape.logits.data());
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename Real>
struct Gradients {
    ParamSet<Real> base;
    std::vector<std::vector<Real>> lora_a; // aligned with adapter entries
    std::vector<std::vector<Real>> lora_b;

    static Gradients zeros_like(const PolicyParams<Real>& params,
                                const LoraAdapter<Real>* adapters) {
        Gradients g;
        g.base = ParamSet<Real>::zeros_like(params.set);
        if (adapters) {
            for (const auto& e : adapters->entries) {
                g.lora_a.emplace_back(e.a.size(), Real(0));
                g.lora_b.emplace_back(e.b.size(), Real(0));
            }
        }
        return g;
    }

    void zero() {
        base.zero();
        for (auto& v : lora_a) std::fill(v.begin(), v.end(), Real(0));
        for (auto& v : lora_b) std::fill(v.begin(), v.end(), Real(0));
    }
};

template <typename Real>
struct BackwardOptions {
    bool accumulate_base = true; // false when only adapters train
    LinearProbe* probe = nullptr;
};

namespace detail {

// adapter backward:
//   dA += alpha * g (B x)^T,  dB += alpha * (A^T g) x^T,  dx += alpha B^T A^T g
template <typename Real>
inline void lora_bwd(const typename LoraAdapter<Real>::Entry& e, int r, Real alpha,
                     const Real* x, const Real* g, std::vector<Real>& da,
                     std::vector<Real>& db, Real* dx) {
    for (int k = 0; k < r; ++k) {
        const Real* brow = e.b.data() + static_cast<size_t>(k) * e.d_in;
        Real bx = Real(0);
        for (int j = 0; j < e.d_in; ++j) bx += brow[j] * x[j];
        Real atg = Real(0);
        for (int i = 0; i < e.d_out; ++i) atg += e.a[static_cast<size_t>(i) * r + k] * g[i];
        const Real abx = alpha * bx;
        for (int i = 0; i < e.d_out; ++i) da[static_cast<size_t>(i) * r + k] += g[i] * abx;
        const Real aatg = alpha * atg;
        Real* dbrow = db.data() + static_cast<size_t>(k) * e.d_in;
        for (int j = 0; j < e.d_in; ++j) {
            dbrow[j] += aatg * x[j];
            dx[j] += aatg * brow[j];
        }
    }
}

inline void probe_record(LinearProbe* probe, const std::string& name, const float* x, int nx,
                         const float* g, int ng) {
    auto& rec = probe->records[name];
    rec.xs.emplace_back(x, x + nx);
    rec.gs.emplace_back(g, g + ng);
}
inline void probe_record(LinearProbe* probe, const std::string& name, const double* x, int nx,
                         const double* g, int ng) {
    auto& rec = probe->records[name];
    rec.xs.emplace_back(x, x + nx);
    rec.gs.emplace_back(g, g + ng);
}

} // namespace detail

// Accumulates into grads; dlogits has T x V entries (the tape must have been
// built with logits_all).
template <typename Real>
void backward(const Tape<Real>& tape, const PolicyParams<Real>& params,
              const LoraAdapter<Real>* adapters, std::span<const Real> dlogits,
              Gradients<Real>& grads, const BackwardOptions<Real>& opts = {}) {
    const ModelConfig& cfg = params.cfg;
    if (!(tape.cfg == cfg)) throw TapeMismatch("tape was built with a different config");
    if (!tape.logits_all) throw TapeMismatch("backward needs a tape with logits at all positions");
    const int T = tape.len;
    const int d = cfg.d_model;
    const int dff = cfg.d_ff;
    const int V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int half = hd / 2;
    if (static_cast<int>(dlogits.size()) != T * V)
        throw TapeMismatch("dlogits size does not match tape");
    if (adapters && (grads.lora_a.size() != adapters->entries.size()))
        throw TapeMismatch("gradient buffers do not match adapters");

    const bool rms = cfg.norm_type == "rmsnorm";
    const Real inv_sqrt_hd = Real(1) / std::sqrt(Real(hd));
    const bool base_grads = opts.accumulate_base;
    LinearProbe* probe = opts.probe;

    const auto& fnorm = params.set.at("final_norm");
    const std::string head_name = cfg.tied_head ? "embed_tokens" : "lm_head";
    const auto& head = params.set.at(head_name);
    auto& dhead = grads.base.at(head_name);
    auto& dfnorm = grads.base.at("final_norm");

    // head + final norm
    std::vector<Real> dresid(static_cast<size_t>(T) * d, Real(0));
    {
        const Real* x_last =
            cfg.n_layers > 0 ? tape.layers[cfg.n_layers - 1].x_out.data() : tape.x0.data();
        std::vector<Real> df(d);
        for (int t = 0; t < T; ++t) {
            const Real* dl = dlogits.data() + static_cast<size_t>(t) * V;
            bool all_zero = true;
            for (int i = 0; i < V; ++i)
                if (dl[i] != Real(0)) {
                    all_zero = false;
                    break;
                }
            if (all_zero) continue;
            const Real* f = tape.fnorm_out.data() + static_cast<size_t>(t) * d;
            if (base_grads || cfg.tied_head)
                detail::outer_add(dhead.data.data(), V, d, dl, f);
            std::fill(df.begin(), df.end(), Real(0));
            detail::matvec_t_add(head.data.data(), V, d, dl, df.data());
            if (probe && probe->wants(head_name))
                detail::probe_record(probe, head_name, f, d, dl, V);
            const Real* x = x_last + static_cast<size_t>(t) * d;
            Real* dx = dresid.data() + static_cast<size_t>(t) * d;
            if (rms)
                detail::rmsnorm_bwd(x, fnorm.data.data(), tape.fnorm_rstd[t], df.data(), d, dx,
                                    dfnorm.data.data());
            else
                detail::layernorm_bwd(x, fnorm.data.data(), tape.fnorm_rstd[t],
                                      tape.fnorm_mean[t], df.data(), d, dx,
                                      dfnorm.data.data());
        }
    }

    std::vector<Real> da_buf(static_cast<size_t>(T) * d);
    std::vector<Real> dq(static_cast<size_t>(T) * d), dk(static_cast<size_t>(T) * d),
        dv(static_cast<size_t>(T) * d), dctx(static_cast<size_t>(T) * d);
    std::vector<Real> dgate(dff), dup(dff), dact(dff), db_vec(d), dxm(d);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lt = tape.layers[l];
        const Real* x_in = l == 0 ? tape.x0.data() : tape.layers[l - 1].x_out.data();

        const auto& norm1 = params.set.at(layer_name(l, "input_norm"));
        const auto& wq = params.set.at(layer_name(l, "self_attn.q_proj"));
        const auto& wk = params.set.at(layer_name(l, "self_attn.k_proj"));
        const auto& wv = params.set.at(layer_name(l, "self_attn.v_proj"));
        const auto& wo = params.set.at(layer_name(l, "self_attn.o_proj"));
        const auto& norm2 = params.set.at(layer_name(l, "post_attn_norm"));
        const auto& wg = params.set.at(layer_name(l, "mlp.gate_proj"));
        const auto& wu = params.set.at(layer_name(l, "mlp.up_proj"));
        const auto& wd = params.set.at(layer_name(l, "mlp.down_proj"));
        auto& dnorm1 = grads.base.at(layer_name(l, "input_norm"));
        auto& dwq = grads.base.at(layer_name(l, "self_attn.q_proj"));
        auto& dwk = grads.base.at(layer_name(l, "self_attn.k_proj"));
        auto& dwv = grads.base.at(layer_name(l, "self_attn.v_proj"));
        auto& dwo = grads.base.at(layer_name(l, "self_attn.o_proj"));
        auto& dnorm2 = grads.base.at(layer_name(l, "post_attn_norm"));
        auto& dwg = grads.base.at(layer_name(l, "mlp.gate_proj"));
        auto& dwu = grads.base.at(layer_name(l, "mlp.up_proj"));
        auto& dwd = grads.base.at(layer_name(l, "mlp.down_proj"));

        const typename LoraAdapter<Real>::Entry* aq = nullptr;
        const typename LoraAdapter<Real>::Entry* ak = nullptr;
        const typename LoraAdapter<Real>::Entry* av = nullptr;
        const typename LoraAdapter<Real>::Entry* ao = nullptr;
        const typename LoraAdapter<Real>::Entry* ag = nullptr;
        const typename LoraAdapter<Real>::Entry* au = nullptr;
        const typename LoraAdapter<Real>::Entry* ad_ = nullptr;
        Real alpha = Real(0);
        int r = 0;
        auto lora_slot = [&](const typename LoraAdapter<Real>::Entry* e) {
            return static_cast<size_t>(e - adapters->entries.data());
        };
        if (adapters) {
            alpha = static_cast<Real>(adapters->alpha);
            r = adapters->r;
            aq = adapters->find(layer_name(l, "self_attn.q_proj"));
            ak = adapters->find(layer_name(l, "self_attn.k_proj"));
            av = adapters->find(layer_name(l, "self_attn.v_proj"));
            ao = adapters->find(layer_name(l, "self_attn.o_proj"));
            ag = adapters->find(layer_name(l, "mlp.gate_proj"));
            au = adapters->find(layer_name(l, "mlp.up_proj"));
            ad_ = adapters->find(layer_name(l, "mlp.down_proj"));
        }

        // mlp backward; dresid currently holds d(x_out)
        for (int t = 0; t < T; ++t) {
            Real* dxo = dresid.data() + static_cast<size_t>(t) * d;
            const Real* act = lt.act.data() + static_cast<size_t>(t) * dff;
            const Real* gate = lt.gate.data() + static_cast<size_t>(t) * dff;
            const Real* up = lt.up.data() + static_cast<size_t>(t) * dff;
            const Real* b = lt.ln2_out.data() + static_cast<size_t>(t) * d;
            const Real* xm = lt.x_mid.data() + static_cast<size_t>(t) * d;

            std::fill(dact.begin(), dact.end(), Real(0));
            if (base_grads) detail::outer_add(dwd.data.data(), d, dff, dxo, act);
            detail::matvec_t_add(wd.data.data(), d, dff, dxo, dact.data());
            if (probe && probe->wants(wd.name))
                detail::probe_record(probe, wd.name, act, dff, dxo, d);
            if (ad_)
                detail::lora_bwd<Real>(*ad_, r, alpha, act, dxo, grads.lora_a[lora_slot(ad_)],
                                       grads.lora_b[lora_slot(ad_)], dact.data());

            for (int i = 0; i < dff; ++i) {
                const Real s = detail::silu(gate[i]);
                dup[i] = dact[i] * s;
                dgate[i] = dact[i] * up[i] * detail::silu_grad(gate[i]);
            }
            std::fill(db_vec.begin(), db_vec.end(), Real(0));
            if (base_grads) {
                detail::outer_add(dwg.data.data(), dff, d, dgate.data(), b);
                detail::outer_add(dwu.data.data(), dff, d, dup.data(), b);
            }
            detail::matvec_t_add(wg.data.data(), dff, d, dgate.data(), db_vec.data());
            detail::matvec_t_add(wu.data.data(), dff, d, dup.data(), db_vec.data());
            if (probe && probe->wants(wg.name))
                detail::probe_record(probe, wg.name, b, d, dgate.data(), dff);
            if (probe && probe->wants(wu.name))
                detail::probe_record(probe, wu.name, b, d, dup.data(), dff);
            if (ag)
                detail::lora_bwd<Real>(*ag, r, alpha, b, dgate.data(),
                                       grads.lora_a[lora_slot(ag)], grads.lora_b[lora_slot(ag)],
                                       db_vec.data());
            if (au)
                detail::lora_bwd<Real>(*au, r, alpha, b, dup.data(), grads.lora_a[lora_slot(au)],
                                       grads.lora_b[lora_slot(au)], db_vec.data());

            // norm2 backward lands in dxm, then the residual path adds dxo
            std::fill(dxm.begin(), dxm.end(), Real(0));
            if (rms)
                detail::rmsnorm_bwd(xm, norm2.data.data(), lt.ln2_rstd[t], db_vec.data(), d,
                                    dxm.data(), dnorm2.data.data());
            else
                detail::layernorm_bwd(xm, norm2.data.data(), lt.ln2_rstd[t], lt.ln2_mean[t],
                                      db_vec.data(), d, dxm.data(), dnorm2.data.data());
            for (int i = 0; i < d; ++i) dxo[i] += dxm[i]; // dresid row now holds d(x_mid)
        }

        // attention backward; dresid holds d(x_mid)
        std::fill(dq.begin(), dq.end(), Real(0));
        std::fill(dk.begin(), dk.end(), Real(0));
        std::fill(dv.begin(), dv.end(), Real(0));
        std::fill(dctx.begin(), dctx.end(), Real(0));
        for (int t = 0; t < T; ++t) {
            const Real* dxm_row = dresid.data() + static_cast<size_t>(t) * d;
            const Real* ctx = lt.ctx.data() + static_cast<size_t>(t) * d;
            Real* dctx_row = dctx.data() + static_cast<size_t>(t) * d;
            if (base_grads) detail::outer_add(dwo.data.data(), d, d, dxm_row, ctx);
            detail::matvec_t_add(wo.data.data(), d, d, dxm_row, dctx_row);
            if (probe && probe->wants(wo.name))
                detail::probe_record(probe, wo.name, ctx, d, dxm_row, d);
            if (ao)
                detail::lora_bwd<Real>(*ao, r, alpha, ctx, dxm_row,
                                       grads.lora_a[lora_slot(ao)], grads.lora_b[lora_slot(ao)],
                                       dctx_row);
        }
        std::vector<Real> dprow(T);
        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < H; ++h) {
                const Real* dctxh = dctx.data() + static_cast<size_t>(t) * d + h * hd;
                const Real* prow = lt.probs.data() + (static_cast<size_t>(h) * T + t) * T;
                Real dot_pp = Real(0);
                for (int j = 0; j <= t; ++j) {
                    const Real* vh = lt.v.data() + static_cast<size_t>(j) * d + h * hd;
                    Real acc = Real(0);
                    for (int i = 0; i < hd; ++i) acc += dctxh[i] * vh[i];
                    dprow[j] = acc;
                    dot_pp += prow[j] * acc;
                }
                for (int j = 0; j <= t; ++j) {
                    const Real p = prow[j];
                    if (p == Real(0)) continue;
                    Real* dvh = dv.data() + static_cast<size_t>(j) * d + h * hd;
                    for (int i = 0; i < hd; ++i) dvh[i] += p * dctxh[i];
                    const Real ds = p * (dprow[j] - dot_pp) * inv_sqrt_hd;
                    if (ds == Real(0)) continue;
                    const Real* kh = lt.k.data() + static_cast<size_t>(j) * d + h * hd;
                    const Real* qh = lt.q.data() + static_cast<size_t>(t) * d + h * hd;
                    Real* dqh = dq.data() + static_cast<size_t>(t) * d + h * hd;
                    Real* dkh = dk.data() + static_cast<size_t>(j) * d + h * hd;
                    for (int i = 0; i < hd; ++i) {
                        dqh[i] += ds * kh[i];
                        dkh[i] += ds * qh[i];
                    }
                }
            }
        }
        // un-rotate dq/dk, project through q/k/v, then norm1
        for (int t = 0; t < T; ++t) {
            Real* dqr = dq.data() + static_cast<size_t>(t) * d;
            Real* dkr = dk.data() + static_cast<size_t>(t) * d;
            const Real* cosr = tape.rope_cos.data() + static_cast<size_t>(t) * half;
            const Real* sinr = tape.rope_sin.data() + static_cast<size_t>(t) * half;
            for (int h = 0; h < H; ++h) {
                Real* dqh = dqr + h * hd;
                Real* dkh = dkr + h * hd;
                for (int i = 0; i < half; ++i) {
                    const Real c = cosr[i], s = sinr[i];
                    const Real a0 = dqh[2 * i], a1 = dqh[2 * i + 1];
                    dqh[2 * i] = a0 * c + a1 * s;
                    dqh[2 * i + 1] = -a0 * s + a1 * c;
                    const Real b0 = dkh[2 * i], b1 = dkh[2 * i + 1];
                    dkh[2 * i] = b0 * c + b1 * s;
                    dkh[2 * i + 1] = -b0 * s + b1 * c;
                }
            }
            const Real* a = lt.ln1_out.data() + static_cast<size_t>(t) * d;
            const Real* dvr = dv.data() + static_cast<size_t>(t) * d;
            Real* da = da_buf.data() + static_cast<size_t>(t) * d;
            std::fill_n(da, d, Real(0));
            if (base_grads) {
                detail::outer_add(dwq.data.data(), d, d, dqr, a);
                detail::outer_add(dwk.data.data(), d, d, dkr, a);
                detail::outer_add(dwv.data.data(), d, d, dvr, a);
            }
            detail::matvec_t_add(wq.data.data(), d, d, dqr, da);
            detail::matvec_t_add(wk.data.data(), d, d, dkr, da);
            detail::matvec_t_add(wv.data.data(), d, d, dvr, da);
            if (probe && probe->wants(wq.name))
                detail::probe_record(probe, wq.name, a, d, dqr, d);
            if (probe && probe->wants(wk.name))
                detail::probe_record(probe, wk.name, a, d, dkr, d);
            if (probe && probe->wants(wv.name))
                detail::probe_record(probe, wv.name, a, d, dvr, d);
            if (aq)
                detail::lora_bwd<Real>(*aq, r, alpha, a, dqr, grads.lora_a[lora_slot(aq)],
                                       grads.lora_b[lora_slot(aq)], da);
            if (ak)
                detail::lora_bwd<Real>(*ak, r, alpha, a, dkr, grads.lora_a[lora_slot(ak)],
                                       grads.lora_b[lora_slot(ak)], da);
            if (av)
                detail::lora_bwd<Real>(*av, r, alpha, a, dvr, grads.lora_a[lora_slot(av)],
                                       grads.lora_b[lora_slot(av)], da);

            const Real* x = x_in + static_cast<size_t>(t) * d;
            Real* dx = dresid.data() + static_cast<size_t>(t) * d; // becomes d(x_in)
            if (rms)
                detail::rmsnorm_bwd(x, norm1.data.data(), lt.ln1_rstd[t], da, d, dx,
                                    dnorm1.data.data());
            else
                detail::layernorm_bwd(x, norm1.data.data(), lt.ln1_rstd[t], lt.ln1_mean[t], da,
                                      d, dx, dnorm1.data.data());
        }
    }

    if (base_grads || cfg.tied_head) {
        auto& dembed = grads.base.at("embed_tokens");
        for (int t = 0; t < T; ++t) {
            const Real* dx = dresid.data() + static_cast<size_t>(t) * d;
            Real* row = dembed.data.data() + static_cast<size_t>(tape.tokens[t]) * d;
            for (int i = 0; i < d; ++i) row[i] += dx[i];
        }
    }
}

// ---------------------------------------------------------------------------
// objective helpers
// ---------------------------------------------------------------------------

// log softmax(logits/temperature) at target, computed in double
template <typename Real>
double logprob_at(std::span<const Real> logits_row, int target, double temperature = 1.0) {
    double maxv = -std::numeric_limits<double>::infinity();
    for (Real v : logits_row) maxv = std::max(maxv, static_cast<double>(v));
    double denom = 0.0;
    for (Real v : logits_row) denom += std::exp((static_cast<double>(v) - maxv) / temperature);
    return (static_cast<double>(logits_row[target]) - maxv) / temperature - std::log(denom);
}

template <typename Real>
std::vector<double> softmax_row(std::span<const Real> logits_row, double temperature = 1.0) {
    double maxv = -std::numeric_limits<double>::infinity();
    for (Real v : logits_row) maxv = std::max(maxv, static_cast<double>(v));
    std::vector<double> p(logits_row.size());
    double denom = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((static_cast<double>(logits_row[i]) - maxv) / temperature);
        denom += p[i];
    }
    for (auto& v : p) v /= denom;
    return p;
}

template <typename Real>
double entropy_row(std::span<const Real> logits_row, double temperature = 1.0) {
    auto p = softmax_row(logits_row, temperature);
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

// per-position log pi(tokens[t+1] | tokens[<=t]) for t in [0, len-2]
template <typename Real>
std::vector<double> next_token_logprobs(const Tape<Real>& tape, double temperature = 1.0) {
    if (!tape.logits_all) throw TapeMismatch("need logits at all positions");
    const int V = tape.cfg.vocab_size;
    std::vector<double> out(std::max(0, tape.len - 1));
    for (int t = 0; t + 1 < tape.len; ++t)
        out[t] = logprob_at<Real>({tape.logits.data() + static_cast<size_t>(t) * V,
                                   static_cast<size_t>(V)},
                                  tape.tokens[t + 1], temperature);
    return out;
}

// dlogits for sum_t weights[t] * log softmax(logits_t / temp)[targets[t]]
template <typename Real>
std::vector<Real> dlogits_weighted_logprob(const Tape<Real>& tape,
                                           std::span<const double> weights,
                                           std::span<const int> targets,
                                           double temperature = 1.0) {
    if (!tape.logits_all) throw TapeMismatch("need logits at all positions");
    const int V = tape.cfg.vocab_size;
    if (weights.size() != targets.size() ||
        static_cast<int>(weights.size()) > tape.len)
        throw TapeMismatch("weights/targets length mismatch");
    std::vector<Real> dl(static_cast<size_t>(tape.len) * V, Real(0));
    for (size_t t = 0; t < weights.size(); ++t) {
        const double w = weights[t];
        if (w == 0.0) continue;
        auto p = softmax_row<Real>(
            {tape.logits.data() + t * V, static_cast<size_t>(V)}, temperature);
        Real* row = dl.data() + t * V;
        for (int i = 0; i < V; ++i)
            row[i] = static_cast<Real>(-w * p[i] / temperature);
        row[targets[t]] += static_cast<Real>(w / temperature);
    }
    return dl;
}

// dlogits for sum_t weights[t] * softmax(logits_t)[targets[t]] (the
// probability objective, temperature 1)
template <typename Real>
std::vector<Real> dlogits_weighted_prob(const Tape<Real>& tape,
                                        std::span<const double> weights,
                                        std::span<const int> targets) {
    if (!tape.logits_all) throw TapeMismatch("need logits at all positions");
    const int V = tape.cfg.vocab_size;
    std::vector<Real> dl(static_cast<size_t>(tape.len) * V, Real(0));
    for (size_t t = 0; t < weights.size(); ++t) {
        const double w = weights[t];
        if (w == 0.0) continue;
        auto p = softmax_row<Real>({tape.logits.data() + t * V, static_cast<size_t>(V)});
        const double py = p[targets[t]];
        Real* row = dl.data() + t * V;
        for (int i = 0; i < V; ++i) row[i] = static_cast<Real>(-w * py * p[i]);
        row[targets[t]] += static_cast<Real>(w * py);
    }
    return dl;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

struct SampleConfig {
    double temperature = 1.0;
    double top_p = 0.95;
    int max_new_tokens = 16;
    bool greedy = false;
    int eos_id = 2;
};

// nucleus sampling core; returns (token, full-distribution log prob)
template <typename Real>
std::pair<int, double> sample_token(std::span<const Real> logits_row, double temperature,
                                    double top_p, RngStream& rng) {
    auto p = softmax_row<Real>(logits_row, temperature);
    const int V = static_cast<int>(p.size());
    std::vector<int> order(V);
    for (int i = 0; i < V; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
    // smallest prefix of the sorted vocabulary with cumulative mass >= top_p
    double cum = 0.0;
    int keep = 0;
    for (; keep < V; ++keep) {
        cum += p[order[keep]];
        if (cum >= top_p) {
            ++keep;
            break;
        }
    }
    keep = std::max(keep, 1);
    const double u = rng.uniform() * cum;
    double acc = 0.0;
    int chosen = order[keep - 1];
    for (int i = 0; i < keep; ++i) {
        acc += p[order[i]];
        if (u < acc) {
            chosen = order[i];
            break;
        }
    }
    return {chosen, std::log(std::max(p[chosen], 1e-300))};
}

template <typename Real>
std::pair<int, double> greedy_token(std::span<const Real> logits_row) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits_row.size()); ++i)
        if (logits_row[i] > logits_row[best]) best = i;
    auto p = softmax_row<Real>(logits_row, 1.0);
    return {best, std::log(std::max(p[best], 1e-300))};
}

struct SampleResult {
    std::vector<int> tokens;  // generated tokens, EOS included when reached
    std::vector<double> logps; // full-distribution log probs at the sampling temperature
    bool hit_eos = false;
};

template <typename Real>
SampleResult sample(const PolicyParams<Real>& params, const LoraAdapter<Real>* adapters,
                    std::span<const int> prompt, const SampleConfig& cfg, RngStream& rng,
                    Tape<Real>& scratch) {
    if (static_cast<int>(prompt.size()) >= params.cfg.max_seq_len)
        throw SequenceTooLong("prompt leaves no room to generate");
    SampleResult out;
    std::vector<int> seq(prompt.begin(), prompt.end());
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        if (static_cast<int>(seq.size()) >= params.cfg.max_seq_len) break;
        forward(params, adapters, seq, scratch, /*logits_all=*/false);
        std::span<const Real> row(scratch.logits.data(),
                                  static_cast<size_t>(params.cfg.vocab_size));
        auto [tok, logp] = cfg.greedy
                               ? greedy_token<Real>(row)
                               : sample_token<Real>(row, cfg.temperature, cfg.top_p, rng);
        out.tokens.push_back(tok);
        out.logps.push_back(logp);
        seq.push_back(tok);
        if (tok == cfg.eos_id) {
            out.hit_eos = true;
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint plumbing
// ---------------------------------------------------------------------------

template <typename Real>
ckpt::Checkpoint snapshot(const PolicyParams<Real>& params,
                          const LoraAdapter<Real>* adapters = nullptr,
                          bool merge_adapters = false) {
    constexpr bool is_f32 = std::is_same_v<Real, float>;
    const ckpt::Dtype dt = is_f32 ? ckpt::Dtype::F32 : ckpt::Dtype::F64;
    ckpt::Checkpoint c;
    for (const auto& t : params.set.tensors) {
        ckpt::Tensor out;
        out.dtype = dt;
        out.shape = t.is_matrix() ? std::vector<int64_t>{t.rows, t.cols}
                                  : std::vector<int64_t>{t.rows};
        out.data.assign(t.data.begin(), t.data.end());
        if (merge_adapters && adapters && t.is_matrix()) {
            if (const auto* e = adapters->find(t.name)) {
                linalg::Matrix dw = adapters->materialize(*e);
                for (size_t i = 0; i < out.data.size(); ++i) {
                    // keep the merged value representable at the stored dtype
                    const Real merged = static_cast<Real>(out.data[i] + dw.data()[i]);
                    out.data[i] = static_cast<double>(merged);
                }
            }
        }
        c.tensors[t.name] = std::move(out);
    }
    if (adapters && !merge_adapters) {
        for (const auto& e : adapters->entries) {
            ckpt::Tensor a;
            a.dtype = dt;
            a.shape = {e.d_out, adapters->r};
            a.data.assign(e.a.begin(), e.a.end());
            c.tensors[e.layer + ".lora_A"] = std::move(a);
            ckpt::Tensor b;
            b.dtype = dt;
            b.shape = {adapters->r, e.d_in};
            b.data.assign(e.b.begin(), e.b.end());
            c.tensors[e.layer + ".lora_B"] = std::move(b);
        }
        char alpha_buf[32];
        std::snprintf(alpha_buf, sizeof(alpha_buf), "%.17g", adapters->alpha);
        c.metadata["lora_alpha"] = alpha_buf;
        c.metadata["lora_r"] = std::to_string(adapters->r);
    }
    c.metadata["model_config"] = params.cfg.to_json().dump();
    c.metadata["model_config_hash"] = params.cfg.config_hash();
    return c;
}

template <typename Real>
PolicyParams<Real> restore_params(const ckpt::Checkpoint& c) {
    auto it = c.metadata.find("model_config");
    if (it == c.metadata.end()) throw MalformedHeader("checkpoint lacks model_config metadata");
    const ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(it->second));
    PolicyParams<Real> p = init_params<Real>(cfg);
    for (auto& t : p.set.tensors) {
        auto ct = c.tensors.find(t.name);
        if (ct == c.tensors.end())
            throw MalformedHeader("checkpoint missing tensor " + t.name);
        if (ct->second.numel() != static_cast<int64_t>(t.data.size()))
            throw ShapeMismatch("checkpoint tensor size mismatch for " + t.name);
        for (size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = static_cast<Real>(ct->second.data[i]);
    }
    return p;
}

template <typename Real>
LoraAdapter<Real> restore_adapters(const ckpt::Checkpoint& c,
                                   const PolicyParams<Real>& params) {
    auto ait = c.metadata.find("lora_alpha");
    auto rit = c.metadata.find("lora_r");
    if (ait == c.metadata.end() || rit == c.metadata.end())
        throw MalformedHeader("checkpoint lacks lora metadata");
    LoraAdapter<Real> ad;
    ad.alpha = std::stod(ait->second);
    ad.r = std::stoi(rit->second);
    for (const auto& [name, t] : c.tensors) {
        constexpr std::string_view suffix = ".lora_A";
        if (name.size() <= suffix.size() ||
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        const std::string layer = name.substr(0, name.size() - suffix.size());
        const auto& base = params.set.at(layer);
        typename LoraAdapter<Real>::Entry e;
        e.layer = layer;
        e.d_out = base.rows;
        e.d_in = base.cols;
        e.a.assign(t.data.begin(), t.data.end());
        const auto& bt = c.tensors.at(layer + ".lora_B");
        e.b.assign(bt.data.begin(), bt.data.end());
        if (static_cast<int64_t>(e.a.size()) != int64_t(e.d_out) * ad.r ||
            static_cast<int64_t>(e.b.size()) != int64_t(ad.r) * e.d_in)
            throw ShapeMismatch("lora factor shape mismatch for " + layer);
        ad.index[e.layer] = static_cast<int>(ad.entries.size());
        ad.entries.push_back(std::move(e));
    }
    return ad;
}

} // namespace rank1lab::model
