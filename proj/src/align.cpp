// SPDX-License-Identifier: Apache-2.0
#include "rank1lab/align.hpp"

#include <algorithm>
#include <cmath>

#include "rank1lab/spectral.hpp"

namespace rank1lab::align {

using linalg::Matrix;

namespace {

// orthonormal basis of the spanned columns via modified Gram-Schmidt
std::vector<std::vector<double>> orthonormal_basis(const std::vector<std::vector<double>>& vecs) {
    std::vector<std::vector<double>> q;
    for (auto v : vecs) {
        for (const auto& e : q) {
            const double proj = linalg::dot(v, e);
            for (size_t i = 0; i < v.size(); ++i) v[i] -= proj * e[i];
        }
        const double n = linalg::norm2(v);
        if (n > 1e-12) {
            for (auto& x : v) x /= n;
            q.push_back(std::move(v));
        }
    }
    return q;
}

// cos of the first principal angle between span(vecs) and the unit vector u
double subspace_cos(const std::vector<std::vector<double>>& vecs, std::span<const double> u) {
    auto q = orthonormal_basis(vecs);
    double acc = 0.0;
    for (const auto& e : q) {
        const double c = linalg::dot(e, u);
        acc += c * c;
    }
    return std::clamp(std::sqrt(acc), 0.0, 1.0);
}

std::vector<std::vector<double>> a_columns(const model::LoraAdapter<double>::Entry& e, int r) {
    std::vector<std::vector<double>> cols(r, std::vector<double>(e.d_out));
    for (int k = 0; k < r; ++k)
        for (int i = 0; i < e.d_out; ++i) cols[k][i] = e.a[static_cast<size_t>(i) * r + k];
    return cols;
}

std::vector<std::vector<double>> b_rows(const model::LoraAdapter<double>::Entry& e, int r) {
    std::vector<std::vector<double>> rows(r, std::vector<double>(e.d_in));
    for (int k = 0; k < r; ++k)
        for (int j = 0; j < e.d_in; ++j) rows[k][j] = e.b[static_cast<size_t>(k) * e.d_in + j];
    return rows;
}

} // namespace

std::vector<AlignmentRow> align_report(const model::LoraAdapter<double>& adapters,
                                       const ckpt::DeltaSet& full_delta,
                                       bool allow_higher_rank) {
    if (adapters.r != 1 && !allow_higher_rank)
        throw RankMismatch("alignment probe expects rank-1 adapters");
    std::vector<AlignmentRow> rows;
    for (const auto& e : adapters.entries) {
        auto it = full_delta.entries.find(e.layer);
        if (it == full_delta.entries.end() || !it->second.is_matrix())
            throw ConfigError("adapter layer missing from the delta set: " + e.layer);
        const Matrix dw = it->second.to_matrix();
        AlignmentRow row;
        row.layer = e.layer;
        auto triple = linalg::rank1_triple(dw);
        row.sigma1 = triple.sigma1;

        const Matrix lora = adapters.materialize(e);
        if (linalg::frobenius_norm(lora) == 0.0) {
            // a zero adapter product (e.g. B never left its zero init) has no
            // defined alignment; keep the row with the flag set
            row.degenerate = true;
            auto acols = a_columns(e, adapters.r);
            if (adapters.r == 1 && linalg::norm2(acols[0]) > 0.0)
                row.theta_left = linalg::principal_angle(acols[0], triple.u1);
            rows.push_back(std::move(row));
            continue;
        }
        Matrix rank1 = Matrix::outer(triple.u1, triple.v1);
        for (auto& v : rank1.data()) v *= triple.sigma1;
        Matrix rank1_rescaled = rank1;
        const double scale = linalg::frobenius_norm(dw) / triple.sigma1;
        for (auto& v : rank1_rescaled.data()) v *= scale;

        row.frob_cos = linalg::frob_cosine(lora, rank1);
        row.hadamard_ratio = linalg::hadamard_norm_ratio(lora, rank1);
        row.hadamard_ratio_rescaled = linalg::hadamard_norm_ratio(lora, rank1_rescaled);

        if (adapters.r == 1) {
            row.theta_left = linalg::principal_angle(a_columns(e, 1)[0], triple.u1);
            row.theta_right = linalg::principal_angle(b_rows(e, 1)[0], triple.v1);
        } else {
            row.extension = true;
            row.theta_left = std::acos(subspace_cos(a_columns(e, adapters.r), triple.u1));
            row.theta_right = std::acos(subspace_cos(b_rows(e, adapters.r), triple.v1));
        }
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(),
              [](const AlignmentRow& a, const AlignmentRow& b) { return a.layer < b.layer; });
    return rows;
}

namespace {

struct GradSetup {
    model::PolicyParams<double> params;
    std::vector<int> tokens;
};

GradSetup seeded_setup(const model::ModelConfig& cfg, uint64_t seed, int len) {
    model::ModelConfig mc = cfg;
    mc.seed = seed;
    GradSetup s{model::init_params<double>(mc), {}};
    auto rng = RngStream::from(seed, {0x70726f6265ULL});
    s.tokens.resize(len);
    for (auto& t : s.tokens) t = static_cast<int>(rng.uniform_int(0, mc.vocab_size - 1));
    return s;
}

double sigma_ratio(const model::NamedTensor<double>& g, bool& zero) {
    Matrix m(g.rows, g.cols, std::vector<double>(g.data.begin(), g.data.end()));
    auto sv = linalg::svd(m);
    if (sv.s[0] == 0.0) {
        zero = true;
        return 0.0;
    }
    zero = false;
    return sv.s.size() > 1 ? sv.s[1] / sv.s[0] : 0.0;
}

int numerical_rank(const model::NamedTensor<double>& g) {
    Matrix m(g.rows, g.cols, std::vector<double>(g.data.begin(), g.data.end()));
    auto sv = linalg::svd(m);
    if (sv.s[0] == 0.0) return 0;
    int rank = 0;
    for (double s : sv.s)
        if (s > 1e-9 * sv.s[0]) ++rank;
    return rank;
}

} // namespace

Rank1GradReport rank1_gradient_check(const model::ModelConfig& cfg, uint64_t seed,
                                     const std::vector<int>& t_values) {
    Rank1GradReport report;
    report.t_values = t_values;

    // strict single-position law
    {
        auto setup = seeded_setup(cfg, seed, 1);
        model::Tape<double> tape;
        model::forward<double>(setup.params, nullptr, setup.tokens, tape, true);
        auto rng = RngStream::from(seed, {0x74617267ULL});
        std::vector<double> w{1.0};
        std::vector<int> target{static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1))};

        auto grads_prob = model::Gradients<double>::zeros_like(setup.params, nullptr);
        model::backward<double>(tape, setup.params, nullptr,
                                model::dlogits_weighted_prob<double>(tape, w, target),
                                grads_prob);
        auto grads_logp = model::Gradients<double>::zeros_like(setup.params, nullptr);
        model::backward<double>(tape, setup.params, nullptr,
                                model::dlogits_weighted_logprob<double>(tape, w, target),
                                grads_logp);
        for (size_t i = 0; i < grads_prob.base.tensors.size(); ++i) {
            const auto& gp = grads_prob.base.tensors[i];
            if (!gp.is_matrix() || gp.name == "embed_tokens") continue;
            Rank1GradRow row;
            row.layer = gp.name;
            row.ratio_prob = sigma_ratio(gp, row.zero_prob);
            row.ratio_logprob = sigma_ratio(grads_logp.base.tensors[i], row.zero_logprob);
            report.rows.push_back(std::move(row));
        }
    }

    // rank growth over sequence length
    std::map<std::string, RankGrowthRow> growth;
    for (int tv : t_values) {
        auto setup = seeded_setup(cfg, seed, tv);
        model::Tape<double> tape;
        model::forward<double>(setup.params, nullptr, setup.tokens, tape, true);
        std::vector<double> w(tv, 1.0);
        std::vector<int> targets(tv);
        auto rng = RngStream::from(seed, {0x74617267ULL, static_cast<uint64_t>(tv)});
        for (auto& t : targets) t = static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1));
        auto grads = model::Gradients<double>::zeros_like(setup.params, nullptr);
        model::backward<double>(tape, setup.params, nullptr,
                                model::dlogits_weighted_logprob<double>(tape, w, targets),
                                grads);
        for (const auto& g : grads.base.tensors) {
            if (!g.is_matrix() || g.name == "embed_tokens") continue;
            auto& row = growth[g.name];
            row.layer = g.name;
            row.ranks.push_back(numerical_rank(g));
        }
    }
    for (auto& [name, row] : growth) report.growth.push_back(row);
    return report;
}

AsymmetryReport lora_asymmetry_check(const model::ModelConfig& cfg, uint64_t seed,
                                     int multi_len) {
    AsymmetryReport report;
    auto run_case = [&](int len, bool single) {
        auto setup = seeded_setup(cfg, seed, len);
        auto adapters = model::init_lora<double>(setup.params, ckpt::default_linear_patterns(),
                                                 1, 1.0, seed + 1);
        auto rng = RngStream::from(seed, {0x6c6f7261ULL});
        for (auto& e : adapters.entries)
            for (auto& v : e.b) v = 0.1 * rng.normal();

        model::Tape<double> tape;
        model::forward<double>(setup.params, &adapters, setup.tokens, tape, true);
        std::vector<double> w(len, 0.0);
        std::vector<int> targets(len, 0);
        for (int t = 0; t < len; ++t)
            targets[t] = static_cast<int>(rng.uniform_int(0, cfg.vocab_size - 1));
        if (single)
            w[len - 1] = 1.0; // one active objective position
        else
            for (auto& x : w) x = 1.0;

        auto grads = model::Gradients<double>::zeros_like(setup.params, &adapters);
        model::LinearProbe probe;
        for (const auto& e : adapters.entries) probe.wanted.push_back(e.layer);
        model::BackwardOptions<double> opts;
        opts.probe = &probe;
        model::backward<double>(tape, setup.params, &adapters,
                                model::dlogits_weighted_logprob<double>(tape, w, targets),
                                grads, opts);

        for (size_t e = 0; e < adapters.entries.size(); ++e) {
            const auto& entry = adapters.entries[e];
            const auto& rec = probe.records.at(entry.layer);
            if (single && len == 1) {
                AsymmetrySingleRow row;
                row.layer = entry.layer;
                const auto& g = rec.gs[0];
                const auto& x = rec.xs[0];
                const double xb = linalg::dot(x, entry.b);
                const double ga = linalg::dot(g, entry.a);
                const double na = linalg::norm2(grads.lora_a[e]);
                const double nb = linalg::norm2(grads.lora_b[e]);
                if (std::abs(xb) > 1e-300 && linalg::norm2(g) > 0 && na > 0) {
                    row.a_defined = true;
                    row.cos_a = std::abs(linalg::dot(grads.lora_a[e], g)) /
                                (na * linalg::norm2(g));
                }
                if (std::abs(ga) > 1e-300 && linalg::norm2(x) > 0 && nb > 0) {
                    row.b_defined = true;
                    row.cos_b = std::abs(linalg::dot(grads.lora_b[e], x)) /
                                (nb * linalg::norm2(x));
                }
                report.single.push_back(std::move(row));
            } else if (!single) {
                AsymmetryMultiRow row;
                row.layer = entry.layer;
                std::vector<double> expect_a(entry.d_out, 0.0);
                std::vector<double> expect_b(entry.d_in, 0.0);
                for (size_t t = 0; t < rec.gs.size(); ++t) {
                    const double xb = linalg::dot(rec.xs[t], entry.b);
                    const double ga = linalg::dot(rec.gs[t], entry.a);
                    for (int i = 0; i < entry.d_out; ++i)
                        expect_a[i] += adapters.alpha * rec.gs[t][i] * xb;
                    for (int j = 0; j < entry.d_in; ++j)
                        expect_b[j] += adapters.alpha * rec.xs[t][j] * ga;
                }
                for (int i = 0; i < entry.d_out; ++i)
                    row.grad_a_oracle_err =
                        std::max(row.grad_a_oracle_err,
                                 std::abs(grads.lora_a[e][i] - expect_a[i]));
                for (int j = 0; j < entry.d_in; ++j)
                    row.grad_b_oracle_err =
                        std::max(row.grad_b_oracle_err,
                                 std::abs(grads.lora_b[e][j] - expect_b[j]));
                const double na = linalg::norm2(grads.lora_a[e]);
                if (na > 0) {
                    std::vector<double> unit = grads.lora_a[e]; // subspace_cos wants unit length
                    for (auto& v : unit) v /= na;
                    row.left_dispersion = 1.0 - subspace_cos(rec.gs, unit);
                }
                const double nb = linalg::norm2(grads.lora_b[e]);
                if (nb > 0) {
                    std::vector<double> unit = grads.lora_b[e];
                    for (auto& v : unit) v /= nb;
                    row.right_dispersion = 1.0 - subspace_cos(rec.xs, unit);
                }
                report.multi.push_back(std::move(row));
            }
        }
    };
    run_case(1, true);
    run_case(multi_len, false);
    return report;
}

} // namespace rank1lab::align
