// SPDX-License-Identifier: Apache-2.0
#include "rank1lab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace rank1lab::spectral {

using linalg::Matrix;

Matrix Rank1Update::materialize(bool rescaled) const {
    Matrix m = Matrix::outer(u1, v1);
    const double factor = rescaled ? scale * sigma1 : sigma1;
    for (auto& v : m.data()) v *= factor;
    return m;
}

Rank1Update extract_rank1(const Matrix& dw) {
    const double fnorm = linalg::frobenius_norm(dw);
    if (fnorm <= 0.0) throw DegenerateDelta("zero delta");
    linalg::Rank1Triple t;
    try {
        t = linalg::rank1_triple(dw);
    } catch (const DegenerateMatrix& e) {
        throw DegenerateDelta(e.what());
    }
    Rank1Update r;
    r.sigma1 = t.sigma1;
    r.u1 = std::move(t.u1);
    r.v1 = std::move(t.v1);
    r.scale = fnorm / t.sigma1;
    return r;
}

SpectrumReport spectrum(const ckpt::DeltaSet& ds) {
    SpectrumReport report;
    for (const auto& [name, t] : ds.entries) {
        if (!t.is_matrix()) continue;
        SpectrumRow row;
        row.name = name;
        const Matrix m = t.to_matrix();
        if (linalg::frobenius_norm(m) == 0.0) {
            row.degenerate = true;
            row.svals.assign(std::min(m.rows(), m.cols()), 0.0);
            row.ratios.assign(row.svals.size(), 0.0);
            report.rows.push_back(std::move(row));
            continue;
        }
        auto r = linalg::svd(m);
        row.svals = std::move(r.s);
        row.ratios.resize(row.svals.size());
        for (size_t i = 0; i < row.svals.size(); ++i) row.ratios[i] = row.svals[i] / row.svals[0];
        row.eff_rank = linalg::effective_rank(row.svals);
        row.eff_rank_count = linalg::effective_rank_threshold(row.svals);
        if (static_cast<int>(row.svals.size()) - 1 >= 3) {
            auto [slope, r2] = tail_fit(row.svals, 1);
            row.tail_slope = slope;
            row.tail_r2 = r2;
        }
        report.rows.push_back(std::move(row));
    }
    // map iteration is already name-ordered; keep the contract explicit
    std::sort(report.rows.begin(), report.rows.end(),
              [](const SpectrumRow& a, const SpectrumRow& b) { return a.name < b.name; });
    return report;
}

std::vector<SigmaRatioRow> sigma_ratio_table(const SpectrumReport& report, double max_ratio,
                                             int top_k) {
    std::vector<SigmaRatioRow> rows;
    for (const auto& r : report.rows) {
        if (r.degenerate || r.svals.empty()) continue;
        const double second = r.svals.size() > 1 ? r.ratios[1] : 0.0;
        if (second > max_ratio) continue;
        SigmaRatioRow out;
        out.name = r.name;
        const int k = std::min<int>(top_k, static_cast<int>(r.svals.size()));
        for (int i = 0; i < k; ++i) out.percents.push_back(100.0 * r.ratios[i]);
        rows.push_back(std::move(out));
    }
    return rows;
}

std::string format_sigma_row(const SigmaRatioRow& row) {
    std::string out;
    char buf[32];
    for (size_t i = 0; i < row.percents.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.2f%%", row.percents[i]);
        if (i) out += ", ";
        out += buf;
    }
    return out;
}

std::pair<double, double> tail_fit(std::span<const double> s, int skip) {
    const int k = static_cast<int>(s.size());
    const int n = k - skip;
    if (n < 3) throw TooFewValues("tail_fit needs at least 3 values after skip");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = skip; i < k; ++i) {
        const double x = static_cast<double>(i + 1); // 1-based index
        sx += x;
        sy += s[i];
        sxx += x * x;
        sxy += x * s[i];
    }
    const double nn = static_cast<double>(n);
    const double slope = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / nn;
    const double mean = sy / nn;
    double ss_res = 0, ss_tot = 0;
    for (int i = skip; i < k; ++i) {
        const double x = static_cast<double>(i + 1);
        const double pred = intercept + slope * x;
        ss_res += (s[i] - pred) * (s[i] - pred);
        ss_tot += (s[i] - mean) * (s[i] - mean);
    }
    const double r2 = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
    return {slope, r2};
}

ckpt::Checkpoint build_rank1_model(const ckpt::Checkpoint& base, const ckpt::Checkpoint& tuned,
                                   const BuildOptions& opts) {
    ckpt::Checkpoint out;
    std::vector<std::string> degenerate;
    std::vector<std::string> selected;

    for (const auto& [name, tt] : tuned.tensors) {
        auto bit = base.tensors.find(name);
        const bool shared = bit != base.tensors.end() && bit->second.shape == tt.shape;
        const bool is_selected =
            shared && tt.is_matrix() && ckpt::matches_any(opts.selection, name);
        if (!is_selected) {
            out.tensors[name] =
                (opts.others == OthersMode::Tuned || !shared) ? tt : bit->second;
            continue;
        }
        selected.push_back(name);
        const ckpt::Tensor& bt = bit->second;
        Matrix dw(static_cast<int>(tt.shape[0]), static_cast<int>(tt.shape[1]));
        for (size_t i = 0; i < tt.data.size(); ++i) dw.data()[i] = tt.data[i] - bt.data[i];
        ckpt::Tensor result = bt; // start from base
        try {
            Rank1Update r1 = extract_rank1(dw);
            Matrix d1 = r1.materialize(opts.rescale);
            for (size_t i = 0; i < result.data.size(); ++i) result.data[i] += d1.data()[i];
        } catch (const DegenerateDelta&) {
            degenerate.push_back(name); // keep base values
        }
        out.tensors[name] = std::move(result);
    }
    // base-only tensors are dropped (output mirrors the tuned model's names)

    out.metadata = tuned.metadata;
    std::string sel_str;
    for (const auto& p : opts.selection) {
        if (!sel_str.empty()) sel_str += ",";
        sel_str += p;
    }
    out.metadata["rank1.selection"] = sel_str;
    out.metadata["rank1.others"] = opts.others == OthersMode::Tuned ? "tuned" : "base";
    out.metadata["rank1.rescale"] = opts.rescale ? "1" : "0";
    std::string deg_str;
    for (const auto& n : degenerate) {
        if (!deg_str.empty()) deg_str += ",";
        deg_str += n;
    }
    out.metadata["rank1.degenerate"] = deg_str;
    out.metadata["rank1.degenerate_count"] = std::to_string(degenerate.size());
    return out;
}

} // namespace rank1lab::spectral
