// SPDX-License-Identifier: Apache-2.0
// Straight-line reimplementations of the three surrogate objectives, written
// from the closed-form definitions with no shared code paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace loss_oracle {

struct Batch {
    // [group][response][token]
    std::vector<std::vector<std::vector<double>>> old_lp, new_lp;
    std::vector<std::vector<double>> advantages; // [group][response]
};

inline double clip(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

// (1/B) sum_g (1/G) sum_i (1/|y_i|) sum_t min(r A, clip(r,1-e,1+e) A)
inline double grpo_objective(const Batch& b, double eps) {
    double total = 0.0;
    for (size_t g = 0; g < b.new_lp.size(); ++g) {
        double group_term = 0.0;
        for (size_t i = 0; i < b.new_lp[g].size(); ++i) {
            double sample_term = 0.0;
            for (size_t t = 0; t < b.new_lp[g][i].size(); ++t) {
                const double r = std::exp(b.new_lp[g][i][t] - b.old_lp[g][i][t]);
                const double a = b.advantages[g][i];
                sample_term += std::min(r * a, clip(r, 1.0 - eps, 1.0 + eps) * a);
            }
            group_term += sample_term / static_cast<double>(b.new_lp[g][i].size());
        }
        total += group_term / static_cast<double>(b.new_lp[g].size());
    }
    return total / static_cast<double>(b.new_lp.size());
}

// (1/sum |y_j| over the whole batch) sum_{g,i,t} min(r A, clip(r,1-el,1+eh) A)
inline double dapo_objective(const Batch& b, double eps_low, double eps_high) {
    double total = 0.0;
    double tokens = 0.0;
    for (size_t g = 0; g < b.new_lp.size(); ++g)
        for (size_t i = 0; i < b.new_lp[g].size(); ++i) {
            tokens += static_cast<double>(b.new_lp[g][i].size());
            for (size_t t = 0; t < b.new_lp[g][i].size(); ++t) {
                const double r = std::exp(b.new_lp[g][i][t] - b.old_lp[g][i][t]);
                const double a = b.advantages[g][i];
                total += std::min(r * a, clip(r, 1.0 - eps_low, 1.0 + eps_high) * a);
            }
        }
    return total / tokens;
}

// s_i = exp(mean_t log ratio); (1/B) sum_g (1/G) sum_i min(s A, clip(s) A)
inline double gspo_objective(const Batch& b, double eps) {
    double total = 0.0;
    for (size_t g = 0; g < b.new_lp.size(); ++g) {
        double group_term = 0.0;
        for (size_t i = 0; i < b.new_lp[g].size(); ++i) {
            double mean_log = 0.0;
            for (size_t t = 0; t < b.new_lp[g][i].size(); ++t)
                mean_log += b.new_lp[g][i][t] - b.old_lp[g][i][t];
            mean_log /= static_cast<double>(b.new_lp[g][i].size());
            const double s = std::exp(mean_log);
            const double a = b.advantages[g][i];
            group_term += std::min(s * a, clip(s, 1.0 - eps, 1.0 + eps) * a);
        }
        total += group_term / static_cast<double>(b.new_lp[g].size());
    }
    return total / static_cast<double>(b.new_lp.size());
}

// geometric mean of per-token ratios, by direct product
inline double geometric_mean_ratio(const std::vector<double>& old_lp,
                                   const std::vector<double>& new_lp) {
    double prod = 1.0;
    for (size_t t = 0; t < new_lp.size(); ++t) prod *= std::exp(new_lp[t] - old_lp[t]);
    return std::pow(prod, 1.0 / static_cast<double>(new_lp.size()));
}

} // namespace loss_oracle
