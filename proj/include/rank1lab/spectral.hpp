// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rank1lab/checkpoint.hpp"
#include "rank1lab/linalg.hpp"

namespace rank1lab::spectral {

// Top singular triple of a weight delta plus the Frobenius rescale factor.
// materialize(true) yields the norm-preserving rank-1 stand-in for the delta:
// (|dw|_F / sigma1) * sigma1 * u1 v1^T = |dw|_F * u1 v1^T.
struct Rank1Update {
    std::string name;
    double sigma1 = 0.0;
    std::vector<double> u1;
    std::vector<double> v1;
    double scale = 1.0; // |dw|_F / sigma1

    linalg::Matrix materialize(bool rescaled = true) const;
};

Rank1Update extract_rank1(const linalg::Matrix& dw); // throws DegenerateDelta

struct SpectrumRow {
    std::string name;
    std::vector<double> svals;  // descending
    std::vector<double> ratios; // s_i / s_1, first entry 1 when non-degenerate
    double eff_rank = 0.0;
    int eff_rank_count = 0;
    double tail_slope = 0.0;
    double tail_r2 = 0.0;
    bool degenerate = false; // all-zero layer
};

struct SpectrumReport {
    std::vector<SpectrumRow> rows; // ordered by layer name
};

// Per-layer singular spectra of the 2-D entries of a delta set.
SpectrumReport spectrum(const ckpt::DeltaSet& ds);

// Rows for layers whose sigma2/sigma1 <= max_ratio, with the leading top_k
// values as percentages of sigma1.
struct SigmaRatioRow {
    std::string name;
    std::vector<double> percents; // percents[0] == 100.0
};
std::vector<SigmaRatioRow> sigma_ratio_table(const SpectrumReport& report,
                                             double max_ratio = 0.70, int top_k = 7);
// "100.00%, 42.40%, ..." formatting used by the table reports
std::string format_sigma_row(const SigmaRatioRow& row);

// Least-squares line through (i, s_i) for i in [skip+1, k] (1-based); returns
// {slope, r_squared}. A zero-variance target fits with r_squared = 1.
std::pair<double, double> tail_fit(std::span<const double> s, int skip = 1);

enum class OthersMode { Tuned, Base };

struct BuildOptions {
    std::vector<std::string> selection; // defaults to the linear-layer patterns
    OthersMode others = OthersMode::Tuned;
    bool rescale = true;
};

// base + rank-1 approximation of (tuned - base) on each selected 2-D layer;
// every other parameter comes from tuned (or base, per flag). Degenerate
// layers fall back to base and are recorded in the checkpoint metadata.
ckpt::Checkpoint build_rank1_model(const ckpt::Checkpoint& base,
                                   const ckpt::Checkpoint& tuned,
                                   const BuildOptions& opts = {});

} // namespace rank1lab::spectral
