// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rank1lab/checkpoint.hpp"
#include "rank1lab/model.hpp"

namespace rank1lab::align {

// One row per shared layer, mirroring the four alignment panels (sigma1,
// frobenius cosine, left principal angle, right principal angle) plus the
// literal elementwise-product variant in both scalings.
struct AlignmentRow {
    std::string layer;
    double sigma1 = 0.0;          // top singular value of the full delta
    double frob_cos = 0.0;        // <lora, rank1>_F / norms
    double hadamard_ratio = 0.0;  // vs sigma1 u1 v1^T
    double hadamard_ratio_rescaled = 0.0; // vs the norm-preserving rank-1 stand-in
    double theta_left = 0.0;      // angle(A, u1), radians in [0, pi/2]
    double theta_right = 0.0;     // angle(B, v1)
    bool extension = false;       // r > 1: angles via largest canonical correlation
    bool degenerate = false;      // zero adapter product or factor: metrics undefined
};

// Adapters must target layers present in full_delta; r = 1 unless
// allow_higher_rank, in which case angles use the best direction of the
// factor subspaces and the row is flagged.
std::vector<AlignmentRow> align_report(const model::LoraAdapter<double>& adapters,
                                       const ckpt::DeltaSet& full_delta,
                                       bool allow_higher_rank = false);

// ---------------------------------------------------------------------------
// numerical checks of the per-token gradient structure
// ---------------------------------------------------------------------------

struct Rank1GradRow {
    std::string layer;
    double ratio_prob = 0.0;    // sigma2/sigma1, probability objective
    double ratio_logprob = 0.0; // sigma2/sigma1, log-probability objective
    bool zero_prob = false;     // exactly zero gradient (rank 0)
    bool zero_logprob = false;
};

struct RankGrowthRow {
    std::string layer;
    std::vector<int> ranks; // numerical rank per tested sequence length
};

struct Rank1GradReport {
    std::vector<Rank1GradRow> rows;     // single participating position
    std::vector<int> t_values;
    std::vector<RankGrowthRow> growth;  // length-T sequences, all positions active
};

// Single-position gradients of every linear layer are delta x^T: rank <= 1
// exactly (zero for q/k, whose attention over one position is constant).
// With length-T sequences each layer accumulates at most T outer products.
Rank1GradReport rank1_gradient_check(const model::ModelConfig& cfg, uint64_t seed,
                                     const std::vector<int>& t_values = {1, 2, 3});

struct AsymmetrySingleRow {
    std::string layer;
    double cos_a = 0.0;  // |cos(grad_a, g)|
    double cos_b = 0.0;  // |cos(grad_b, x)|
    bool a_defined = false; // false when the scalar x.b (resp. g.a) vanishes
    bool b_defined = false;
};

struct AsymmetryMultiRow {
    std::string layer;
    double left_dispersion = 0.0;  // 1 - |proj of grad_a onto span{g_t}| / |grad_a|
    double right_dispersion = 0.0;
    double grad_a_oracle_err = 0.0; // max |grad_a - alpha sum g_t (x_t.b)|
    double grad_b_oracle_err = 0.0;
};

struct AsymmetryReport {
    std::vector<AsymmetrySingleRow> single;
    std::vector<AsymmetryMultiRow> multi;
};

// Rank-1 adapter gradients: grad_a = alpha g (x.b) is parallel to the
// backpropagated output vector, grad_b = alpha (g.a) x to the input.
AsymmetryReport lora_asymmetry_check(const model::ModelConfig& cfg, uint64_t seed,
                                     int multi_len = 6);

} // namespace rank1lab::align
