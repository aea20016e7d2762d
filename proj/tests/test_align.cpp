// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rank1lab/align.hpp"
#include "rank1lab/rng.hpp"
#include "rank1lab/spectral.hpp"

using namespace rank1lab;
using namespace rank1lab::align;
using linalg::Matrix;

namespace {

// a delta set with one layer whose top triple is known exactly
struct Crafted {
    ckpt::DeltaSet ds;
    std::vector<double> u1, v1;
    double sigma1;
};

Crafted crafted_delta(const std::string& layer, uint64_t seed) {
    auto rng = RngStream::from(seed, {0});
    Crafted c;
    c.u1.resize(6);
    c.v1.resize(5);
    for (auto& v : c.u1) v = rng.normal();
    for (auto& v : c.v1) v = rng.normal();
    const double nu = linalg::norm2(c.u1), nv = linalg::norm2(c.v1);
    for (auto& v : c.u1) v /= nu;
    for (auto& v : c.v1) v /= nv;
    c.sigma1 = 3.0;
    // sigma1 u1 v1^T plus a small orthogonal-ish second direction
    Matrix m = Matrix::outer(c.u1, c.v1);
    for (auto& v : m.data()) v *= c.sigma1;
    std::vector<double> u2(6), v2(5);
    for (auto& v : u2) v = rng.normal();
    for (auto& v : v2) v = rng.normal();
    const double pu = linalg::dot(u2, c.u1);
    for (size_t i = 0; i < u2.size(); ++i) u2[i] -= pu * c.u1[i];
    const double pv = linalg::dot(v2, c.v1);
    for (size_t i = 0; i < v2.size(); ++i) v2[i] -= pv * c.v1[i];
    const double nu2 = linalg::norm2(u2), nv2 = linalg::norm2(v2);
    for (auto& v : u2) v /= nu2;
    for (auto& v : v2) v /= nv2;
    Matrix m2 = Matrix::outer(u2, v2);
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] += 0.4 * m2.data()[i];
    c.ds.entries[layer] = ckpt::Tensor::matrix(m);
    return c;
}

model::LoraAdapter<double> adapter_for(const std::string& layer, int d_out, int d_in,
                                       const std::vector<double>& a,
                                       const std::vector<double>& b, double alpha = 1.0) {
    model::LoraAdapter<double> ad;
    ad.alpha = alpha;
    ad.r = 1;
    model::LoraAdapter<double>::Entry e;
    e.layer = layer;
    e.d_out = d_out;
    e.d_in = d_in;
    e.a = a;
    e.b = b;
    ad.index[layer] = 0;
    ad.entries.push_back(std::move(e));
    return ad;
}

} // namespace

TEST_CASE("perfectly aligned adapter: zero angles, |cos| = 1") {
    auto c = crafted_delta("layers.0.mlp.gate_proj", 3);
    std::vector<double> a = c.u1, b = c.v1;
    for (auto& v : a) v *= 1.7; // scale must not matter
    for (auto& v : b) v *= -0.3;
    auto ad = adapter_for("layers.0.mlp.gate_proj", 6, 5, a, b);
    auto rows = align_report(ad, c.ds);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].sigma1 == doctest::Approx(c.sigma1).epsilon(1e-9));
    CHECK(rows[0].theta_left == doctest::Approx(0.0).epsilon(1e-7));
    CHECK(rows[0].theta_right == doctest::Approx(0.0).epsilon(1e-7));
    CHECK(std::abs(rows[0].frob_cos) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("orthogonal output factor gives a right angle") {
    auto c = crafted_delta("layers.0.mlp.up_proj", 5);
    // build a vector orthogonal to u1
    std::vector<double> a(6, 0.0);
    a[0] = 1.0;
    const double p = linalg::dot(a, c.u1);
    for (size_t i = 0; i < a.size(); ++i) a[i] -= p * c.u1[i];
    auto ad = adapter_for("layers.0.mlp.up_proj", 6, 5, a, c.v1);
    auto rows = align_report(ad, c.ds);
    CHECK(rows[0].theta_left == doctest::Approx(M_PI / 2).epsilon(1e-7));
}

TEST_CASE("alignment values match a direct recomputation") {
    auto c = crafted_delta("layers.1.self_attn.q_proj", 7);
    auto rng = RngStream::from(13, {1});
    std::vector<double> a(6), b(5);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double alpha = 0.8;
    auto ad = adapter_for("layers.1.self_attn.q_proj", 6, 5, a, b, alpha);
    auto rows = align_report(ad, c.ds);
    REQUIRE(rows.size() == 1);

    // direct recomputation from definitions
    const Matrix dw = c.ds.entries.at("layers.1.self_attn.q_proj").to_matrix();
    auto triple = linalg::rank1_triple(dw);
    Matrix lora = Matrix::outer(a, b);
    for (auto& v : lora.data()) v *= alpha;
    Matrix rank1 = Matrix::outer(triple.u1, triple.v1);
    for (auto& v : rank1.data()) v *= triple.sigma1;
    double ip = 0, nl = 0, nr = 0;
    for (size_t i = 0; i < lora.size(); ++i) {
        ip += lora.data()[i] * rank1.data()[i];
        nl += lora.data()[i] * lora.data()[i];
        nr += rank1.data()[i] * rank1.data()[i];
    }
    CHECK(rows[0].frob_cos == doctest::Approx(ip / std::sqrt(nl * nr)).epsilon(1e-10));
    const double ca = std::abs(linalg::dot(a, triple.u1)) / linalg::norm2(a);
    const double cb = std::abs(linalg::dot(b, triple.v1)) / linalg::norm2(b);
    CHECK(rows[0].theta_left == doctest::Approx(std::acos(ca)).epsilon(1e-10));
    CHECK(rows[0].theta_right == doctest::Approx(std::acos(cb)).epsilon(1e-10));
    // the rescaled and plain elementwise variants agree (scale invariance)
    CHECK(rows[0].hadamard_ratio == doctest::Approx(rows[0].hadamard_ratio_rescaled).epsilon(1e-12));
}

TEST_CASE("rank-1 identity: |frob_cos| = cos(theta_left) cos(theta_right)") {
    for (uint64_t seed = 1; seed <= 8; ++seed) {
        auto c = crafted_delta("layers.0.mlp.down_proj", seed);
        auto rng = RngStream::from(seed, {2});
        std::vector<double> a(6), b(5);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        auto ad = adapter_for("layers.0.mlp.down_proj", 6, 5, a, b, 1.3);
        auto rows = align_report(ad, c.ds);
        CHECK(std::abs(rows[0].frob_cos) ==
              doctest::Approx(std::cos(rows[0].theta_left) * std::cos(rows[0].theta_right))
                  .epsilon(1e-8));
    }
}

TEST_CASE("angles are invariant to factor rescaling and singular-vector sign") {
    auto c = crafted_delta("layers.0.self_attn.o_proj", 11);
    auto rng = RngStream::from(17, {3});
    std::vector<double> a(6), b(5);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    auto base_rows = align_report(adapter_for("layers.0.self_attn.o_proj", 6, 5, a, b), c.ds);
    std::vector<double> a2 = a, b2 = b;
    for (auto& v : a2) v *= -4.0;
    for (auto& v : b2) v *= 0.01;
    auto scaled_rows =
        align_report(adapter_for("layers.0.self_attn.o_proj", 6, 5, a2, b2), c.ds);
    CHECK(scaled_rows[0].theta_left == doctest::Approx(base_rows[0].theta_left).epsilon(1e-12));
    CHECK(scaled_rows[0].theta_right == doctest::Approx(base_rows[0].theta_right).epsilon(1e-12));
    // flipping the delta flips u1/v1 signs together; angles are unchanged
    auto flipped = c.ds;
    for (auto& [name, t] : flipped.entries)
        for (auto& v : t.data) v = -v;
    auto flip_rows = align_report(adapter_for("layers.0.self_attn.o_proj", 6, 5, a, b), flipped);
    CHECK(flip_rows[0].theta_left == doctest::Approx(base_rows[0].theta_left).epsilon(1e-10));
    CHECK(flip_rows[0].theta_right == doctest::Approx(base_rows[0].theta_right).epsilon(1e-10));
}

TEST_CASE("rank mismatch and the r > 1 extension") {
    auto c = crafted_delta("layers.0.mlp.gate_proj", 19);
    model::LoraAdapter<double> ad;
    ad.alpha = 1.0;
    ad.r = 2;
    model::LoraAdapter<double>::Entry e;
    e.layer = "layers.0.mlp.gate_proj";
    e.d_out = 6;
    e.d_in = 5;
    auto rng = RngStream::from(23, {4});
    e.a.resize(12);
    e.b.resize(10);
    for (auto& v : e.a) v = rng.normal();
    for (auto& v : e.b) v = rng.normal();
    ad.index[e.layer] = 0;
    ad.entries.push_back(e);

    CHECK_THROWS_AS(align_report(ad, c.ds), RankMismatch);
    auto rows = align_report(ad, c.ds, /*allow_higher_rank=*/true);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].extension);
    CHECK(rows[0].theta_left >= 0.0);
    CHECK(rows[0].theta_left <= M_PI / 2);

    // oracle: cos of the first principal angle via explicit projection of u1
    // onto span(A)
    const Matrix dw = c.ds.entries.at(e.layer).to_matrix();
    auto triple = linalg::rank1_triple(dw);
    std::vector<double> col0(6), col1(6);
    for (int i = 0; i < 6; ++i) {
        col0[i] = e.a[static_cast<size_t>(i) * 2];
        col1[i] = e.a[static_cast<size_t>(i) * 2 + 1];
    }
    // Gram-Schmidt
    const double n0 = linalg::norm2(col0);
    for (auto& v : col0) v /= n0;
    const double p = linalg::dot(col1, col0);
    for (int i = 0; i < 6; ++i) col1[i] -= p * col0[i];
    const double n1 = linalg::norm2(col1);
    for (auto& v : col1) v /= n1;
    const double c0 = linalg::dot(col0, triple.u1);
    const double c1 = linalg::dot(col1, triple.u1);
    const double expect = std::sqrt(c0 * c0 + c1 * c1);
    CHECK(std::cos(rows[0].theta_left) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("missing layer in the delta set is an error") {
    auto c = crafted_delta("layers.0.mlp.gate_proj", 29);
    auto ad = adapter_for("layers.0.mlp.up_proj", 6, 5, std::vector<double>(6, 1.0),
                          std::vector<double>(5, 1.0));
    CHECK_THROWS_AS(align_report(ad, c.ds), ConfigError);
}

TEST_CASE("rank1_gradient_check report") {
    model::ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_seq_len = 8;
    auto report = rank1_gradient_check(cfg, 31, {1, 2, 3});
    REQUIRE(report.rows.size() == 7u * cfg.n_layers + 1); // proj layers + lm_head
    for (const auto& row : report.rows) {
        INFO("layer ", row.layer);
        if (!row.zero_prob) CHECK(row.ratio_prob <= 1e-6);
        if (!row.zero_logprob) CHECK(row.ratio_logprob <= 1e-6);
    }
    REQUIRE(report.growth.size() == report.rows.size());
    for (const auto& row : report.growth) {
        REQUIRE(row.ranks.size() == 3);
        for (size_t i = 0; i < row.ranks.size(); ++i) {
            INFO("layer ", row.layer, " T ", report.t_values[i]);
            CHECK(row.ranks[i] <= report.t_values[i]);
        }
    }
}

TEST_CASE("lora_asymmetry_check report") {
    model::ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_seq_len = 8;
    auto report = lora_asymmetry_check(cfg, 37, 5);
    REQUIRE(report.single.size() == 7);
    for (const auto& row : report.single) {
        INFO("layer ", row.layer);
        if (row.a_defined) CHECK(row.cos_a >= 1.0 - 1e-8);
        if (row.b_defined) CHECK(row.cos_b >= 1.0 - 1e-8);
    }
    REQUIRE(report.multi.size() == 7);
    for (const auto& row : report.multi) {
        INFO("layer ", row.layer);
        CHECK(row.grad_a_oracle_err <= 1e-10);
        CHECK(row.grad_b_oracle_err <= 1e-10);
        CHECK(row.left_dispersion >= -1e-12);
        CHECK(row.right_dispersion >= -1e-12);
        // the gradient of a lives in span{g_t} exactly (it is a weighted sum)
        CHECK(row.left_dispersion <= 1e-6);
    }
}
