// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "rank1lab/linalg.hpp"
#include "rank1lab/rng.hpp"

using namespace rank1lab;
using linalg::Matrix;

namespace {

Matrix random_matrix(int rows, int cols, RngStream& rng, double scale = 1.0) {
    std::vector<double> d(static_cast<size_t>(rows) * cols);
    for (auto& v : d) v = scale * rng.normal();
    return Matrix(rows, cols, std::move(d));
}

Matrix reconstruct(const linalg::SvdResult& r) {
    const int m = r.u.rows();
    const int n = r.v.rows();
    const int k = static_cast<int>(r.s.size());
    Matrix out(m, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int c = 0; c < k; ++c) acc += r.u.at(i, c) * r.s[c] * r.v.at(j, c);
            out.at(i, j) = acc;
        }
    return out;
}

double max_abs_offdiag_gram(const Matrix& q) {
    // max |q^T q - I|
    double worst = 0.0;
    for (int a = 0; a < q.cols(); ++a)
        for (int b = 0; b < q.cols(); ++b) {
            double acc = 0.0;
            for (int i = 0; i < q.rows(); ++i) acc += q.at(i, a) * q.at(i, b);
            worst = std::max(worst, std::abs(acc - (a == b ? 1.0 : 0.0)));
        }
    return worst;
}

} // namespace

TEST_CASE("svd of diagonal matrix") {
    Matrix m(2, 2, {3, 0, 0, 1});
    auto r = linalg::svd(m);
    CHECK(r.s[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r.s[1] == doctest::Approx(1.0).epsilon(1e-12));
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            CHECK(std::abs(r.u.at(i, j)) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
            CHECK(std::abs(r.v.at(i, j)) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
        }
}

TEST_CASE("svd of zero matrix keeps orthonormal factors") {
    Matrix m(4, 3);
    auto r = linalg::svd(m);
    CHECK(r.s == std::vector<double>{0, 0, 0});
    CHECK(max_abs_offdiag_gram(r.u) <= 1e-12);
    CHECK(max_abs_offdiag_gram(r.v) <= 1e-12);
}

TEST_CASE("svd singular values match independent eigensolver") {
    auto rng = RngStream::from(42, {1});
    Matrix m = random_matrix(5, 3, rng);
    auto r = linalg::svd(m);
    auto ev = oracles::symmetric_eigenvalues(oracles::gram(m.data(), 5, 3), 3);
    for (int i = 0; i < 3; ++i) {
        const double expect = std::sqrt(std::max(0.0, ev[i]));
        CHECK(r.s[i] == doctest::Approx(expect).epsilon(1e-8));
    }
    // small-case cross-check against the closed-form characteristic polynomial
    auto g = oracles::gram(m.data(), 5, 3);
    auto ev3 = oracles::charpoly_eigenvalues_3x3(g);
    for (int i = 0; i < 3; ++i) CHECK(ev[i] == doctest::Approx(ev3[i]).epsilon(1e-8));
}

TEST_CASE("svd reconstruction and orthonormality over assorted shapes") {
    auto rng = RngStream::from(7, {2});
    const int shapes[][2] = {{1, 1}, {3, 7}, {7, 3}, {16, 16}, {40, 9}, {9, 40}, {64, 33}};
    for (auto& sh : shapes) {
        Matrix m = random_matrix(sh[0], sh[1], rng);
        auto r = linalg::svd(m);
        Matrix back = reconstruct(r);
        double err = 0.0;
        for (size_t i = 0; i < m.size(); ++i) {
            const double d = back.data()[i] - m.data()[i];
            err += d * d;
        }
        CHECK(std::sqrt(err) <= 1e-8 * std::max(1e-30, linalg::frobenius_norm(m)));
        CHECK(max_abs_offdiag_gram(r.u) <= 1e-8);
        CHECK(max_abs_offdiag_gram(r.v) <= 1e-8);
        for (size_t i = 0; i + 1 < r.s.size(); ++i) CHECK(r.s[i] >= r.s[i + 1]);
    }
}

TEST_CASE("svd handles rank deficiency and repeated singular values") {
    auto rng = RngStream::from(9, {3});
    // rank-2 via product of 6x2 and 2x5
    Matrix a = random_matrix(6, 2, rng);
    Matrix b = random_matrix(2, 5, rng);
    Matrix m(6, 5);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 5; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 2; ++k) acc += a.at(i, k) * b.at(k, j);
            m.at(i, j) = acc;
        }
    auto r = linalg::svd(m);
    CHECK(r.s[2] <= 1e-10 * r.s[0]);
    CHECK(max_abs_offdiag_gram(r.u) <= 1e-8);
    Matrix back = reconstruct(r);
    for (size_t i = 0; i < m.size(); ++i)
        CHECK(back.data()[i] == doctest::Approx(m.data()[i]).epsilon(1e-8));

    // repeated singular values: diag(3,3,1) embedded in a rotated frame
    Matrix d(3, 3, {3, 0, 0, 0, 3, 0, 0, 0, 1});
    auto rd = linalg::svd(d);
    CHECK(rd.s[0] == doctest::Approx(3.0));
    CHECK(rd.s[1] == doctest::Approx(3.0));
    CHECK(rd.s[2] == doctest::Approx(1.0));
}

TEST_CASE("svd is deterministic") {
    auto rng = RngStream::from(11, {4});
    Matrix m = random_matrix(12, 8, rng);
    auto r1 = linalg::svd(m);
    auto r2 = linalg::svd(m);
    CHECK(r1.s == r2.s);
    CHECK(r1.u.data() == r2.u.data());
    CHECK(r1.v.data() == r2.v.data());
}

TEST_CASE("rank1_triple basics") {
    Matrix m(2, 2, {2, 0, 0, 0});
    auto t = linalg::rank1_triple(m);
    CHECK(t.sigma1 == doctest::Approx(2.0));
    CHECK(t.u1[0] == doctest::Approx(1.0));
    CHECK(std::abs(t.u1[1]) <= 1e-12);
    CHECK(t.v1[0] == doctest::Approx(1.0));

    auto rng = RngStream::from(3, {5});
    std::vector<double> a(6), b(4);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    Matrix o = Matrix::outer(a, b);
    auto t2 = linalg::rank1_triple(o);
    CHECK(t2.sigma1 == doctest::Approx(linalg::norm2(a) * linalg::norm2(b)).epsilon(1e-10));
    const double cosu = std::abs(linalg::dot(t2.u1, a)) / linalg::norm2(a);
    CHECK(cosu == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("rank1_triple agrees with full svd and applies the sign convention") {
    auto rng = RngStream::from(5, {6});
    Matrix m = random_matrix(6, 4, rng);
    auto full = linalg::svd(m);
    auto t = linalg::rank1_triple(m);
    CHECK(t.sigma1 == doctest::Approx(full.s[0]).epsilon(1e-12));
    for (int i = 0; i < 6; ++i) CHECK(t.u1[i] == doctest::Approx(full.u.at(i, 0)).epsilon(1e-12));
    for (int i = 0; i < 4; ++i) CHECK(t.v1[i] == doctest::Approx(full.v.at(i, 0)).epsilon(1e-12));
    // convention: max-|entry| of u1 is non-negative
    for (int trial = 0; trial < 20; ++trial) {
        Matrix x = random_matrix(5, 5, rng);
        auto tr = linalg::rank1_triple(x);
        double best = -1.0;
        int arg = 0;
        for (int i = 0; i < 5; ++i)
            if (std::abs(tr.u1[i]) > best) {
                best = std::abs(tr.u1[i]);
                arg = i;
            }
        CHECK(tr.u1[arg] >= 0.0);
    }
    CHECK_THROWS_AS(linalg::rank1_triple(Matrix(3, 3)), DegenerateMatrix);
}

TEST_CASE("eckart-young: top triple beats random rank-1 competitors") {
    auto rng = RngStream::from(17, {7});
    Matrix m = random_matrix(8, 6, rng);
    auto t = linalg::rank1_triple(m);
    Matrix best = Matrix::outer(t.u1, t.v1);
    for (auto& v : best.data()) v *= t.sigma1;
    double err_best = 0.0;
    for (size_t i = 0; i < m.size(); ++i) {
        const double d = m.data()[i] - best.data()[i];
        err_best += d * d;
    }
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> a(8), b(6);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        Matrix r = Matrix::outer(a, b);
        const double scale = t.sigma1 / linalg::frobenius_norm(r);
        double err = 0.0;
        for (size_t i = 0; i < m.size(); ++i) {
            const double d = m.data()[i] - scale * r.data()[i];
            err += d * d;
        }
        CHECK(err + 1e-12 >= err_best);
    }
}

TEST_CASE("frobenius_norm") {
    CHECK(linalg::frobenius_norm(Matrix::identity(3)) == doctest::Approx(std::sqrt(3.0)));
    CHECK(linalg::frobenius_norm(Matrix(2, 2)) == 0.0);
    CHECK(linalg::frobenius_norm(Matrix(1, 2, {3, 4})) == doctest::Approx(5.0));
}

TEST_CASE("frob_cosine values and properties") {
    auto rng = RngStream::from(23, {8});
    Matrix a = random_matrix(3, 4, rng);
    Matrix neg = a;
    for (auto& v : neg.data()) v = -v;
    CHECK(linalg::frob_cosine(a, a) == doctest::Approx(1.0));
    CHECK(linalg::frob_cosine(a, neg) == doctest::Approx(-1.0));
    CHECK(linalg::frob_cosine(Matrix(2, 2, {1, 0, 0, 0}), Matrix(2, 2, {0, 0, 0, 1})) ==
          doctest::Approx(0.0));

    Matrix b = random_matrix(3, 4, rng);
    const double c = linalg::frob_cosine(a, b);
    CHECK(linalg::frob_cosine(b, a) == doctest::Approx(c).epsilon(1e-12));
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
    Matrix a2 = a;
    for (auto& v : a2.data()) v *= -2.5;
    CHECK(linalg::frob_cosine(a2, b) == doctest::Approx(-c).epsilon(1e-10));

    CHECK_THROWS_AS(linalg::frob_cosine(a, Matrix(4, 3)), ShapeMismatch);
    CHECK_THROWS_AS(linalg::frob_cosine(a, Matrix(3, 4)), ZeroNorm);
}

TEST_CASE("hadamard_norm_ratio") {
    Matrix i2 = Matrix::identity(2);
    CHECK(linalg::hadamard_norm_ratio(i2, i2) == doctest::Approx(std::sqrt(2.0) / 2.0));
    // disjoint supports
    CHECK(linalg::hadamard_norm_ratio(Matrix(2, 2, {1, 2, 0, 0}), Matrix(2, 2, {0, 0, 3, 4})) ==
          doctest::Approx(0.0));
    // seeded pair vs direct summation
    auto rng = RngStream::from(29, {9});
    Matrix a = random_matrix(4, 5, rng);
    Matrix b = random_matrix(4, 5, rng);
    double num = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += a.data()[i] * a.data()[i] * b.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    const double expect = std::sqrt(num) / (std::sqrt(na) * std::sqrt(nb));
    CHECK(linalg::hadamard_norm_ratio(a, b) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(linalg::hadamard_norm_ratio(a, b) >= 0.0);
    CHECK(linalg::hadamard_norm_ratio(a, b) <= 1.0);
}

TEST_CASE("principal_angle") {
    std::vector<double> u{1, 0};
    CHECK(linalg::principal_angle(std::vector<double>{1, 0}, u) == doctest::Approx(0.0));
    CHECK(linalg::principal_angle(std::vector<double>{0, 2}, u) ==
          doctest::Approx(M_PI / 2).epsilon(1e-12));
    CHECK(linalg::principal_angle(std::vector<double>{1, 1}, u) ==
          doctest::Approx(M_PI / 4).epsilon(1e-12));

    auto rng = RngStream::from(31, {10});
    std::vector<double> x(6);
    for (auto& v : x) v = rng.normal();
    std::vector<double> uu(6);
    for (auto& v : uu) v = rng.normal();
    const double n = linalg::norm2(uu);
    for (auto& v : uu) v /= n;
    const double base = linalg::principal_angle(x, uu);
    std::vector<double> negx = x, cx = x;
    for (auto& v : negx) v = -v;
    for (auto& v : cx) v *= 3.7;
    CHECK(linalg::principal_angle(negx, uu) == doctest::Approx(base).epsilon(1e-12));
    CHECK(linalg::principal_angle(cx, uu) == doctest::Approx(base).epsilon(1e-12));
    CHECK_THROWS_AS(linalg::principal_angle(std::vector<double>{0, 0}, u), ZeroNorm);
}

TEST_CASE("effective_rank") {
    CHECK(linalg::effective_rank(std::vector<double>{1, 1, 1, 1}) == doctest::Approx(4.0));
    CHECK(linalg::effective_rank(std::vector<double>{1, 0, 0}) == doctest::Approx(1.0));
    // entropy of [.5,.25,.25] is 1.5 ln 2, so the effective rank is 2^1.5
    CHECK(linalg::effective_rank(std::vector<double>{2, 1, 1}) ==
          doctest::Approx(std::pow(2.0, 1.5)).epsilon(1e-12));
    // scale invariance
    CHECK(linalg::effective_rank(std::vector<double>{20, 10, 10}) ==
          doctest::Approx(std::pow(2.0, 1.5)).epsilon(1e-12));
    CHECK_THROWS_AS(linalg::effective_rank(std::vector<double>{0, 0}), AllZero);

    CHECK(linalg::effective_rank_threshold(std::vector<double>{1, 0.5, 0.005}, 0.01) == 2);
    CHECK(linalg::effective_rank_threshold(std::vector<double>{1, 0.5, 0.005}, 0.001) == 3);
}
