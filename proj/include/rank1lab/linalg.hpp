// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rank1lab/errors.hpp"

namespace rank1lab::linalg {

// Dense row-major real matrix. Analysis paths are double throughout.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);                            // zero-filled
    Matrix(int rows, int cols, std::vector<double> data);  // validates finiteness

    static Matrix identity(int n);
    static Matrix outer(std::span<const double> a, std::span<const double> b);
    // trusted construction, skips the finiteness scan (internal results)
    static Matrix unchecked(int rows, int cols, std::vector<double> data);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    size_t size() const { return data_.size(); }

    Matrix transposed() const;
    std::vector<double> col(int c) const;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Thin SVD, k = min(rows, cols): u is m-by-k, v is n-by-k, both with
// orthonormal columns; s holds the k singular values in descending order.
struct SvdResult {
    Matrix u;
    std::vector<double> s;
    Matrix v;
};

// One-sided Jacobi with deterministic cyclic sweep order and a 100-sweep cap.
// Column signs are fixed so that each u column has its max-magnitude entry
// non-negative (ties broken by lowest index); the same flip is applied to v.
SvdResult svd(const Matrix& m);

// Top singular triple (sigma1, u1, v1) with the sign convention above.
// Throws DegenerateMatrix when sigma1 < 1e-12 * max(1, frobenius_norm(m)).
struct Rank1Triple {
    double sigma1;
    std::vector<double> u1;
    std::vector<double> v1;
};
Rank1Triple rank1_triple(const Matrix& m);

double frobenius_norm(const Matrix& m);

// <a,b>_F / (|a|_F |b|_F), the standard Frobenius inner-product cosine.
double frob_cosine(const Matrix& a, const Matrix& b);

// |a (.) b|_F / (|a|_F |b|_F) -- the elementwise-product reading, always
// non-negative. Kept alongside frob_cosine so both variants are available.
double hadamard_norm_ratio(const Matrix& a, const Matrix& b);

// arccos(|x.u| / (|x| |u|)) in [0, pi/2]. u is expected to be unit length;
// the norm division makes the result robust either way.
double principal_angle(std::span<const double> x, std::span<const double> u);

// Entropy effective rank exp(-sum p_i log p_i) with p_i = s_i / sum(s).
double effective_rank(std::span<const double> s);

// Threshold-count variant: number of s_i >= tau * s_max.
int effective_rank_threshold(std::span<const double> s, double tau = 0.01);

// small vector helpers shared across modules
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

} // namespace rank1lab::linalg
