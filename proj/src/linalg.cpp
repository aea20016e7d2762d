// SPDX-License-Identifier: Apache-2.0
#include "rank1lab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rank1lab::linalg {

namespace {

void check_finite(const std::vector<double>& data) {
    for (double v : data) {
        if (!std::isfinite(v)) throw Error("matrix entry is not finite");
    }
}

} // namespace

Matrix::Matrix(int rows, int cols)
    : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, 0.0) {
    if (rows < 0 || cols < 0) throw Error("negative matrix dimension");
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows < 0 || cols < 0) throw Error("negative matrix dimension");
    if (data_.size() != static_cast<size_t>(rows) * cols)
        throw ShapeMismatch("matrix data length does not match rows*cols");
    check_finite(data_);
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::outer(std::span<const double> a, std::span<const double> b) {
    Matrix m(static_cast<int>(a.size()), static_cast<int>(b.size()));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < b.size(); ++j)
            m.data()[i * b.size() + j] = a[i] * b[j];
    return m;
}

Matrix Matrix::unchecked(int rows, int cols, std::vector<double> data) {
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(data);
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (int r = 0; r < rows_; ++r)
        for (int c = 0; c < cols_; ++c)
            t.at(c, r) = at(r, c);
    return t;
}

std::vector<double> Matrix::col(int c) const {
    std::vector<double> out(rows_);
    for (int r = 0; r < rows_; ++r) out[r] = at(r, c);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

namespace {

// Work arrays are column-major so Jacobi column ops stay contiguous.
struct ColMajor {
    int m, n;
    std::vector<double> a; // m*n
    double* col(int j) { return a.data() + static_cast<size_t>(j) * m; }
    const double* col(int j) const { return a.data() + static_cast<size_t>(j) * m; }
};

constexpr double kJacobiTol = 1e-10; // relative off-diagonal threshold
constexpr int kMaxSweeps = 100;

// One-sided Jacobi on the columns of A (m >= n assumed by caller).
// Returns the rotated A (whose columns are sigma_j * u_j) and V.
void jacobi_sweeps(ColMajor& A, ColMajor& V) {
    const int m = A.m, n = A.n;
    int sweep = 0;
    for (; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double* ap = A.col(p);
                double* aq = A.col(q);
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (int i = 0; i < m; ++i) {
                    alpha += ap[i] * ap[i];
                    beta += aq[i] * aq[i];
                    gamma += ap[i] * aq[i];
                }
                const double denom = std::sqrt(alpha * beta);
                if (denom == 0.0 || std::abs(gamma) <= kJacobiTol * denom) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int i = 0; i < m; ++i) {
                    const double x = ap[i], y = aq[i];
                    ap[i] = c * x - s * y;
                    aq[i] = s * x + c * y;
                }
                double* vp = V.col(p);
                double* vq = V.col(q);
                for (int i = 0; i < n; ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) return;
    }
    throw NonConvergence("jacobi svd did not converge within 100 sweeps");
}

// Deterministic orthonormal completion for (near-)zero singular directions:
// walk the standard basis and keep the first vector with a large residual.
void complete_column(std::vector<std::vector<double>>& ucols, int m, int j) {
    for (int e = 0; e < m; ++e) {
        std::vector<double> cand(m, 0.0);
        cand[e] = 1.0;
        for (int k = 0; k < static_cast<int>(ucols.size()); ++k) {
            if (k == j || ucols[k].empty()) continue;
            const double proj = dot(cand, ucols[k]);
            for (int i = 0; i < m; ++i) cand[i] -= proj * ucols[k][i];
        }
        const double r = norm2(cand);
        if (r > 0.5) {
            for (int i = 0; i < m; ++i) cand[i] /= r;
            ucols[j] = std::move(cand);
            return;
        }
    }
    throw NonConvergence("failed to complete orthonormal basis");
}

SvdResult svd_tall(const Matrix& input) {
    const int m = input.rows();
    const int n = input.cols();

    ColMajor A{m, n, std::vector<double>(static_cast<size_t>(m) * n)};
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c)
            A.col(c)[r] = input.at(r, c);
    ColMajor V{n, n, std::vector<double>(static_cast<size_t>(n) * n, 0.0)};
    for (int j = 0; j < n; ++j) V.col(j)[j] = 1.0;

    jacobi_sweeps(A, V);

    std::vector<double> sigma(n);
    double smax = 0.0;
    for (int j = 0; j < n; ++j) {
        sigma[j] = norm2(std::span<const double>(A.col(j), static_cast<size_t>(m)));
        smax = std::max(smax, sigma[j]);
    }

    // descending order, stable on ties
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return sigma[a] > sigma[b]; });

    const double utiny = smax > 0.0 ? smax * 1e-300 : 0.0;
    std::vector<std::vector<double>> ucols(n);
    std::vector<std::vector<double>> vcols(n);
    std::vector<double> s(n);
    for (int j = 0; j < n; ++j) {
        const int src = order[j];
        s[j] = sigma[src];
        vcols[j].resize(n);
        for (int i = 0; i < n; ++i) vcols[j][i] = V.col(src)[i];
        if (sigma[src] > utiny && sigma[src] > 0.0) {
            ucols[j].resize(m);
            for (int i = 0; i < m; ++i) ucols[j][i] = A.col(src)[i] / sigma[src];
        }
    }
    for (int j = 0; j < n; ++j) {
        if (ucols[j].empty()) complete_column(ucols, m, j);
    }

    // sign convention: max-|entry| of each u column non-negative
    for (int j = 0; j < n; ++j) {
        int arg = 0;
        double best = -1.0;
        for (int i = 0; i < m; ++i) {
            const double a = std::abs(ucols[j][i]);
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        if (ucols[j][arg] < 0.0) {
            for (auto& x : ucols[j]) x = -x;
            for (auto& x : vcols[j]) x = -x;
        }
    }

    std::vector<double> udata(static_cast<size_t>(m) * n);
    std::vector<double> vdata(static_cast<size_t>(n) * n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < m; ++i) udata[static_cast<size_t>(i) * n + j] = ucols[j][i];
        for (int i = 0; i < n; ++i) vdata[static_cast<size_t>(i) * n + j] = vcols[j][i];
    }
    return SvdResult{Matrix::unchecked(m, n, std::move(udata)), std::move(s),
                     Matrix::unchecked(n, n, std::move(vdata))};
}

} // namespace

SvdResult svd(const Matrix& m) {
    if (m.rows() < 1 || m.cols() < 1) throw ShapeMismatch("svd of empty matrix");
    if (m.rows() >= m.cols()) return svd_tall(m);
    SvdResult t = svd_tall(m.transposed());
    return SvdResult{std::move(t.v), std::move(t.s), std::move(t.u)};
}

Rank1Triple rank1_triple(const Matrix& m) {
    const double fnorm = frobenius_norm(m);
    SvdResult r = svd(m);
    const double sigma1 = r.s.empty() ? 0.0 : r.s[0];
    if (sigma1 < 1e-12 * std::max(1.0, fnorm))
        throw DegenerateMatrix("top singular value is numerically zero");
    return Rank1Triple{sigma1, r.u.col(0), r.v.col(0)};
}

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

double frob_cosine(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch("frob_cosine shapes differ");
    const double na = frobenius_norm(a);
    const double nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) throw ZeroNorm("frob_cosine of zero matrix");
    const double ip = dot(a.data(), b.data());
    return std::clamp(ip / (na * nb), -1.0, 1.0);
}

double hadamard_norm_ratio(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch("hadamard_norm_ratio shapes differ");
    const double na = frobenius_norm(a);
    const double nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) throw ZeroNorm("hadamard_norm_ratio of zero matrix");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double h = a.data()[i] * b.data()[i];
        acc += h * h;
    }
    return std::clamp(std::sqrt(acc) / (na * nb), 0.0, 1.0);
}

double principal_angle(std::span<const double> x, std::span<const double> u) {
    if (x.size() != u.size()) throw ShapeMismatch("principal_angle lengths differ");
    const double nx = norm2(x);
    const double nu = norm2(u);
    if (nx == 0.0 || nu == 0.0) throw ZeroNorm("principal_angle of zero vector");
    const double c = std::clamp(std::abs(dot(x, u)) / (nx * nu), 0.0, 1.0);
    return std::acos(c);
}

double effective_rank(std::span<const double> s) {
    double total = 0.0;
    for (double v : s) {
        if (v < 0.0) throw DomainError("negative singular value");
        total += v;
    }
    if (total <= 0.0) throw AllZero("effective_rank of all-zero spectrum");
    double h = 0.0;
    for (double v : s) {
        if (v <= 0.0) continue;
        const double p = v / total;
        h -= p * std::log(p);
    }
    return std::exp(h);
}

int effective_rank_threshold(std::span<const double> s, double tau) {
    double smax = 0.0;
    for (double v : s) {
        if (v < 0.0) throw DomainError("negative singular value");
        smax = std::max(smax, v);
    }
    if (smax <= 0.0) throw AllZero("effective_rank_threshold of all-zero spectrum");
    int count = 0;
    for (double v : s)
        if (v >= tau * smax) ++count;
    return count;
}

} // namespace rank1lab::linalg
