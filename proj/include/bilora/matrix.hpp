// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bilora/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bilora {

/// Dense row-major matrix of doubles.
///
/// Every weight, factor, gradient and perturbation in the library is one of
/// these. Arithmetic loops run in a fixed order so results are bitwise
/// reproducible across runs.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) throw ContractViolation("Matrix: ragged initializer");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }

    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }
    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    /// Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads compare by bits).
    bool bitwise_equal(const Matrix& o) const noexcept {
        if (!same_shape(o)) return false;
        return std::equal(data_.begin(), data_.end(), o.data_.begin(), [](double a, double b) {
            return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
        });
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) noexcept {
        for (auto& v : data_) v *= s;
        return *this;
    }
    /// this += s * o
    Matrix& add_scaled(const Matrix& o, double s) {
        require_same(o, "add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
        return *this;
    }
    void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

private:
    void require_same(const Matrix& o, const char* op) const {
        if (!same_shape(o))
            throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string() +
                                    " vs " + o.shape_string());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

/// Standard product. The k-sum for every output entry runs in ascending k.
inline Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
    if (lhs.cols() != rhs.rows())
        throw ContractViolation("matmul: inner dimension mismatch " + lhs.shape_string() + " * " +
                                rhs.shape_string());
    const std::size_t m = lhs.rows(), k = lhs.cols(), n = rhs.cols();
    Matrix out(m, n);
    const double* a = lhs.data();
    const double* b = rhs.data();
    double* c = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return out;
}

/// lhsᵀ · rhs
inline Matrix matmul_tn(const Matrix& lhs, const Matrix& rhs) { return matmul(transpose(lhs), rhs); }
/// lhs · rhsᵀ
inline Matrix matmul_nt(const Matrix& lhs, const Matrix& rhs) { return matmul(lhs, transpose(rhs)); }

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ContractViolation("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(const Matrix& m) noexcept {
    double s = 0.0;
    for (double v : m.values()) s += v * v;
    return s;
}

inline double frobenius_norm(const Matrix& m) noexcept { return std::sqrt(squared_norm(m)); }

/// Cosine of two flat vectors; returns 0 when either has zero norm.
inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = std::sqrt(dot(a, a));
    const double nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Orthonormal basis of Col(basis) by modified Gram-Schmidt with one
/// reorthogonalization pass. Columns whose residual norm falls below
/// 1e-12 times the largest input column norm are dropped, so rank-deficient
/// (including all-zero) bases are accepted. Result is m×q with q ≤ min(m, r).
inline Matrix orthonormal_columns(const Matrix& basis) {
    const std::size_t m = basis.rows(), r = basis.cols();
    double lead = 0.0;
    for (std::size_t j = 0; j < r; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += basis(i, j) * basis(i, j);
        lead = std::max(lead, std::sqrt(s));
    }
    std::vector<std::vector<double>> kept;
    const double tol = 1e-12 * lead;
    for (std::size_t j = 0; j < r && lead > 0.0 && kept.size() < m; ++j) {
        std::vector<double> v(m);
        for (std::size_t i = 0; i < m; ++i) v[i] = basis(i, j);
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& q : kept) {
                const double c = dot(q, v);
                for (std::size_t i = 0; i < m; ++i) v[i] -= c * q[i];
            }
        }
        const double nv = std::sqrt(dot(v, v));
        if (nv <= tol) continue;
        for (auto& x : v) x /= nv;
        kept.push_back(std::move(v));
    }
    Matrix q(m, kept.size());
    for (std::size_t j = 0; j < kept.size(); ++j)
        for (std::size_t i = 0; i < m; ++i) q(i, j) = kept[j][i];
    return q;
}

/// ‖M − P·M‖_F for an orthonormal q (P = q·qᵀ).
inline double projection_residual(const Matrix& m, const Matrix& q) {
    if (m.rows() != q.rows())
        throw ContractViolation("projection_residual: row mismatch " + m.shape_string() + " vs " +
                                q.shape_string());
    Matrix resid = m;
    // Projecting twice removes the rounding left by the first pass.
    for (int pass = 0; pass < 2 && q.cols() > 0; ++pass) {
        const Matrix coeff = matmul_tn(q, resid);
        resid -= matmul(q, coeff);
    }
    return frobenius_norm(resid);
}

/// ‖M − P·M‖_F where P projects onto Col(basis).
inline double column_space_residual(const Matrix& m, const Matrix& basis) {
    if (m.rows() != basis.rows())
        throw ContractViolation("column_space_residual: row mismatch " + m.shape_string() + " vs " +
                                basis.shape_string());
    if (basis.cols() > basis.rows())
        throw ContractViolation("column_space_residual: basis rank " +
                                std::to_string(basis.cols()) + " exceeds dimension " +
                                std::to_string(basis.rows()));
    return projection_residual(m, orthonormal_columns(basis));
}

/// ‖M − M·P‖_F where P projects onto Row(basis) (basis is r×n).
inline double row_space_residual(const Matrix& m, const Matrix& basis) {
    return column_space_residual(transpose(m), transpose(basis));
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
inline std::vector<double> symmetric_eigenvalues(Matrix a) {
    const std::size_t n = a.rows();
    if (a.cols() != n) throw ContractViolation("symmetric_eigenvalues: matrix not square");
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

/// Largest cosine of the principal angles between Col(a) and Col(b).
/// Zero when either space is trivial.
inline double max_principal_cosine(const Matrix& a, const Matrix& b) {
    const Matrix qa = orthonormal_columns(a);
    const Matrix qb = orthonormal_columns(b);
    if (qa.cols() == 0 || qb.cols() == 0) return 0.0;
    const Matrix c = matmul_tn(qa, qb);
    const auto ev = symmetric_eigenvalues(matmul_tn(c, c));
    return std::sqrt(std::clamp(ev.back(), 0.0, 1.0));
}

/// Deterministic random stream identified by (seed, stream id).
///
/// Draws come from mt19937_64 seeded through std::seed_seq, and the
/// uniform/normal transforms are written out here rather than taken from
/// <random> distributions, whose algorithms are implementation-defined.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream),
                          static_cast<std::uint32_t>(stream >> 32)};
        engine_.seed(seq);
    }

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ContractViolation("RngStream::below: empty range");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do x = engine_();
        while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do u1 = uniform();
        while (u1 == 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Matrix seeded_gaussian(std::size_t rows, std::size_t cols, RngStream& rng, double stddev) {
    if (!(stddev >= 0.0)) throw ContractViolation("seeded_gaussian: stddev must be non-negative");
    Matrix m(rows, cols);
    if (stddev == 0.0) return m;
    for (auto& v : m.values()) v = stddev * rng.normal();
    return m;
}

} // namespace bilora
