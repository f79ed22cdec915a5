// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace kvsvd {

/// Dense row-major matrix of doubles.
///
/// Activations are row vectors that multiply weights on the right, so a
/// projection from D to n features is stored as a D x n matrix. Construction
/// from data rejects non-finite entries; element access afterwards is
/// unchecked for speed.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> values);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    Matrix transpose() const;
    Matrix block(std::size_t row0, std::size_t col0, std::size_t nrows, std::size_t ncols) const;
    std::vector<double> column(std::size_t c) const;

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& m);

/// x (length m.rows()) times m; the row-vector activation convention.
std::vector<double> vecmat(std::span<const double> x, const Matrix& m);
/// m times column vector x (length m.cols()).
std::vector<double> matvec(const Matrix& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double frobenius_norm(const Matrix& m);

struct SvdResult {
    Matrix u;                  // m x r, orthonormal columns
    std::vector<double> sigma; // r = min(m, n), nonincreasing, nonnegative
    Matrix vt;                 // r x n, orthonormal rows
};

/// Thin SVD by one-sided (Hestenes) Jacobi with cyclic sweeps.
///
/// A pair of columns is rotated while |a_p . a_q| / (|a_p| |a_q|) exceeds
/// kSvdTolerance; a sweep with no rotation ends the iteration. Throws
/// NumericalError after kSvdMaxSweeps. Singular vectors are sign-normalized
/// so the first entry of each u column with magnitude above 1e-8 is
/// positive; the matching vt row flips with it.
SvdResult svd(const Matrix& m);

inline constexpr double kSvdTolerance = 1e-12;
inline constexpr int kSvdMaxSweeps = 60;
/// sigma_min below kRankTolerance * sigma_max counts as zero.
inline constexpr double kRankTolerance = 1e-12;

struct TruncatedFactors {
    Matrix u_k;    // m x k
    Matrix sv_t_k; // k x n, diag(sigma[0..k]) * vt[0..k, :]
};

TruncatedFactors truncate(const SvdResult& s, std::size_t k);

/// u_k * sv_t_k, the rank-k approximation.
Matrix reconstruct(const TruncatedFactors& f);

double spectral_norm(const Matrix& m);

/// sigma_max / sigma_min over min(rows, cols) singular values; +infinity
/// when sigma_min < kRankTolerance * sigma_max.
double condition_number(const Matrix& m);
double condition_number(std::span<const double> sigma);

/// |m - approx|_F / |m|_F. Throws undefined_input when |m|_F is zero.
double frobenius_rel_error(const Matrix& m, const Matrix& approx);

/// Q factor of a thin QR (modified Gram-Schmidt, two passes) with the
/// implicit R diagonal positive. Requires full column rank.
Matrix orthonormal_columns(const Matrix& a);

} // namespace kvsvd
