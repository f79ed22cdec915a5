// SPDX-License-Identifier: Apache-2.0

#include "kvsvd/densemat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "kvsvd/error.hpp"

namespace kvsvd {

namespace {

std::string shape(const Matrix& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
    require(rows > 0 && cols > 0, "matrix dimensions must be positive");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(rows > 0 && cols > 0, "matrix dimensions must be positive");
    require(data_.size() == rows * cols, "matrix data length does not match rows x cols");
    for (double x : data_) {
        require(std::isfinite(x), "matrix entries must be finite");
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        m(i, i) = values[i];
    }
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    require(rows.size() > 0, "from_rows needs at least one row");
    const std::size_t cols = rows.begin()->size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        require(r.size() == cols, "from_rows rows must have equal length");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Matrix(rows.size(), cols, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

Matrix Matrix::block(std::size_t row0, std::size_t col0, std::size_t nrows, std::size_t ncols) const {
    require(row0 + nrows <= rows_ && col0 + ncols <= cols_, "block out of range");
    Matrix b(nrows, ncols);
    for (std::size_t r = 0; r < nrows; ++r) {
        const auto src = row(row0 + r).subspan(col0, ncols);
        std::copy(src.begin(), src.end(), b.row(r).begin());
    }
    return b;
}

std::vector<double> Matrix::column(std::size_t c) const {
    require(c < cols_, "column index out of range");
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        out[r] = (*this)(r, c);
    }
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(), "matmul dimension mismatch: " + shape(a) + " * " + shape(b));
    Matrix c(a.rows(), b.cols());
    // i-k-j order: every c(i, j) accumulates its k terms in increasing k.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out[j] += aik * brow[j];
            }
        }
    }
    return c;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "matrix sum shape mismatch");
    Matrix c = a;
    auto out = c.data();
    const auto in = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += in[i];
    }
    return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "matrix difference shape mismatch");
    Matrix c = a;
    auto out = c.data();
    const auto in = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= in[i];
    }
    return c;
}

Matrix operator*(double s, const Matrix& m) {
    Matrix c = m;
    for (double& x : c.data()) {
        x *= s;
    }
    return c;
}

std::vector<double> vecmat(std::span<const double> x, const Matrix& m) {
    require(x.size() == m.rows(), "vecmat dimension mismatch");
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t k = 0; k < m.rows(); ++k) {
        const double xk = x[k];
        const auto mrow = m.row(k);
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out[j] += xk * mrow[j];
        }
    }
    return out;
}

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    require(x.size() == m.cols(), "matvec dimension mismatch");
    std::vector<double> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        out[i] = dot(m.row(i), x);
    }
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double norm2(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

double frobenius_norm(const Matrix& m) {
    return norm2(m.data());
}

namespace {

// Column-major scratch: column j lives at [j * rows, (j + 1) * rows).
struct ColumnSet {
    std::size_t rows;
    std::size_t cols;
    std::vector<double> data;

    std::span<double> col(std::size_t j) { return {data.data() + j * rows, rows}; }
    std::span<const double> col(std::size_t j) const { return {data.data() + j * rows, rows}; }
};

void rotate(std::span<double> p, std::span<double> q, double c, double s) {
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double xp = p[i];
        const double xq = q[i];
        p[i] = c * xp - s * xq;
        q[i] = s * xp + c * xq;
    }
}

// Replace column j of `basis` with a unit vector orthogonal to every column
// in `accepted`. Candidates are standard basis vectors; the one with the
// largest residual wins.
void complete_basis(ColumnSet& basis, std::size_t j, const std::vector<std::size_t>& accepted) {
    std::vector<double> best;
    double best_norm = -1.0;
    for (std::size_t e = 0; e < basis.rows; ++e) {
        std::vector<double> v(basis.rows, 0.0);
        v[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t a : accepted) {
                const auto col = basis.col(a);
                const double proj = dot(col, v);
                for (std::size_t i = 0; i < v.size(); ++i) {
                    v[i] -= proj * col[i];
                }
            }
        }
        const double n = norm2(v);
        if (n > best_norm) {
            best_norm = n;
            best = std::move(v);
        }
    }
    auto out = basis.col(j);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = best[i] / best_norm;
    }
}

// One-sided Jacobi for rows >= cols. Returns U (rows x cols) as columns,
// sigma, and V (cols x cols) as columns, unsorted.
void jacobi_tall(const Matrix& m, ColumnSet& a, ColumnSet& v, std::vector<double>& sigma) {
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    a = {rows, cols, std::vector<double>(rows * cols)};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            a.data[c * rows + r] = m(r, c);
        }
    }
    v = {cols, cols, std::vector<double>(cols * cols, 0.0)};
    for (std::size_t c = 0; c < cols; ++c) {
        v.data[c * cols + c] = 1.0;
    }

    bool converged = false;
    double residual = 0.0;
    for (int sweep = 0; sweep < kSvdMaxSweeps && !converged; ++sweep) {
        bool rotated = false;
        residual = 0.0;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                const double alpha = dot(a.col(p), a.col(p));
                const double beta = dot(a.col(q), a.col(q));
                const double gamma = dot(a.col(p), a.col(q));
                if (alpha == 0.0 || beta == 0.0) {
                    continue;
                }
                const double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
                residual = std::max(residual, coupling);
                if (coupling <= kSvdTolerance) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(a.col(p), a.col(q), c, s);
                rotate(v.col(p), v.col(q), c, s);
            }
        }
        converged = !rotated;
    }
    if (!converged) {
        std::ostringstream os;
        os << "svd did not converge within " << kSvdMaxSweeps << " sweeps (residual " << residual << ")";
        throw NumericalError(os.str(), residual);
    }

    sigma.assign(cols, 0.0);
    for (std::size_t j = 0; j < cols; ++j) {
        sigma[j] = norm2(a.col(j));
    }
}

} // namespace

SvdResult svd(const Matrix& m) {
    require(m.rows() > 0 && m.cols() > 0, "svd of an empty matrix");
    for (double x : m.data()) {
        require(std::isfinite(x), "svd input must be finite");
    }

    const bool wide = m.rows() < m.cols();
    const Matrix tall = wide ? m.transpose() : m;
    ColumnSet a{0, 0, {}};
    ColumnSet v{0, 0, {}};
    std::vector<double> raw_sigma;
    jacobi_tall(tall, a, v, raw_sigma);

    const std::size_t r = tall.cols();
    std::vector<std::size_t> order(r);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return raw_sigma[i] > raw_sigma[j]; });

    // Normalize left vectors; columns at rounding level get an explicit
    // orthonormal completion instead of amplified noise.
    const double sigma_max = raw_sigma.empty() ? 0.0 : raw_sigma[order[0]];
    const double floor = sigma_max * std::numeric_limits<double>::epsilon();
    ColumnSet left{tall.rows(), r, std::vector<double>(tall.rows() * r)};
    std::vector<std::size_t> accepted;
    std::vector<std::size_t> deficient;
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t j = order[k];
        const double s = raw_sigma[j];
        auto dst = left.col(k);
        if (s > floor && s > 0.0) {
            const auto src = a.col(j);
            for (std::size_t i = 0; i < dst.size(); ++i) {
                dst[i] = src[i] / s;
            }
            accepted.push_back(k);
        } else {
            deficient.push_back(k);
        }
    }
    for (std::size_t k : deficient) {
        complete_basis(left, k, accepted);
        accepted.push_back(k);
    }

    SvdResult out;
    out.sigma.resize(r);
    Matrix u_tall(tall.rows(), r);
    Matrix v_tall(r, r); // columns are right singular vectors of `tall`
    for (std::size_t k = 0; k < r; ++k) {
        out.sigma[k] = raw_sigma[order[k]];
        const auto lc = left.col(k);
        for (std::size_t i = 0; i < tall.rows(); ++i) {
            u_tall(i, k) = lc[i];
        }
        const auto vc = v.col(order[k]);
        for (std::size_t i = 0; i < r; ++i) {
            v_tall(i, k) = vc[i];
        }
    }

    if (wide) {
        // m = tall^T = V S U^T
        out.u = std::move(v_tall);
        out.vt = u_tall.transpose();
    } else {
        out.u = std::move(u_tall);
        out.vt = v_tall.transpose();
    }

    for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t i = 0; i < out.u.rows(); ++i) {
            const double x = out.u(i, k);
            if (std::abs(x) > 1e-8) {
                if (x < 0.0) {
                    for (std::size_t t = 0; t < out.u.rows(); ++t) {
                        out.u(t, k) = -out.u(t, k);
                    }
                    for (double& y : out.vt.row(k)) {
                        y = -y;
                    }
                }
                break;
            }
        }
    }
    return out;
}

TruncatedFactors truncate(const SvdResult& s, std::size_t k) {
    require(k >= 1 && k <= s.sigma.size(), "truncation rank out of range");
    TruncatedFactors f;
    f.u_k = s.u.block(0, 0, s.u.rows(), k);
    f.sv_t_k = s.vt.block(0, 0, k, s.vt.cols());
    for (std::size_t i = 0; i < k; ++i) {
        for (double& x : f.sv_t_k.row(i)) {
            x *= s.sigma[i];
        }
    }
    return f;
}

Matrix reconstruct(const TruncatedFactors& f) {
    return matmul(f.u_k, f.sv_t_k);
}

double spectral_norm(const Matrix& m) {
    return svd(m).sigma.front();
}

double condition_number(std::span<const double> sigma) {
    require(!sigma.empty(), "condition number of an empty spectrum");
    const double smax = sigma.front();
    const double smin = sigma.back();
    if (smax == 0.0 || smin < kRankTolerance * smax) {
        return std::numeric_limits<double>::infinity();
    }
    return smax / smin;
}

double condition_number(const Matrix& m) {
    const auto s = svd(m);
    return condition_number(s.sigma);
}

double frobenius_rel_error(const Matrix& m, const Matrix& approx) {
    require(m.rows() == approx.rows() && m.cols() == approx.cols(), "frobenius_rel_error shape mismatch");
    const double denom = frobenius_norm(m);
    if (denom == 0.0) {
        fail(ErrorKind::undefined_input, "relative error undefined for a zero matrix");
    }
    return frobenius_norm(m - approx) / denom;
}

Matrix orthonormal_columns(const Matrix& a) {
    require(a.rows() >= a.cols(), "orthonormal_columns needs rows >= cols");
    ColumnSet q{a.rows(), a.cols(), std::vector<double>(a.rows() * a.cols())};
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            q.data[c * a.rows() + r] = a(r, c);
        }
    }
    for (std::size_t j = 0; j < a.cols(); ++j) {
        auto col = q.col(j);
        const double original = norm2(col);
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t i = 0; i < j; ++i) {
                const auto prev = q.col(i);
                const double proj = dot(prev, col);
                for (std::size_t t = 0; t < col.size(); ++t) {
                    col[t] -= proj * prev[t];
                }
            }
        }
        const double n = norm2(col);
        if (!(n > 1e-10 * original) || n == 0.0) {
            fail(ErrorKind::numerical, "orthonormal_columns: input is numerically rank deficient");
        }
        for (double& x : col) {
            x /= n;
        }
    }
    Matrix out(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
            out(r, c) = q.data[c * a.rows() + r];
        }
    }
    return out;
}

} // namespace kvsvd
