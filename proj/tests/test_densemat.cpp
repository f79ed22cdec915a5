// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "kvsvd/densemat.hpp"
#include "kvsvd/error.hpp"
#include "kvsvd/rng.hpp"
#include "oracles.hpp"

using namespace kvsvd;

namespace {

Matrix diag3(double a, double b, double c) {
    const double v[] = {a, b, c};
    return Matrix::diagonal(v);
}

double orthonormality_defect(const Matrix& q) {
    // max |Q^T Q - I| over columns of q
    const Matrix g = oracle::triple_loop(q.transpose(), q);
    return oracle::max_abs_diff(g, Matrix::identity(g.rows()));
}

void expect_kind(const std::function<void()>& fn, ErrorKind kind) {
    try {
        fn();
        FAIL() << "no exception";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

} // namespace

TEST(Matrix, RejectsNonFiniteAndBadLength) {
    expect_kind([] { Matrix(2, 2, {1.0, 2.0, 3.0}); }, ErrorKind::contract);
    expect_kind([] { Matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()}); }, ErrorKind::contract);
    expect_kind([] { Matrix(1, 1, {std::numeric_limits<double>::infinity()}); }, ErrorKind::contract);
    expect_kind([] { Matrix(0, 3); }, ErrorKind::contract);
}

TEST(Matmul, IdentityIsNeutral) {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, ColumnSelection) {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{0}, {1}});
    EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(11);
    const Matrix a = oracle::gaussian(rng, 7, 5);
    const Matrix b = oracle::gaussian(rng, 5, 3);
    EXPECT_LT(oracle::max_abs_diff(matmul(a, b), oracle::triple_loop(a, b)), 1e-12);
}

TEST(Matmul, DimensionMismatchIsContractError) {
    expect_kind([] { matmul(Matrix(2, 3), Matrix(2, 3)); }, ErrorKind::contract);
}

TEST(Matmul, VecmatAndMatvecAgreeWithMatmul) {
    Rng rng(12);
    const Matrix m = oracle::gaussian(rng, 4, 6);
    const Matrix x = oracle::gaussian(rng, 1, 4);
    const Matrix y = oracle::gaussian(rng, 6, 1);
    const auto xm = vecmat(x.row(0), m);
    const auto my = matvec(m, y.data());
    const Matrix xm_ref = oracle::triple_loop(x, m);
    const Matrix my_ref = oracle::triple_loop(m, y);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_NEAR(xm[i], xm_ref(0, i), 1e-12);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(my[i], my_ref(i, 0), 1e-12);
    }
}

TEST(Svd, DiagonalMatrix) {
    const auto s = svd(diag3(3, 2, 1));
    ASSERT_EQ(s.sigma.size(), 3u);
    EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
    EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
    EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
}

TEST(Svd, UnsortedDiagonalIsSorted) {
    const auto s = svd(diag3(1, 3, 2));
    EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
    EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
    EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
}

TEST(Svd, RankOne) {
    const auto s = svd(Matrix::from_rows({{1, 1}, {0, 0}}));
    EXPECT_NEAR(s.sigma[0], std::sqrt(2.0), 1e-14);
    EXPECT_NEAR(s.sigma[1], 0.0, 1e-14);
    EXPECT_LT(orthonormality_defect(s.u), 1e-8);
}

TEST(Svd, ZeroMatrixHasOrthonormalFactors) {
    const auto s = svd(Matrix(4, 3));
    for (double x : s.sigma) {
        EXPECT_EQ(x, 0.0);
    }
    EXPECT_LT(orthonormality_defect(s.u), 1e-8);
    EXPECT_LT(orthonormality_defect(s.vt.transpose()), 1e-8);
}

TEST(Svd, RandomTallMatchesEigenOracle) {
    Rng rng(64);
    const Matrix m = oracle::gaussian(rng, 64, 16);
    const auto s = svd(m);
    const auto ref = oracle::singular_values(m);
    ASSERT_EQ(s.sigma.size(), 16u);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_NEAR(s.sigma[i], ref[i], 1e-8 * ref[0]);
    }
    const Matrix back = matmul(matmul(s.u, Matrix::diagonal(s.sigma)), s.vt);
    EXPECT_LT(frobenius_rel_error(m, back), 1e-10);
    EXPECT_LT(orthonormality_defect(s.u), 1e-8);
    EXPECT_LT(orthonormality_defect(s.vt.transpose()), 1e-8);
}

TEST(Svd, WideMatrix) {
    Rng rng(65);
    const Matrix m = oracle::gaussian(rng, 6, 15);
    const auto s = svd(m);
    EXPECT_EQ(s.u.rows(), 6u);
    EXPECT_EQ(s.u.cols(), 6u);
    EXPECT_EQ(s.vt.rows(), 6u);
    EXPECT_EQ(s.vt.cols(), 15u);
    const auto ref = oracle::singular_values(m);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_NEAR(s.sigma[i], ref[i], 1e-8 * ref[0]);
    }
    EXPECT_LT(frobenius_rel_error(m, matmul(matmul(s.u, Matrix::diagonal(s.sigma)), s.vt)), 1e-10);
}

TEST(Svd, SignConventionFirstNonzeroPositive) {
    Rng rng(66);
    const auto s = svd(oracle::gaussian(rng, 9, 5));
    for (std::size_t c = 0; c < s.u.cols(); ++c) {
        for (std::size_t r = 0; r < s.u.rows(); ++r) {
            if (std::abs(s.u(r, c)) > 1e-8) {
                EXPECT_GT(s.u(r, c), 0.0);
                break;
            }
        }
    }
}

TEST(Svd, SignFlippedInputGivesSameSigmaAndConventionalU) {
    Rng rng(67);
    const Matrix m = oracle::gaussian(rng, 8, 4);
    const auto a = svd(m);
    const auto b = svd(-1.0 * m);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(a.sigma[i], b.sigma[i], 1e-12);
    }
    EXPECT_LT(oracle::max_abs_diff(a.u, b.u), 1e-10);
    EXPECT_LT(oracle::max_abs_diff(a.vt, -1.0 * b.vt), 1e-10);
}

TEST(Svd, RotationInvariance) {
    Rng rng(68);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix m = oracle::gaussian(rng, 10, 7);
        const Matrix q1 = oracle::random_orthogonal(rng, 10);
        const Matrix q2 = oracle::random_orthogonal(rng, 7);
        const auto a = svd(m).sigma;
        const auto b = svd(matmul(matmul(q1, m), q2)).sigma;
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_NEAR(a[i], b[i], 1e-8);
        }
    }
}

TEST(Svd, Deterministic) {
    Rng rng(69);
    const Matrix m = oracle::gaussian(rng, 20, 11);
    const auto a = svd(m);
    const auto b = svd(m);
    EXPECT_EQ(a.u, b.u);
    EXPECT_EQ(a.sigma, b.sigma);
    EXPECT_EQ(a.vt, b.vt);
}

TEST(Svd, IllConditionedRoundTrip) {
    Rng rng(70);
    const Matrix q1 = oracle::random_orthogonal(rng, 12);
    const Matrix q2 = oracle::random_orthogonal(rng, 12);
    std::vector<double> d(12);
    for (std::size_t i = 0; i < 12; ++i) {
        d[i] = std::pow(0.1, static_cast<double>(i));
    }
    const Matrix m = matmul(matmul(q1, Matrix::diagonal(d)), q2);
    const auto s = svd(m);
    EXPECT_LT(frobenius_rel_error(m, matmul(matmul(s.u, Matrix::diagonal(s.sigma)), s.vt)), 1e-10);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_NEAR(s.sigma[i], d[i], 1e-10);
    }
}

TEST(Truncate, FullRankIsLossless) {
    Rng rng(71);
    const Matrix m = oracle::gaussian(rng, 9, 6);
    EXPECT_LT(frobenius_rel_error(m, reconstruct(truncate(svd(m), 6))), 1e-10);
}

TEST(Truncate, DiagonalDropsSmallest) {
    const Matrix r = reconstruct(truncate(svd(diag3(3, 2, 1)), 2));
    EXPECT_LT(oracle::max_abs_diff(r, diag3(3, 2, 0)), 1e-14);
}

TEST(Truncate, FactorShapes) {
    Rng rng(72);
    const auto f = truncate(svd(oracle::gaussian(rng, 9, 6)), 3);
    EXPECT_EQ(f.u_k.rows(), 9u);
    EXPECT_EQ(f.u_k.cols(), 3u);
    EXPECT_EQ(f.sv_t_k.rows(), 3u);
    EXPECT_EQ(f.sv_t_k.cols(), 6u);
}

TEST(Truncate, RankOutOfRange) {
    const auto s = svd(diag3(3, 2, 1));
    expect_kind([&] { truncate(s, 0); }, ErrorKind::contract);
    expect_kind([&] { truncate(s, 4); }, ErrorKind::contract);
}

TEST(Truncate, EckartYoungRandom32x8) {
    Rng rng(73);
    const Matrix m = oracle::gaussian(rng, 32, 8);
    const auto s = svd(m);
    const Matrix r = reconstruct(truncate(s, 4));
    const double err = std::pow(frobenius_norm(m - r), 2);
    double tail = 0.0;
    for (std::size_t i = 4; i < 8; ++i) {
        tail += s.sigma[i] * s.sigma[i];
    }
    EXPECT_NEAR(err, tail, 1e-9 * tail);
}

TEST(Truncate, EckartYoungAllRanks) {
    Rng rng(74);
    for (auto [r, c] : {std::pair{5, 5}, std::pair{12, 4}, std::pair{4, 12}, std::pair{30, 17}}) {
        const Matrix m = oracle::gaussian(rng, r, c);
        const auto s = svd(m);
        const double fro2 = std::pow(frobenius_norm(m), 2);
        for (std::size_t k = 1; k <= s.sigma.size(); ++k) {
            double tail = 0.0;
            for (std::size_t i = k; i < s.sigma.size(); ++i) {
                tail += s.sigma[i] * s.sigma[i];
            }
            const double err = std::pow(frobenius_norm(m - reconstruct(truncate(s, k))), 2);
            EXPECT_LT(std::abs(err - tail), 1e-9 * fro2) << r << "x" << c << " k=" << k;
        }
    }
}

TEST(SpectralNorm, Examples) {
    EXPECT_NEAR(spectral_norm(Matrix::identity(5)), 1.0, 1e-14);
    EXPECT_NEAR(spectral_norm(Matrix::from_rows({{5, 0}, {0, 1}})), 5.0, 1e-14);
}

TEST(SpectralNorm, MatchesPowerIteration) {
    Rng rng(75);
    const Matrix m = oracle::gaussian(rng, 20, 20);
    const double ref = oracle::power_iteration_norm(m);
    EXPECT_NEAR(spectral_norm(m), ref, 1e-6 * ref);
    EXPECT_NEAR(spectral_norm(m), svd(m).sigma[0], 1e-8);
}

TEST(ConditionNumber, Examples) {
    EXPECT_NEAR(condition_number(Matrix::identity(4)), 1.0, 1e-14);
    EXPECT_NEAR(condition_number(diag3(10, 2, 1)), 10.0, 1e-12);
    EXPECT_TRUE(std::isinf(condition_number(Matrix::from_rows({{1, 0}, {0, 0}}))));
}

TEST(ConditionNumber, ScaleInvariant) {
    Rng rng(76);
    const Matrix m = oracle::gaussian(rng, 8, 6);
    const double k = condition_number(m);
    for (double c : {-3.0, 0.01, 250.0}) {
        EXPECT_NEAR(condition_number(c * m), k, 1e-8 * k);
    }
}

TEST(ConditionNumber, BelowRankToleranceIsInfinite) {
    const Matrix m = Matrix::from_rows({{1, 0}, {0, 1e-13}});
    EXPECT_TRUE(std::isinf(condition_number(m)));
    const Matrix n = Matrix::from_rows({{1, 0}, {0, 1e-11}});
    EXPECT_NEAR(condition_number(n), 1e11, 1e-3);
}

TEST(FrobeniusRelError, Examples) {
    Rng rng(77);
    const Matrix m = oracle::gaussian(rng, 4, 4);
    EXPECT_EQ(frobenius_rel_error(m, m), 0.0);
    EXPECT_NEAR(frobenius_rel_error(Matrix::from_rows({{3, 0}, {0, 4}}), Matrix(2, 2)), 1.0, 1e-15);
    expect_kind([] { frobenius_rel_error(Matrix(2, 2), Matrix(2, 2)); }, ErrorKind::undefined_input);
}

TEST(FrobeniusRelError, TruncationMatchesSigmaTail) {
    Rng rng(78);
    const Matrix m = oracle::gaussian(rng, 15, 9);
    const auto s = svd(m);
    double total = 0.0;
    for (double x : s.sigma) {
        total += x * x;
    }
    for (std::size_t k = 1; k < 9; ++k) {
        double tail = 0.0;
        for (std::size_t i = k; i < 9; ++i) {
            tail += s.sigma[i] * s.sigma[i];
        }
        EXPECT_NEAR(frobenius_rel_error(m, reconstruct(truncate(s, k))), std::sqrt(tail / total), 1e-10);
    }
}

TEST(OrthonormalColumns, Orthonormal) {
    Rng rng(79);
    const Matrix q = orthonormal_columns(oracle::gaussian(rng, 30, 12));
    EXPECT_LT(orthonormality_defect(q), 1e-12);
}
