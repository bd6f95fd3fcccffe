#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mtp2/linalg.hpp"
#include "mtp2/mtp2.hpp"
#include "mtp2/rng.hpp"
#include "mtp2/stats.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using mtp2::Matrix;
using mtp2::MtpSolution;
using mtp2::Vector;
using test_support::make_panel;
using test_support::matrix_near;

using test_support::near;

namespace {

Matrix mat2(double a, double b, double c, double d) {
    Matrix m(2, 2);
    m(0, 0) = a;
    m(0, 1) = b;
    m(1, 0) = c;
    m(1, 1) = d;
    return m;
}

double frobenius(const Matrix& m) {
    double acc = 0.0;
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) acc += m(i, j) * m(i, j);
    return std::sqrt(acc);
}

} // namespace

TEST_CASE("mle keeps a diagonal input unchanged", "[mtp2]") {
    const MtpSolution sol = mtp2::mtp2_mle(Matrix::diagonal(Vector{2, 3}));
    REQUIRE(sol.converged);
    REQUIRE(matrix_near(sol.sigma_hat, Matrix::diagonal(Vector{2, 3}), 1e-12));
    REQUIRE(near(sol.k_hat(0, 0), 0.5, 1e-12));
    REQUIRE(near(sol.k_hat(1, 1), 1.0 / 3.0, 1e-12));
    REQUIRE(near(sol.k_hat(0, 1), 0.0, 1e-12));
    REQUIRE(sol.active_set.empty());
}

TEST_CASE("mle keeps a positively correlated pair unchanged", "[mtp2]") {
    const Matrix s = mat2(1, 0.5, 0.5, 1);
    const MtpSolution sol = mtp2::mtp2_mle(s);
    REQUIRE(sol.converged);
    REQUIRE(matrix_near(sol.sigma_hat, s, 1e-8));
    // inverse of [[1,.5],[.5,1]] is (1/0.75) [[1,-.5],[-.5,1]]
    REQUIRE(near(sol.k_hat(0, 0), 4.0 / 3.0, 1e-8));
    REQUIRE(near(sol.k_hat(0, 1), -2.0 / 3.0, 1e-8));
    REQUIRE(sol.active_set.empty());
    REQUIRE(sol.kkt_residual <= 1e-7);
}

TEST_CASE("mle truncates a negatively correlated pair to diagonal", "[mtp2]") {
    const MtpSolution sol = mtp2::mtp2_mle(mat2(1, -0.3, -0.3, 1));
    REQUIRE(sol.converged);
    REQUIRE(matrix_near(sol.sigma_hat, Matrix::identity(2), 1e-8));
    REQUIRE(matrix_near(sol.k_hat, Matrix::identity(2), 1e-8));
    REQUIRE(sol.active_set == std::vector<std::pair<int, int>>{{0, 1}});
}

TEST_CASE("mle matches the 2x2 closed form", "[mtp2]") {
    mtp2::Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const double v0 = 0.5 + rng.uniform();
        const double v1 = 0.5 + rng.uniform();
        const double r = rng.uniform(-0.95, 0.95);
        const double cov = r * std::sqrt(v0 * v1);
        const Matrix s = mat2(v0, cov, cov, v1);
        const MtpSolution sol = mtp2::mtp2_mle(s);
        REQUIRE(sol.converged);
        const Matrix expect = cov >= 0.0 ? s : mat2(v0, 0, 0, v1);
        REQUIRE(matrix_near(sol.sigma_hat, expect, 1e-8));
    }
}

TEST_CASE("mle agrees with the exhaustive active-set oracle", "[mtp2]") {
    mtp2::Rng rng(29);
    for (int n = 2; n <= 4; ++n) {
        for (int trial = 0; trial < 10; ++trial) {
            const Matrix s = test_support::random_spd(n, rng);
            const MtpSolution sol = mtp2::mtp2_mle(s);
            REQUIRE(sol.converged);
            const oracles::MtpOracleResult oracle = oracles::mtp2_exhaustive_oracle(s);
            REQUIRE(oracle.found);
            REQUIRE(max_abs_diff(sol.sigma_hat, oracle.sigma) <= 1e-5);
            REQUIRE(max_abs_diff(sol.k_hat, oracle.k) <= 1e-5);
        }
    }
}

TEST_CASE("mle is scale equivariant", "[mtp2]") {
    mtp2::Rng rng(31);
    const Matrix s = test_support::random_spd(5, rng);
    const Vector scales{0.2, 3.0, 1.0, 10.0, 0.04};
    Matrix scaled(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            scaled(i, j) = scales[static_cast<std::size_t>(i)] *
                           scales[static_cast<std::size_t>(j)] * s(i, j);
    const MtpSolution base = mtp2::mtp2_mle(s);
    const MtpSolution stretched = mtp2::mtp2_mle(scaled);
    REQUIRE(base.converged);
    REQUIRE(stretched.converged);
    Matrix mapped(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            mapped(i, j) = scales[static_cast<std::size_t>(i)] *
                           scales[static_cast<std::size_t>(j)] * base.sigma_hat(i, j);
    REQUIRE(max_abs_diff(stretched.sigma_hat, mapped) <=
            1e-8 * std::max(1.0, mapped.max_abs()));
}

TEST_CASE("mle objective history never increases", "[mtp2]") {
    mtp2::Rng rng(37);
    const Matrix s = test_support::random_spd(8, rng);
    const MtpSolution sol = mtp2::mtp2_mle(s);
    REQUIRE(!sol.objective_history.empty());
    for (std::size_t i = 1; i < sol.objective_history.size(); ++i)
        REQUIRE(sol.objective_history[i] <= sol.objective_history[i - 1] + 1e-10);
}

TEST_CASE("mle reports non-convergence instead of throwing", "[mtp2]") {
    Matrix chain(3, 3, 0.0);
    chain(0, 0) = chain(1, 1) = chain(2, 2) = 1.0;
    chain(0, 1) = chain(1, 0) = 0.9;
    chain(1, 2) = chain(2, 1) = 0.9;
    const MtpSolution sol = mtp2::mtp2_mle(chain, 1e-7, 1);
    REQUIRE(!sol.converged);
    REQUIRE(sol.iterations == 1);
    // starting value plus one entry per sweep
    REQUIRE(sol.objective_history.size() == 2);
    REQUIRE(sol.sigma_hat.rows() == 3);
}

TEST_CASE("mle handles an indefinite chain input", "[mtp2]") {
    // r01 = r12 = 0.9, r02 = 0: indefinite, yet every correlation is < 1 in
    // magnitude, so the estimate exists. The clipped input is also indefinite,
    // which forces the convex-combination fallback start.
    Matrix chain(3, 3, 0.0);
    chain(0, 0) = chain(1, 1) = chain(2, 2) = 1.0;
    chain(0, 1) = chain(1, 0) = 0.9;
    chain(1, 2) = chain(2, 1) = 0.9;
    REQUIRE(!mtp2::is_positive_definite(chain));
    const MtpSolution sol = mtp2::mtp2_mle(chain);
    REQUIRE(sol.converged);
    REQUIRE(sol.kkt_residual <= 1e-7);
    // completion fills the missing edge with the product of the chain links
    REQUIRE(near(sol.sigma_hat(0, 2), 0.81, 1e-6));
    REQUIRE(near(sol.sigma_hat(0, 1), 0.9, 1e-8));
    REQUIRE(near(std::abs(sol.k_hat(0, 2)), 0.0, 1e-7));
    REQUIRE(mtp2::is_m_matrix(sol.k_hat, 1e-7));
}

TEST_CASE("mle exists for a flat 50-asset window", "[mtp2]") {
    mtp2::Rng rng(41);
    const auto panel = test_support::gaussian_panel(Matrix::identity(50), 5, rng);
    const Matrix s = mtp2::sample_covariance(panel, mtp2::Denominator::T);
    REQUIRE(!mtp2::is_positive_definite(s));
    // rank 4 out of 50: the fit is badly conditioned, so allow extra sweeps
    const MtpSolution sol = mtp2::mtp2_mle(s, 1e-6, 5000);
    REQUIRE(sol.converged);
    REQUIRE(sol.kkt_residual <= 1e-6);
    REQUIRE(mtp2::is_positive_definite(sol.sigma_hat));
    REQUIRE(mtp2::is_m_matrix(sol.k_hat, 1e-6));
    for (int i = 0; i < 50; ++i)
        REQUIRE(near(sol.sigma_hat(i, i), s(i, i), 1e-6 * s(i, i)));
}

TEST_CASE("rank-based fit of a tau-zero pair is diagonal", "[mtp2]") {
    // columns (1,2,3,4) and (2,4,1,3): three concordant and three discordant
    // pairs, so the rank correlation vanishes exactly
    Matrix rows(4, 2);
    const double a[4] = {1, 2, 3, 4};
    const double b[4] = {2, 4, 1, 3};
    for (int t = 0; t < 4; ++t) {
        rows(t, 0) = a[t];
        rows(t, 1) = b[t];
    }
    const MtpSolution sol = mtp2::mtp2_mle_kendall(make_panel(rows));
    REQUIRE(sol.converged);
    REQUIRE(sol.kendall);
    REQUIRE(sol.input_scale == "kendall");
    REQUIRE(sol.ridge == 0.0);
    // both columns are permutations of 1..4: sample variance 5/3 each
    REQUIRE(near(sol.sigma_hat(0, 0), 5.0 / 3.0, 1e-10));
    REQUIRE(near(sol.sigma_hat(1, 1), 5.0 / 3.0, 1e-10));
    REQUIRE(near(sol.sigma_hat(0, 1), 0.0, 1e-10));
    REQUIRE(near(sol.k_hat(0, 0), 0.6, 1e-8));
}

TEST_CASE("rank-based fit regularizes a perfectly concordant pair", "[mtp2]") {
    Matrix rows(3, 2);
    for (int t = 0; t < 3; ++t) {
        rows(t, 0) = t + 1;
        rows(t, 1) = 10.0 * (t + 1);
    }
    const MtpSolution sol = mtp2::mtp2_mle_kendall(make_panel(rows));
    REQUIRE(sol.converged);
    REQUIRE(sol.ridge == 1e-6);
    REQUIRE(mtp2::is_positive_definite(sol.sigma_hat));
    REQUIRE(sol.sigma_corr(0, 1) > 0.99);
}

TEST_CASE("rank-based fit recovers a gaussian factor covariance", "[mtp2]") {
    const Matrix truth =
        mtp2::single_factor_covariance(Vector{1, 1, 1}, 1.0, Vector{1, 1, 1});
    mtp2::Rng rng(43);
    const auto panel = test_support::gaussian_panel(truth, 500, rng);
    const MtpSolution sol = mtp2::mtp2_mle_kendall(panel);
    REQUIRE(sol.converged);
    Matrix diff = sol.sigma_hat;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) diff(i, j) -= truth(i, j);
    REQUIRE(frobenius(diff) <= 0.15 * frobenius(truth));
    REQUIRE(mtp2::is_m_matrix(sol.k_hat, 1e-7));
}

TEST_CASE("m-matrix predicate classifies the standard cases", "[mtp2]") {
    REQUIRE(mtp2::is_m_matrix(Matrix::identity(3)));
    REQUIRE(mtp2::is_m_matrix(mat2(2, -1, -1, 2)));
    REQUIRE(!mtp2::is_m_matrix(mat2(2, 1, 1, 2)));     // positive off-diagonal
    REQUIRE(!mtp2::is_m_matrix(mat2(1, -2, -2, 1)));   // indefinite
    Matrix asym = mat2(2, -1, -0.5, 2);
    REQUIRE(!mtp2::is_m_matrix(asym));
}

TEST_CASE("pair inequality holds trivially when the points coincide", "[mtp2]") {
    const auto oracle = mtp2::bivariate_t_oracle(mat2(1, -0.1, -0.1, 1), 1.0);
    REQUIRE(mtp2::check_mtp2_pair(oracle, Vector{0.3, -0.7}, Vector{0.3, -0.7}));
}

TEST_CASE("pair inequality holds for a gaussian with m-matrix precision", "[mtp2]") {
    const Matrix k = mat2(2, -1, -1, 2);
    mtp2::DensityOracle oracle;
    oracle.dim = 2;
    oracle.evaluate = [k](const Vector& x) {
        const double q = k(0, 0) * x[0] * x[0] + 2.0 * k(0, 1) * x[0] * x[1] +
                         k(1, 1) * x[1] * x[1];
        return std::exp(-0.5 * q);  // constant factor cancels in the inequality
    };
    for (double x0 = -2.0; x0 <= 2.0; x0 += 0.5)
        for (double x1 = -2.0; x1 <= 2.0; x1 += 0.5)
            for (double y0 = -2.0; y0 <= 2.0; y0 += 0.5)
                for (double y1 = -2.0; y1 <= 2.0; y1 += 0.5)
                    REQUIRE(mtp2::check_mtp2_pair(oracle, Vector{x0, x1},
                                                  Vector{y0, y1}));
}

TEST_CASE("pair inequality fails for the heavy-tailed counterexample", "[mtp2]") {
    const auto oracle = mtp2::bivariate_t_oracle(mat2(1, -0.1, -0.1, 1), 1.0);
    REQUIRE(!mtp2::check_mtp2_pair(oracle, Vector{-1, 1}, Vector{0, 0}));
}

TEST_CASE("t density closed-form values", "[mtp2]") {
    const double pi = 3.14159265358979323846;
    REQUIRE(near(mtp2::bivariate_t_density(Vector{0, 0}, Matrix::identity(2), 1.0),
                 1.0 / (2.0 * pi), 1e-15));
    const Matrix p = mat2(1, -0.1, -0.1, 1);
    const double at = mtp2::bivariate_t_density(Vector{0.4, -1.2}, p, 3.0);
    const double mirrored = mtp2::bivariate_t_density(Vector{-0.4, 1.2}, p, 3.0);
    REQUIRE(at == mirrored);

    // quadratic forms at the counterexample corners: 2.2, 1, 1, 0
    const double c = mtp2::bivariate_t_density(Vector{0, 0}, p, 1.0);
    const double lhs = mtp2::bivariate_t_density(Vector{-1, 1}, p, 1.0) * c;
    const double rhs = mtp2::bivariate_t_density(Vector{-1, 0}, p, 1.0) *
                       mtp2::bivariate_t_density(Vector{0, 1}, p, 1.0);
    REQUIRE(near(lhs / (c * c), std::pow(3.2, -1.5), 1e-12));
    REQUIRE(near(rhs / (c * c), std::pow(2.0, -3.0), 1e-12));
    REQUIRE(lhs > rhs);

    REQUIRE_THROWS_AS(mtp2::bivariate_t_density(Vector{0, 0}, p, 0.0),
                      mtp2::InvalidInput);
    REQUIRE_THROWS_AS(mtp2::bivariate_t_density(Vector{0, 0, 0}, p, 1.0),
                      mtp2::DimensionMismatch);
}

TEST_CASE("single-factor covariance construction", "[mtp2]") {
    const Matrix diag_only =
        mtp2::single_factor_covariance(Vector{0, 0}, 1.0, Vector{2, 3});
    REQUIRE(matrix_near(diag_only, Matrix::diagonal(Vector{2, 3}), 0.0));

    const Matrix two = mtp2::single_factor_covariance(Vector{1, 1}, 1.0, Vector{1, 1});
    REQUIRE(matrix_near(two, mat2(2, 1, 1, 2), 0.0));

    REQUIRE_THROWS_AS(mtp2::single_factor_covariance(Vector{1}, 0.0, Vector{1}),
                      mtp2::NonpositiveVariance);
    REQUIRE_THROWS_AS(mtp2::single_factor_covariance(Vector{1, 1}, 1.0, Vector{1}),
                      mtp2::DimensionMismatch);
}

TEST_CASE("positive loadings give m-matrix precisions, mixed signs need not",
          "[mtp2]") {
    mtp2::Rng rng(47);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(6));
        Vector beta(static_cast<std::size_t>(n)), idio(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            beta[static_cast<std::size_t>(i)] = rng.uniform(0.1, 2.0);
            idio[static_cast<std::size_t>(i)] = rng.uniform(0.1, 1.5);
        }
        const Matrix s =
            mtp2::single_factor_covariance(beta, rng.uniform(0.2, 2.0), idio);
        REQUIRE(mtp2::is_m_matrix(mtp2::spd_inverse(s), 1e-8));
    }

    // beta (1,-1,1): K = I - beta beta^T / 4 has a positive off-diagonal entry
    const Matrix s = mtp2::single_factor_covariance(Vector{1, -1, 1}, 1.0,
                                                    Vector{1, 1, 1});
    REQUIRE(!mtp2::is_m_matrix(mtp2::spd_inverse(s), 1e-8));
}

TEST_CASE("fit report audits the optimality conditions", "[mtp2]") {
    const Matrix eye = Matrix::identity(3);
    const mtp2::KktReport clean = mtp2::kkt_report(eye, eye, eye);
    REQUIRE(clean.overall == 0.0);
    REQUIRE(clean.inverse_gap == 0.0);

    mtp2::Rng rng(53);
    const Matrix s = test_support::random_spd(6, rng);
    const MtpSolution sol = mtp2::mtp2_mle(s);
    REQUIRE(sol.converged);
    const mtp2::KktReport rep = mtp2::kkt_report(sol.sigma_hat, sol.k_hat, s);
    REQUIRE(rep.overall <= 1e-5);
    REQUIRE(rep.inverse_gap <= 1e-8);

    // a deliberately wrong precision shows up in the sign and gap fields
    const mtp2::KktReport bad = mtp2::kkt_report(s, Matrix::identity(6), s);
    REQUIRE(bad.inverse_gap > 0.1);

    const Matrix smaller = Matrix::identity(2);
    REQUIRE_THROWS_AS(mtp2::kkt_report(eye, eye, smaller), mtp2::DimensionMismatch);
    Matrix bad_diag = Matrix::identity(2);
    bad_diag(0, 0) = 0.0;
    REQUIRE_THROWS_AS(
        mtp2::kkt_report(Matrix::identity(2), Matrix::identity(2), bad_diag),
        mtp2::InvalidInput);
}
