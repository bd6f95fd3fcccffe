#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mtp2/linalg.hpp"
#include "mtp2/portfolio.hpp"
#include "mtp2/rng.hpp"
#include "test_support.hpp"

using mtp2::Matrix;
using mtp2::ReturnsPanel;
using mtp2::Vector;
using test_support::make_panel;
using test_support::near;

namespace {

std::vector<std::string> names(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("A" + std::to_string(i + 1));
    return out;
}

Matrix mat2(double a, double b, double c, double d) {
    Matrix m(2, 2);
    m(0, 0) = a;
    m(0, 1) = b;
    m(1, 0) = c;
    m(1, 1) = d;
    return m;
}

double variance_of(const Vector& w, const Matrix& sigma) {
    double acc = 0.0;
    for (int i = 0; i < sigma.rows(); ++i)
        for (int j = 0; j < sigma.cols(); ++j)
            acc += w[static_cast<std::size_t>(i)] * sigma(i, j) *
                   w[static_cast<std::size_t>(j)];
    return acc;
}

} // namespace

TEST_CASE("minimum-variance weights on simple matrices", "[portfolio]") {
    const auto eye = mtp2::gmv_weights(Matrix::identity(4), names(4));
    for (double w : eye.weights) REQUIRE(near(w, 0.25, 1e-15));
    REQUIRE(eye.strategy_id == "gmv");

    const auto skew = mtp2::gmv_weights(Matrix::diagonal(Vector{1, 4}), names(2));
    REQUIRE(near(skew.weights[0], 0.8, 1e-15));
    REQUIRE(near(skew.weights[1], 0.2, 1e-15));

    const auto corr = mtp2::gmv_weights(mat2(2, 1, 1, 2), names(2));
    REQUIRE(near(corr.weights[0], 0.5, 1e-14));
    REQUIRE(near(corr.weights[1], 0.5, 1e-14));
}

TEST_CASE("minimum-variance weights ignore the overall scale", "[portfolio]") {
    mtp2::Rng rng(139);
    const Matrix sigma = test_support::random_spd(6, rng);
    const auto base = mtp2::gmv_weights(sigma, names(6));
    const auto scaled = mtp2::gmv_weights(7.5 * sigma, names(6));
    for (std::size_t i = 0; i < 6; ++i)
        REQUIRE(near(base.weights[i], scaled.weights[i], 1e-12));
}

TEST_CASE("minimum-variance weights demand a positive definite input", "[portfolio]") {
    REQUIRE_THROWS_AS(mtp2::gmv_weights(mat2(1, 2, 2, 1), names(2)),
                      mtp2::NotPositiveDefinite);
    REQUIRE_THROWS_AS(mtp2::gmv_weights(Matrix::identity(3), names(2)),
                      mtp2::DimensionMismatch);
}

TEST_CASE("pseudo-inverse weights handle singular and regular inputs", "[portfolio]") {
    const auto flat = mtp2::gmv_weights_pinv(mat2(1, 1, 1, 1), names(2));
    REQUIRE(near(flat.weights[0], 0.5, 1e-12));
    REQUIRE(near(flat.weights[1], 0.5, 1e-12));

    mtp2::Rng rng(149);
    const Matrix sigma = test_support::random_spd(5, rng);
    const auto exact = mtp2::gmv_weights(sigma, names(5));
    const auto pinv = mtp2::gmv_weights_pinv(sigma, names(5));
    for (std::size_t i = 0; i < 5; ++i)
        REQUIRE(near(exact.weights[i], pinv.weights[i], 1e-9));
}

TEST_CASE("mean-variance weights at the natural target collapse to minimum variance",
          "[portfolio]") {
    mtp2::Rng rng(151);
    const Matrix sigma = test_support::random_spd(4, rng);
    const Vector mu{0.01, 0.03, -0.02, 0.05};
    const Vector ones(4, 1.0);
    const Vector si_one = mtp2::spd_solve(sigma, ones);
    const Vector si_mu = mtp2::spd_solve(sigma, mu);
    const double a = mtp2::dot(ones, si_one);
    const double b = mtp2::dot(ones, si_mu);
    const auto mv = mtp2::markowitz_weights(sigma, mu, b / a, names(4));
    const auto gmv = mtp2::gmv_weights(sigma, names(4));
    for (std::size_t i = 0; i < 4; ++i)
        REQUIRE(near(mv.weights[i], gmv.weights[i], 1e-10));
}

TEST_CASE("mean-variance weights on the identity hand cases", "[portfolio]") {
    const Vector mu{0.1, 0.2};
    const auto mid = mtp2::markowitz_weights(Matrix::identity(2), mu, 0.15, names(2));
    REQUIRE(near(mid.weights[0], 0.5, 1e-12));
    REQUIRE(near(mid.weights[1], 0.5, 1e-12));
    const auto high = mtp2::markowitz_weights(Matrix::identity(2), mu, 0.2, names(2));
    REQUIRE(near(high.weights[0], 0.0, 1e-12));
    REQUIRE(near(high.weights[1], 1.0, 1e-12));
}

TEST_CASE("mean-variance weights satisfy both constraints and dominate", "[portfolio]") {
    mtp2::Rng rng(157);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(6));
        const Matrix sigma = test_support::random_spd(n, rng);
        Vector mu(static_cast<std::size_t>(n));
        for (double& v : mu) v = 0.02 * rng.normal();
        // skip the measure-zero case where mu is (nearly) flat
        double spread = 0.0;
        for (double v : mu) spread = std::max(spread, std::abs(v - mu[0]));
        if (spread < 1e-6) continue;
        const double target = 0.01 + 0.005 * rng.normal();
        const auto w = mtp2::markowitz_weights(sigma, mu, target, names(n));

        double wsum = 0.0, wmu = 0.0;
        for (std::size_t i = 0; i < w.weights.size(); ++i) {
            wsum += w.weights[i];
            wmu += w.weights[i] * mu[i];
        }
        REQUIRE(near(wsum, 1.0, 1e-10));
        REQUIRE(near(wmu, target, 1e-10));

        // any other vector meeting both constraints has at least this variance
        Vector z(static_cast<std::size_t>(n));
        for (double& v : z) v = rng.normal();
        const Vector ones(static_cast<std::size_t>(n), 1.0);
        double z1 = 0.0, zmu = 0.0;
        for (int i = 0; i < n; ++i) {
            z1 += z[static_cast<std::size_t>(i)];
            zmu += z[static_cast<std::size_t>(i)] * mu[static_cast<std::size_t>(i)];
        }
        // project z onto {z: 1'z = 0, mu'z = 0} by solving the 2x2 Gram system
        double g11 = n, g12 = 0.0, g22 = 0.0;
        for (double v : mu) {
            g12 += v;
            g22 += v * v;
        }
        const double det = g11 * g22 - g12 * g12;
        const double alpha = (g22 * z1 - g12 * zmu) / det;
        const double beta = (g11 * zmu - g12 * z1) / det;
        Vector rival = w.weights;
        for (int i = 0; i < n; ++i)
            rival[static_cast<std::size_t>(i)] +=
                z[static_cast<std::size_t>(i)] - alpha -
                beta * mu[static_cast<std::size_t>(i)];
        REQUIRE(variance_of(w.weights, sigma) <=
                variance_of(rival, sigma) + 1e-10);
    }
}

TEST_CASE("mean-variance weights reject a flat signal", "[portfolio]") {
    const Vector mu{0.05, 0.05, 0.05};
    REQUIRE_THROWS_AS(
        mtp2::markowitz_weights(Matrix::identity(3), mu, 0.04, names(3)),
        mtp2::DegenerateTarget);
}

TEST_CASE("momentum signal basics", "[portfolio]") {
    Matrix rows(252, 2);
    for (int t = 0; t < 252; ++t) {
        rows(t, 0) = 0.01;
        rows(t, 1) = 0.0;
    }
    // the skip window must not leak into the signal
    for (int t = 231; t < 252; ++t) rows(t, 0) = 5.0;
    const ReturnsPanel p = make_panel(rows);
    const auto sig = mtp2::momentum_signal(p, 252);
    REQUIRE(near(sig.mu_hat[0], 0.01, 1e-15));
    REQUIRE(sig.mu_hat[1] == 0.0);
    REQUIRE(sig.arithmetic_fallback.empty());
}

TEST_CASE("momentum signal matches a direct product for alternating returns",
          "[portfolio]") {
    Matrix rows(252, 1);
    for (int t = 0; t < 252; ++t) rows(t, 0) = (t % 2 == 0) ? 0.1 : -0.1;
    const ReturnsPanel p = make_panel(rows);
    const auto sig = mtp2::momentum_signal(p, 252);

    double prod = 1.0;
    for (int t = 0; t < 231; ++t) prod *= 1.0 + rows(t, 0);
    const double oracle = std::pow(prod, 1.0 / 231.0) - 1.0;
    REQUIRE(near(sig.mu_hat[0], oracle, 1e-12));
    REQUIRE(near(sig.mu_hat[0], -0.005013, 1e-3));
}

TEST_CASE("momentum signal falls back to the arithmetic mean after a wipeout",
          "[portfolio]") {
    Matrix rows(252, 2, 0.01);
    rows(100, 0) = -1.5;
    const ReturnsPanel p = make_panel(rows);
    const auto sig = mtp2::momentum_signal(p, 252);
    REQUIRE(sig.arithmetic_fallback == std::vector<std::string>{p.assets[0]});
    const double arith = (230.0 * 0.01 - 1.5) / 231.0;
    REQUIRE(near(sig.mu_hat[0], arith, 1e-15));
    REQUIRE(near(sig.mu_hat[1], 0.01, 1e-15));
}

TEST_CASE("momentum signal needs a full year of history", "[portfolio]") {
    Matrix rows(252, 1, 0.0);
    const ReturnsPanel p = make_panel(rows);
    REQUIRE_THROWS_AS(mtp2::momentum_signal(p, 251), mtp2::InsufficientHistory);
    REQUIRE_THROWS_AS(mtp2::momentum_signal(p, 253), mtp2::InsufficientHistory);
    REQUIRE_NOTHROW(mtp2::momentum_signal(p, 252));
}

TEST_CASE("top-quantile target picks the best signal", "[portfolio]") {
    mtp2::ExpectedReturns mu;
    mu.assets = names(5);
    mu.mu_hat = {1, 2, 3, 4, 5};
    const auto tq = mtp2::ew_tq_target(mu, 0.2);
    REQUIRE(tq.selected == std::vector<int>{4});
    REQUIRE(tq.target == 5.0);
    REQUIRE(tq.weights == Vector{0, 0, 0, 0, 1});
}

TEST_CASE("top-quantile target breaks ties by asset id", "[portfolio]") {
    mtp2::ExpectedReturns mu;
    mu.assets = names(4);
    mu.mu_hat = {0.01, 0.01, 0.01, 0.01};
    const auto tq = mtp2::ew_tq_target(mu, 0.5);
    REQUIRE(tq.selected == std::vector<int>{0, 1});
    REQUIRE(near(tq.weights[0], 0.5, 1e-16));
    REQUIRE(near(tq.weights[1], 0.5, 1e-16));
    REQUIRE(tq.weights[2] == 0.0);
}

TEST_CASE("top-quantile target averages the selected signals", "[portfolio]") {
    mtp2::ExpectedReturns mu;
    mu.assets = names(10);
    mu.mu_hat.resize(10);
    for (int i = 0; i < 10; ++i) mu.mu_hat[static_cast<std::size_t>(i)] = 0.01 * (i + 1);
    const auto tq = mtp2::ew_tq_target(mu, 0.2);
    REQUIRE(tq.selected == std::vector<int>{8, 9});
    REQUIRE(near(tq.target, 0.095, 1e-15));

    REQUIRE_THROWS_AS(mtp2::ew_tq_target(mu, 0.0), mtp2::InvalidInput);
    REQUIRE_THROWS_AS(mtp2::ew_tq_target(mu, 1.5), mtp2::InvalidInput);
}

TEST_CASE("equal weights sum to one", "[portfolio]") {
    const auto solo = mtp2::equal_weight(names(1));
    REQUIRE(solo.weights == Vector{1.0});

    const auto four = mtp2::equal_weight(names(4));
    for (double w : four.weights) REQUIRE(w == 0.25);

    const auto three = mtp2::equal_weight(names(3));
    double sum = 0.0;
    for (double w : three.weights) sum += w;
    REQUIRE(near(sum, 1.0, 1e-15));
    REQUIRE(three.strategy_id == "1/N");

    REQUIRE_THROWS_AS(mtp2::equal_weight({}), mtp2::EmptyPanel);
}
