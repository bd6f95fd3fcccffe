#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/linalg.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/panel.hpp"

// Portfolio construction: global minimum variance, mean-variance with a
// return target, the momentum expected-return signal, and the equal-weighted
// top-quintile target/benchmark rules. All expected returns stay in per-day
// units; weights always sum to one (long-short allowed).

namespace mtp2 {

struct PortfolioWeights {
    std::vector<std::string> assets;
    Vector weights;
    std::string strategy_id;
};

struct ExpectedReturns {
    std::vector<std::string> assets;
    Vector mu_hat;  // per-day units
    std::string signal_id;
    std::vector<std::string> arithmetic_fallback;  // assets where the geometric
                                                   // mean was undefined
};

// w = Sigma^{-1} 1 / (1^T Sigma^{-1} 1).
inline PortfolioWeights gmv_weights(const Matrix& sigma,
                                    const std::vector<std::string>& assets) {
    require_square_symmetric(sigma, "gmv_weights");
    if (static_cast<int>(assets.size()) != sigma.rows())
        throw DimensionMismatch("gmv_weights: asset list does not match matrix");
    const Vector ones(static_cast<std::size_t>(sigma.rows()), 1.0);
    Vector raw = spd_solve(sigma, ones);
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    for (double& v : raw) v /= total;
    PortfolioWeights w;
    w.assets = assets;
    w.weights = std::move(raw);
    w.strategy_id = "gmv";
    return w;
}

// Same direction computed with an eigenvalue pseudo-inverse; used for the
// (possibly singular) raw sample covariance benchmark.
inline PortfolioWeights gmv_weights_pinv(const Matrix& sigma,
                                         const std::vector<std::string>& assets) {
    require_square_symmetric(sigma, "gmv_weights_pinv");
    if (static_cast<int>(assets.size()) != sigma.rows())
        throw DimensionMismatch("gmv_weights_pinv: asset list does not match matrix");
    const Matrix pinv = sym_pseudo_inverse(sigma);
    Vector raw(static_cast<std::size_t>(sigma.rows()), 0.0);
    for (int i = 0; i < pinv.rows(); ++i)
        for (int j = 0; j < pinv.cols(); ++j) raw[static_cast<std::size_t>(i)] += pinv(i, j);
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    if (total == 0.0 || !std::isfinite(total))
        throw DegenerateTarget("gmv_weights_pinv: pseudo-inverse row sums vanish");
    for (double& v : raw) v /= total;
    PortfolioWeights w;
    w.assets = assets;
    w.weights = std::move(raw);
    w.strategy_id = "gmv-pinv";
    return w;
}

// Closed-form mean-variance weights hitting expected return target r:
//   w = [(C - B r) Sigma^{-1} 1 + (A r - B) Sigma^{-1} mu] / (A C - B^2)
// with A = 1'Sigma^{-1}1, B = 1'Sigma^{-1}mu, C = mu'Sigma^{-1}mu. Throws
// DegenerateTarget when mu is (numerically) proportional to 1 so the target
// is unreachable: |AC - B^2| <= 1e-12 * AC.
inline PortfolioWeights markowitz_weights(const Matrix& sigma, const Vector& mu,
                                          double target,
                                          const std::vector<std::string>& assets) {
    require_square_symmetric(sigma, "markowitz_weights");
    const int n = sigma.rows();
    if (static_cast<int>(mu.size()) != n || static_cast<int>(assets.size()) != n)
        throw DimensionMismatch("markowitz_weights: input sizes do not match");
    const Vector ones(static_cast<std::size_t>(n), 1.0);
    const Matrix l = cholesky(sigma);
    const Vector si_one = spd_solve_with_factor(l, ones);
    const Vector si_mu = spd_solve_with_factor(l, mu);
    const double a = dot(ones, si_one);
    const double b = dot(ones, si_mu);
    const double c = dot(mu, si_mu);
    const double denom = a * c - b * b;
    if (std::abs(denom) <= 1e-12 * a * c)
        throw DegenerateTarget("markowitz_weights: AC - B^2 = " + std::to_string(denom));
    PortfolioWeights w;
    w.assets = assets;
    w.weights.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        w.weights[static_cast<std::size_t>(i)] =
            ((c - b * target) * si_one[static_cast<std::size_t>(i)] +
             (a * target - b) * si_mu[static_cast<std::size_t>(i)]) /
            denom;
    w.strategy_id = "markowitz";
    return w;
}

// Momentum signal at day index as_of: per-day geometric mean of (1 + r) over
// the window [as_of - 252, as_of - 21). Assets with any 1 + r <= 0 in the
// window fall back to the arithmetic mean and are recorded.
inline ExpectedReturns momentum_signal(const ReturnsPanel& p, int as_of) {
    validate_panel(p, "momentum_signal");
    if (as_of < 252 || as_of > p.T())
        throw InsufficientHistory("momentum_signal: as_of = " + std::to_string(as_of) +
                                  " needs at least 252 days of history");
    const int lo = as_of - 252, hi = as_of - 21;
    const int len = hi - lo;
    ExpectedReturns out;
    out.assets = p.assets;
    out.signal_id = "momentum";
    out.mu_hat.resize(static_cast<std::size_t>(p.N()));
    for (int i = 0; i < p.N(); ++i) {
        bool valid = true;
        double log_sum = 0.0;
        double arith = 0.0;
        for (int t = lo; t < hi; ++t) {
            const double g = 1.0 + p.returns(t, i);
            arith += p.returns(t, i);
            if (g <= 0.0) valid = false;
            else log_sum += std::log(g);
        }
        if (valid) {
            out.mu_hat[static_cast<std::size_t>(i)] = std::expm1(log_sum / len);
        } else {
            out.mu_hat[static_cast<std::size_t>(i)] = arith / len;
            out.arithmetic_fallback.push_back(p.assets[static_cast<std::size_t>(i)]);
        }
    }
    return out;
}

struct EwTqTarget {
    std::vector<int> selected;  // indices of the top quantile, ascending
    Vector weights;             // 1/m on selected assets, 0 elsewhere
    double target = 0.0;        // mean mu_hat of the selected assets
};

// Equal-weighted top quantile of the signal: m = ceil(fraction * N) assets by
// descending mu_hat, ties broken by ascending asset id; the target return is
// their mean signal.
inline EwTqTarget ew_tq_target(const ExpectedReturns& mu, double fraction = 0.2) {
    const int n = static_cast<int>(mu.mu_hat.size());
    if (n == 0) throw EmptyPanel("ew_tq_target: empty signal");
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw InvalidInput("ew_tq_target: fraction must be in (0, 1]");
    const int m = static_cast<int>(std::ceil(fraction * n));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double va = mu.mu_hat[static_cast<std::size_t>(a)];
        const double vb = mu.mu_hat[static_cast<std::size_t>(b)];
        if (va != vb) return va > vb;
        return mu.assets[static_cast<std::size_t>(a)] < mu.assets[static_cast<std::size_t>(b)];
    });
    EwTqTarget out;
    out.selected.assign(order.begin(), order.begin() + m);
    std::sort(out.selected.begin(), out.selected.end());
    out.weights.assign(static_cast<std::size_t>(n), 0.0);
    double sum = 0.0;
    for (int i : out.selected) {
        out.weights[static_cast<std::size_t>(i)] = 1.0 / m;
        sum += mu.mu_hat[static_cast<std::size_t>(i)];
    }
    out.target = sum / m;
    return out;
}

inline PortfolioWeights equal_weight(const std::vector<std::string>& assets) {
    if (assets.empty()) throw EmptyPanel("equal_weight: no assets");
    PortfolioWeights w;
    w.assets = assets;
    w.weights.assign(assets.size(), 1.0 / static_cast<double>(assets.size()));
    w.strategy_id = "1/N";
    return w;
}

} // namespace mtp2
