#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/linalg.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/panel.hpp"
#include "mtp2/stats.hpp"

// Baseline covariance estimators: linear shrinkage with the Ledoit-Wolf
// plug-in intensity, POET (rank-K truncation plus residual soft
// thresholding), exact and approximate factor models, and an off-diagonal
// L1-penalized precision fit with cross-validated penalty.

namespace mtp2 {

struct CovarianceEstimate {
    Matrix matrix;
    std::string estimator_id;
    std::map<std::string, std::string> params;
};

// rho * S + (1 - rho) * mean(eigenvalues) * I; equals the eigenvalue map
// gamma_i = rho * lambda_i + (1 - rho) * lambda_bar applied in the sample
// eigenbasis.
inline Matrix linear_shrinkage(const Matrix& s, double rho) {
    require_square_symmetric(s, "linear_shrinkage");
    if (!(rho >= 0.0 && rho <= 1.0))
        throw RhoOutOfRange("linear_shrinkage: rho = " + std::to_string(rho));
    const int n = s.rows();
    const double lambda_bar = s.trace() / n;
    Matrix out = rho * s;
    for (int i = 0; i < n; ++i) out(i, i) += (1.0 - rho) * lambda_bar;
    out.symmetrize();
    return out;
}

struct LwRho {
    double rho = 0.0;
    bool degenerate = false;  // true when S is already a multiple of I
};

// Ledoit-Wolf plug-in intensity: rho = 1 - min(b2_bar, d2) / d2 with
//   d2 = ||S - lambda_bar I||_F^2
//   b2_bar = (1/T^2) sum_t ||x_t x_t^T - S||_F^2   (centered rows x_t)
// using the likelihood denominator T for S.
inline LwRho lw_optimal_rho(const ReturnsPanel& p) {
    validate_panel(p, "lw_optimal_rho");
    const int T = p.T(), N = p.N();
    if (T < 2) throw DegenerateDenominator("lw_optimal_rho: needs T >= 2");
    const Vector mu = sample_mean(p);
    const Matrix s = sample_covariance(p, Denominator::T);

    const double lambda_bar = s.trace() / N;
    double d2 = 0.0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
            const double target = (i == j) ? lambda_bar : 0.0;
            const double diff = s(i, j) - target;
            d2 += diff * diff;
        }

    LwRho out;
    if (d2 <= 0.0) {
        out.degenerate = true;
        return out;
    }

    double b2_bar = 0.0;
    Vector x(static_cast<std::size_t>(N));
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < N; ++i)
            x[static_cast<std::size_t>(i)] = p.returns(t, i) - mu[static_cast<std::size_t>(i)];
        double norm2 = 0.0;
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j) {
                const double diff = x[static_cast<std::size_t>(i)] *
                                        x[static_cast<std::size_t>(j)] - s(i, j);
                norm2 += diff * diff;
            }
        b2_bar += norm2;
    }
    b2_bar /= static_cast<double>(T) * T;
    const double b2 = std::min(b2_bar, d2);
    out.rho = 1.0 - b2 / d2;
    out.rho = std::min(1.0, std::max(0.0, out.rho));
    return out;
}

// POET: keep the top-K eigenpairs of S, soft-threshold the residual
// off-diagonals at tau = C sqrt(log N / T), keep the residual diagonal. With
// C = "auto" (c_auto = true) the smallest grid value {0, 0.25, ..., 3} whose
// output has min eigenvalue > 1e-8 * trace(S)/N is used; if none qualifies
// the residual is replaced by its diagonal and the fallback is flagged.
inline CovarianceEstimate poet(const ReturnsPanel& p, int k, double c,
                               bool c_auto = false,
                               const std::string& threshold_scale = "covariance") {
    validate_panel(p, "poet");
    const int N = p.N(), T = p.T();
    if (T < 2) throw DegenerateDenominator("poet: needs T >= 2");
    if (k < 0 || k >= N)
        throw RankTooLarge("poet: K = " + std::to_string(k) + " with N = " +
                           std::to_string(N));
    if (!c_auto && !(c >= 0.0)) throw InvalidInput("poet: C must be nonnegative");
    if (threshold_scale != "covariance" && threshold_scale != "correlation")
        throw InvalidInput("poet: unknown threshold scale " + threshold_scale);

    const Matrix s = sample_covariance(p, Denominator::T_minus_1);
    const EigenDecomposition eig = sym_eigen(s);

    Matrix low_rank(N, N, 0.0);
    for (int r = 0; r < k; ++r) {
        const double lam = eig.values[static_cast<std::size_t>(r)];
        for (int i = 0; i < N; ++i) {
            const double vir = eig.vectors(i, r);
            for (int j = 0; j < N; ++j) low_rank(i, j) += lam * vir * eig.vectors(j, r);
        }
    }
    low_rank.symmetrize();
    const Matrix resid = s - low_rank;

    auto assemble = [&](double c_value) {
        const double tau = c_value * std::sqrt(std::log(static_cast<double>(N)) / T);
        Matrix out = low_rank;
        for (int i = 0; i < N; ++i) out(i, i) += resid(i, i);
        for (int i = 0; i < N; ++i)
            for (int j = i + 1; j < N; ++j) {
                double v = resid(i, j);
                if (threshold_scale == "correlation") {
                    const double scale = std::sqrt(std::max(resid(i, i) * resid(j, j), 0.0));
                    if (scale > 0.0) {
                        const double rho_ij = v / scale;
                        const double soft = (std::abs(rho_ij) <= tau)
                                                ? 0.0
                                                : (rho_ij > 0 ? rho_ij - tau : rho_ij + tau);
                        v = soft * scale;
                    }
                } else {
                    v = (std::abs(v) <= tau) ? 0.0 : (v > 0 ? v - tau : v + tau);
                }
                out(i, j) += v;
                out(j, i) += v;
            }
        return out;
    };

    const double pd_floor = 1e-8 * s.trace() / N;
    auto min_eig = [&](const Matrix& m) {
        const EigenDecomposition e = sym_eigen(m);
        return e.values.back();
    };

    CovarianceEstimate est;
    est.estimator_id = "poet";
    est.params["k"] = std::to_string(k);
    est.params["threshold_scale"] = threshold_scale;
    est.params["denominator"] = "t-1";

    if (!c_auto) {
        est.matrix = assemble(c);
        est.params["c"] = std::to_string(c);
        return est;
    }

    for (int step = 0; step <= 12; ++step) {
        const double c_value = 0.25 * step;
        Matrix candidate = assemble(c_value);
        if (min_eig(candidate) > pd_floor) {
            est.matrix = std::move(candidate);
            est.params["c"] = std::to_string(c_value);
            est.params["c_mode"] = "auto";
            return est;
        }
    }

    // No grid value produced a PD matrix: diagonal residual fallback.
    Matrix out = low_rank;
    for (int i = 0; i < N; ++i) out(i, i) += resid(i, i);
    est.matrix = std::move(out);
    est.params["c_mode"] = "auto";
    est.params["fallback"] = "diagonal_residual";
    return est;
}

namespace detail {

struct FactorRegression {
    Matrix beta;      // K x N loadings (no intercept row)
    Matrix residual;  // T x N residual panel
};

// Per-asset OLS of returns on (1, factors); residuals have exact zero mean.
inline FactorRegression factor_regression(const ReturnsPanel& p, const FactorPanel& f) {
    if (f.T() != p.T() || f.dates != p.dates)
        throw WindowMismatch("factor regression: factor dates do not match panel");
    const int T = p.T(), N = p.N(), K = f.K();
    if (T <= K + 1)
        throw InsufficientData("factor regression: T = " + std::to_string(T) +
                               " too small for K = " + std::to_string(K));

    Matrix x(T, K + 1, 1.0);
    for (int t = 0; t < T; ++t)
        for (int k = 0; k < K; ++k) x(t, k + 1) = f.values(t, k);

    Matrix xtx(K + 1, K + 1, 0.0);
    for (int a = 0; a <= K; ++a)
        for (int b = a; b <= K; ++b) {
            double acc = 0.0;
            for (int t = 0; t < T; ++t) acc += x(t, a) * x(t, b);
            xtx(a, b) = acc;
            xtx(b, a) = acc;
        }
    Matrix l;
    try {
        l = cholesky(xtx);
    } catch (const NotPositiveDefinite& e) {
        throw SingularDesign(std::string("factor regression: ") + e.what());
    }

    FactorRegression out;
    out.beta = Matrix(K, N, 0.0);
    out.residual = Matrix(T, N, 0.0);
    Vector xty(static_cast<std::size_t>(K + 1));
    for (int i = 0; i < N; ++i) {
        for (int a = 0; a <= K; ++a) {
            double acc = 0.0;
            for (int t = 0; t < T; ++t) acc += x(t, a) * p.returns(t, i);
            xty[static_cast<std::size_t>(a)] = acc;
        }
        const Vector coef = spd_solve_with_factor(l, xty);
        for (int k = 0; k < K; ++k) out.beta(k, i) = coef[static_cast<std::size_t>(k + 1)];
        for (int t = 0; t < T; ++t) {
            double fit = coef[0];
            for (int k = 0; k < K; ++k) fit += coef[static_cast<std::size_t>(k + 1)] * f.values(t, k);
            out.residual(t, i) = p.returns(t, i) - fit;
        }
    }
    return out;
}

inline ReturnsPanel residual_panel(const ReturnsPanel& p, const Matrix& residual) {
    ReturnsPanel rp;
    rp.dates = p.dates;
    rp.assets = p.assets;
    rp.returns = residual;
    rp.return_kind = p.return_kind;
    return rp;
}

} // namespace detail

// Exact factor model: B^T Sigma_f B + diag(residual variances).
inline CovarianceEstimate exact_factor_model(const ReturnsPanel& p, const FactorPanel& f) {
    validate_panel(p, "exact_factor_model");
    const detail::FactorRegression reg = detail::factor_regression(p, f);
    const int N = p.N(), K = f.K(), T = p.T();

    ReturnsPanel fp;
    fp.dates = f.dates;
    fp.assets = f.factor_ids;
    fp.returns = f.values;
    const Matrix sigma_f = sample_covariance(fp, Denominator::T_minus_1);

    Matrix out(N, N, 0.0);
    for (int i = 0; i < N; ++i)
        for (int j = i; j < N; ++j) {
            double acc = 0.0;
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b)
                    acc += reg.beta(a, i) * sigma_f(a, b) * reg.beta(b, j);
            out(i, j) = acc;
            out(j, i) = acc;
        }
    for (int i = 0; i < N; ++i) {
        double var = 0.0;
        for (int t = 0; t < T; ++t) var += reg.residual(t, i) * reg.residual(t, i);
        out(i, i) += var / (T - 1);
    }

    CovarianceEstimate est;
    est.matrix = std::move(out);
    est.estimator_id = "efm";
    est.params["k"] = std::to_string(K);
    est.params["denominator"] = "t-1";
    return est;
}

// Approximate factor model: the residual covariance keeps its off-diagonals,
// shrunk linearly with the Ledoit-Wolf intensity of the residual panel.
inline CovarianceEstimate afm_ls(const ReturnsPanel& p, const FactorPanel& f) {
    validate_panel(p, "afm_ls");
    const detail::FactorRegression reg = detail::factor_regression(p, f);
    const int N = p.N(), K = f.K();

    ReturnsPanel fp;
    fp.dates = f.dates;
    fp.assets = f.factor_ids;
    fp.returns = f.values;
    const Matrix sigma_f = sample_covariance(fp, Denominator::T_minus_1);

    const ReturnsPanel resid = detail::residual_panel(p, reg.residual);
    LwRho rho = lw_optimal_rho(resid);
    // An exact factor fit leaves rounding-level residuals whose shape is
    // meaningless; skip shrinkage instead of fitting rho to that noise.
    if (resid.returns.max_abs() <= 1e-12 * p.returns.max_abs()) {
        rho.rho = 0.0;
        rho.degenerate = true;
    }
    const Matrix s_u = sample_covariance(resid, Denominator::T);
    const Matrix sigma_u = linear_shrinkage(s_u, rho.rho);

    Matrix out = sigma_u;
    for (int i = 0; i < N; ++i)
        for (int j = i; j < N; ++j) {
            double acc = 0.0;
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b)
                    acc += reg.beta(a, i) * sigma_f(a, b) * reg.beta(b, j);
            out(i, j) += acc;
            if (i != j) out(j, i) += acc;
        }
    out.symmetrize();

    CovarianceEstimate est;
    est.matrix = std::move(out);
    est.estimator_id = "afm-ls";
    est.params["k"] = std::to_string(K);
    est.params["rho"] = std::to_string(rho.rho);
    if (rho.degenerate) est.params["rho_degenerate"] = "true";
    return est;
}

struct GlassoResult {
    Matrix k_hat;      // sparse precision estimate
    Matrix sigma_hat;  // its inverse (the dual iterate W)
    int iterations = 0;
};

// Off-diagonal L1-penalized Gaussian MLE
//   max log det K - trace(K S) - lambda * sum_{i != j} |K_ij|
// by block coordinate descent on W = K^{-1}; each column is a lasso solved by
// coordinate descent. The diagonal is unpenalized, so W_ii = S_ii throughout.
// Stationarity at the solution: |W_ij - S_ij| <= lambda (+tol), with equality
// of sign lambda * sign(K_ij) where K_ij != 0.
inline GlassoResult glasso(const Matrix& s, double lambda, double tol = 1e-7,
                           int max_iter = 500) {
    require_square_symmetric(s, "glasso");
    if (!(lambda >= 0.0)) throw InvalidInput("glasso: lambda must be nonnegative");
    const int n = s.rows();
    for (int i = 0; i < n; ++i)
        if (!(s(i, i) > 0.0))
            throw InvalidInput("glasso: nonpositive diagonal at index " + std::to_string(i));

    GlassoResult out;
    if (n == 1) {
        out.k_hat = Matrix(1, 1, 1.0 / s(0, 0));
        out.sigma_hat = s;
        return out;
    }

    Matrix w = s;
    Matrix betas(n - 1, n, 0.0);  // warm-started lasso coefficients per column

    const double scale = std::max(s.max_abs(), 1e-300);
    const double outer_tol = tol * scale;
    const double lasso_tol = 0.1 * outer_tol;
    const int lasso_max = 2000;

    std::vector<int> others(static_cast<std::size_t>(n - 1));
    bool converged = false;
    int iter = 0;
    for (; iter < max_iter && !converged; ++iter) {
        double max_change = 0.0;
        for (int j = 0; j < n; ++j) {
            int idx = 0;
            for (int i = 0; i < n; ++i)
                if (i != j) others[static_cast<std::size_t>(idx++)] = i;

            // Lasso: min_b 0.5 b^T W11 b - s12^T b + lambda ||b||_1.
            Vector residual(static_cast<std::size_t>(n - 1));
            for (int a = 0; a < n - 1; ++a) {
                double acc = s(others[static_cast<std::size_t>(a)], j);
                for (int b = 0; b < n - 1; ++b)
                    acc -= w(others[static_cast<std::size_t>(a)],
                             others[static_cast<std::size_t>(b)]) * betas(b, j);
                residual[static_cast<std::size_t>(a)] = acc;
            }
            for (int pass = 0; pass < lasso_max; ++pass) {
                double max_delta = 0.0;
                for (int a = 0; a < n - 1; ++a) {
                    const int ia = others[static_cast<std::size_t>(a)];
                    const double waa = w(ia, ia);
                    const double z = residual[static_cast<std::size_t>(a)] +
                                     waa * betas(a, j);
                    double next = 0.0;
                    if (z > lambda) next = (z - lambda) / waa;
                    else if (z < -lambda) next = (z + lambda) / waa;
                    const double delta = next - betas(a, j);
                    if (delta != 0.0) {
                        betas(a, j) = next;
                        for (int b = 0; b < n - 1; ++b)
                            residual[static_cast<std::size_t>(b)] -=
                                delta * w(others[static_cast<std::size_t>(b)], ia);
                        max_delta = std::max(max_delta, std::abs(delta) * waa);
                    }
                }
                if (max_delta <= lasso_tol) break;
            }

            for (int a = 0; a < n - 1; ++a) {
                const int ia = others[static_cast<std::size_t>(a)];
                double acc = 0.0;
                for (int b = 0; b < n - 1; ++b)
                    acc += w(ia, others[static_cast<std::size_t>(b)]) * betas(b, j);
                max_change = std::max(max_change, std::abs(acc - w(ia, j)));
                w(ia, j) = acc;
                w(j, ia) = acc;
            }
        }
        if (max_change <= outer_tol) converged = true;
    }
    if (!converged)
        throw NonConvergence("glasso: lambda = " + std::to_string(lambda) + " after " +
                             std::to_string(max_iter) + " sweeps");

    // Recover K column-by-column from the block inverse identities.
    Matrix k(n, n, 0.0);
    for (int j = 0; j < n; ++j) {
        int idx = 0;
        for (int i = 0; i < n; ++i)
            if (i != j) others[static_cast<std::size_t>(idx++)] = i;
        double quad = 0.0;
        for (int a = 0; a < n - 1; ++a)
            quad += w(others[static_cast<std::size_t>(a)], j) * betas(a, j);
        const double gamma = w(j, j) - quad;
        if (!(gamma > 0.0))
            throw NonConvergence("glasso: dual iterate not positive definite (lambda = " +
                                 std::to_string(lambda) + ")");
        const double kjj = 1.0 / gamma;
        k(j, j) = kjj;
        for (int a = 0; a < n - 1; ++a) {
            const int ia = others[static_cast<std::size_t>(a)];
            k(ia, j) = -betas(a, j) * kjj;
        }
    }
    k.symmetrize();

    out.k_hat = std::move(k);
    out.sigma_hat = std::move(w);
    out.iterations = iter;
    return out;
}

// Largest stationarity violation of a (K, Sigma) pair for the penalized
// problem; used by tests and the CLI verify path.
inline double glasso_subgradient_residual(const Matrix& s, double lambda,
                                          const Matrix& k, const Matrix& sigma,
                                          double zero_tol = 1e-10) {
    const int n = s.rows();
    double res = 0.0;
    for (int i = 0; i < n; ++i) {
        res = std::max(res, std::abs(sigma(i, i) - s(i, i)));
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double grad = sigma(i, j) - s(i, j);
            if (std::abs(k(i, j)) > zero_tol)
                res = std::max(res, std::abs(grad - lambda * (k(i, j) > 0 ? 1.0 : -1.0)));
            else
                res = std::max(res, std::max(0.0, std::abs(grad) - lambda));
        }
    }
    return res;
}

struct GlassoCvResult {
    GlassoResult fit;
    double lambda = 0.0;
    std::vector<std::pair<double, double>> path;  // (lambda, held-out loglik)
};

// Penalty selection by 3-fold contiguous cross-validation: four refinement
// rounds of four log-spaced lambdas, bracket recentered on the incumbent and
// shrunk 4x each round. Held-out score is the Gaussian log-likelihood
// log det K - trace(K S_holdout). Deterministic; ties prefer the smaller
// lambda. Initial bracket [lambda_max/100, lambda_max] with lambda_max the
// largest off-diagonal |S| of the full sample.
inline GlassoCvResult glasso_cv(const ReturnsPanel& p, double tol = 1e-7,
                                int max_iter = 500) {
    validate_panel(p, "glasso_cv");
    const int T = p.T();
    if (T < 6) throw InsufficientData("glasso_cv: needs T >= 6 for 3 folds");

    const Matrix s_full = sample_covariance(p, Denominator::T);
    double lambda_max = s_full.max_abs_off_diagonal();

    GlassoCvResult out;
    if (lambda_max <= 0.0) {
        out.lambda = 0.0;
        out.fit = glasso(s_full, 0.0, tol, max_iter);
        return out;
    }

    const int folds = 3;
    std::vector<std::pair<int, int>> fold_rows;
    for (int f = 0; f < folds; ++f)
        fold_rows.emplace_back(f * T / folds, (f + 1) * T / folds);

    std::vector<Matrix> s_train, s_hold;
    for (int f = 0; f < folds; ++f) {
        const auto [lo, hi] = fold_rows[static_cast<std::size_t>(f)];
        ReturnsPanel hold, train;
        hold.assets = train.assets = p.assets;
        hold.returns = Matrix(hi - lo, p.N());
        train.returns = Matrix(T - (hi - lo), p.N());
        int tr = 0;
        for (int t = 0; t < T; ++t) {
            if (t >= lo && t < hi) {
                for (int i = 0; i < p.N(); ++i) hold.returns(t - lo, i) = p.returns(t, i);
                hold.dates.push_back(p.dates[static_cast<std::size_t>(t)]);
            } else {
                for (int i = 0; i < p.N(); ++i) train.returns(tr, i) = p.returns(t, i);
                train.dates.push_back(p.dates[static_cast<std::size_t>(t)]);
                ++tr;
            }
        }
        s_train.push_back(sample_covariance(train, Denominator::T));
        s_hold.push_back(sample_covariance(hold, Denominator::T));
    }

    auto score = [&](double lambda) {
        double total = 0.0;
        for (int f = 0; f < folds; ++f) {
            const GlassoResult fit = glasso(s_train[static_cast<std::size_t>(f)], lambda,
                                            tol, max_iter);
            double ld = 0.0;
            {
                const Matrix l = cholesky(fit.k_hat);
                for (int i = 0; i < l.rows(); ++i) ld += std::log(l(i, i));
                ld *= 2.0;
            }
            double tr = 0.0;
            for (int i = 0; i < fit.k_hat.rows(); ++i)
                for (int j = 0; j < fit.k_hat.cols(); ++j)
                    tr += fit.k_hat(i, j) * s_hold[static_cast<std::size_t>(f)](i, j);
            total += ld - tr;
        }
        return total;
    };

    double log_lo = std::log(lambda_max) - std::log(100.0);
    double log_hi = std::log(lambda_max);
    double best_lambda = lambda_max;
    double best_score = -1e308;
    for (int round = 0; round < 4; ++round) {
        for (int i = 0; i < 4; ++i) {
            const double ll = log_lo + (log_hi - log_lo) * i / 3.0;
            const double lambda = std::exp(ll);
            const double sc = score(lambda);
            out.path.emplace_back(lambda, sc);
            if (sc > best_score + 1e-12 ||
                (std::abs(sc - best_score) <= 1e-12 && lambda < best_lambda)) {
                best_score = sc;
                best_lambda = lambda;
            }
        }
        const double width = (log_hi - log_lo) / 4.0;
        const double center = std::log(best_lambda);
        log_lo = center - width / 2.0;
        log_hi = std::min(center + width / 2.0, std::log(lambda_max));
        if (log_lo >= log_hi) log_lo = log_hi - 1e-6;
    }

    out.lambda = best_lambda;
    out.fit = glasso(s_full, best_lambda, tol, max_iter);
    return out;
}

} // namespace mtp2
