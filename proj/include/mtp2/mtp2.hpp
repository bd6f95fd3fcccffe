#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/linalg.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/panel.hpp"
#include "mtp2/stats.hpp"

// Maximum-likelihood covariance estimation under an M-matrix constraint on
// the precision: maximize log det K - trace(K S) subject to K_ij <= 0 for
// i != j, K positive definite. Solved through its dual,
//
//   minimize -log det Sigma  s.t.  Sigma_ii = S_ii, Sigma_ij >= S_ij,
//
// by block coordinate descent over columns; each column subproblem is a
// bound-constrained quadratic solved by clipped coordinate descent.

namespace mtp2 {

struct MtpSolution {
    Matrix sigma_hat;  // covariance estimate, positive definite
    Matrix k_hat;      // precision estimate, M-matrix up to tol
    double kkt_residual = 0.0;
    int iterations = 0;  // outer sweeps used
    std::vector<std::pair<int, int>> active_set;  // (i<j) pairs with K_ij == 0
    bool converged = false;
    std::vector<double> objective_history;  // -log det Sigma: initial value, then one entry per sweep
    double diagonal_shift = 0.0;  // epsilon added to the init diagonal, 0 if none

    // Rank-correlation variant extras; empty/zero for the plain estimator.
    bool kendall = false;
    double ridge = 0.0;           // ridge added to the sine-transformed matrix
    Matrix sigma_corr;            // correlation-scale solution
    Matrix k_corr;
    std::string input_scale = "covariance";
};

namespace detail {

// KKT residual of the dual pair on the original input scale:
//   (a) relative diagonal match, (b) lower-bound feasibility,
//   (c) sign feasibility of K, (d) complementary slackness.
inline double kkt_residual_scaled(const Matrix& c, const Matrix& k_c, const Matrix& s,
                                  const Matrix& r, const Vector& d) {
    const int n = s.rows();
    double res = 0.0;
    for (int i = 0; i < n; ++i) {
        res = std::max(res, std::abs(c(i, i) * s(i, i) - s(i, i)) / s(i, i));
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double dij = d[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(j)];
            const double sigma_ij = c(i, j) * dij;
            res = std::max(res, s(i, j) - sigma_ij);               // (b)
            res = std::max(res, k_c(i, j) / dij);                  // (c)
            res = std::max(res, std::abs(k_c(i, j) * (c(i, j) - r(i, j))));  // (d)
        }
    }
    return res;
}

} // namespace detail

// MTP2 maximum-likelihood fit. S must be symmetric with positive diagonal;
// rank-deficient S is fine as long as no off-diagonal correlation reaches 1.
// Never throws on slow progress or numerical trouble: after max_iter sweeps,
// or if an iterate stops being factorizable, the last accepted iterate is
// returned with converged == false.
inline MtpSolution mtp2_mle(const Matrix& s, double tol = 1e-7, int max_iter = 500) {
    require_square_symmetric(s, "mtp2_mle");
    const int n = s.rows();
    for (int i = 0; i < n; ++i)
        if (!(s(i, i) > 0.0))
            throw InvalidInput("mtp2_mle: nonpositive diagonal at index " +
                               std::to_string(i));

    MtpSolution sol;
    if (n == 1) {
        sol.sigma_hat = s;
        sol.k_hat = Matrix(1, 1, 1.0 / s(0, 0));
        sol.converged = true;
        sol.objective_history.push_back(-std::log(s(0, 0)));
        return sol;
    }

    // Correlation scale: the estimator is scale-equivariant, and unit
    // diagonals make the absolute inner tolerances meaningful.
    Vector d(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = std::sqrt(s(i, i));
    Matrix r(n, n, 0.0);
    for (int i = 0; i < n; ++i) {
        r(i, i) = 1.0;
        for (int j = i + 1; j < n; ++j) {
            const double v = s(i, j) / (d[static_cast<std::size_t>(i)] *
                                        d[static_cast<std::size_t>(j)]);
            r(i, j) = v;
            r(j, i) = v;
        }
    }

    // Feasible start: clip negative correlations to zero; if that is not PD,
    // nudge the diagonal, and as a last resort fall back to the constant
    // matrix (1-theta)I + theta*J, which is feasible and PD whenever the
    // problem is feasible at all (max off-diagonal correlation < 1).
    //
    // A start that barely factors is worse than useless: its tracked inverse
    // carries kappa * eps of relative error, and the per-column Schur rebuilds
    // amplify that past the positivity guards within a single sweep. Accept a
    // rung only when every Cholesky pivot clears a real margin.
    const auto comfortably_pd = [n](const Matrix& m) {
        Matrix lf;
        try {
            lf = cholesky(m);
        } catch (const NotPositiveDefinite&) {
            return false;
        }
        double md = 0.0;
        for (int i = 0; i < n; ++i) md = std::max(md, m(i, i));
        for (int i = 0; i < n; ++i)
            if (lf(i, i) * lf(i, i) < 1e-8 * md) return false;
        return true;
    };
    Matrix c(n, n, 0.0);
    for (int i = 0; i < n; ++i) {
        c(i, i) = 1.0;
        for (int j = 0; j < n; ++j)
            if (i != j) c(i, j) = std::max(r(i, j), 0.0);
    }
    if (!comfortably_pd(c)) {
        const double eps = 1e-8;
        Matrix bumped = c;
        for (int i = 0; i < n; ++i) bumped(i, i) = 1.0 + eps;
        if (comfortably_pd(bumped)) {
            c = bumped;
            sol.diagonal_shift = eps;
        } else {
            double theta = 0.0;
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) theta = std::max(theta, r(i, j));
            theta = std::min(theta, 1.0 - 1e-12);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) c(i, j) = (i == j) ? 1.0 : theta;
        }
    }

    // One factorization per sweep drives the fresh inverse, the objective
    // entry, and failure detection: if the iterate ever stops factoring, the
    // last accepted iterate is restored and the fit reports non-convergence.
    Matrix c_good = c;
    Matrix l = cholesky(c);
    Matrix k = spd_inverse_from_factor(l);
    double obj = 0.0;
    for (int i = 0; i < n; ++i) obj += std::log(l(i, i));
    sol.objective_history.push_back(-2.0 * obj);

    const double inner_tol = 1e-9;
    const int inner_max = 1000;
    std::vector<int> others(static_cast<std::size_t>(n - 1));
    Matrix q(n - 1, n - 1);
    Vector u(static_cast<std::size_t>(n - 1)), lo(static_cast<std::size_t>(n - 1));
    Vector g(static_cast<std::size_t>(n - 1)), w(static_cast<std::size_t>(n - 1));
    Vector ki(static_cast<std::size_t>(n)), kj(static_cast<std::size_t>(n)), u_cd;

    // The pairwise pass clips near-active entries onto their bounds exactly,
    // which the column pass only approaches asymptotically. It runs once the
    // column sweeps stop moving much; for small problems it is cheap enough
    // to run from the start.
    bool polish = n <= 32;
    // Exact column solves switch on when the residual stagnates: the clipped
    // descent stops on step size, which on ill-conditioned columns leaves an
    // interior gradient floor above tol.
    bool exact_columns = false;
    std::vector<double> kkt_trace;
    std::vector<char> act(static_cast<std::size_t>(n - 1));
    std::vector<int> f_idx;
    int sweep = 0;
    for (; sweep < max_iter; ++sweep) {
        double movement = 0.0;
        bool dirty = false;  // tracked state broke down; settle at the sweep-end factorization

        for (int j = 0; j < n && !dirty; ++j) {
            int idx = 0;
            for (int i = 0; i < n; ++i)
                if (i != j) others[static_cast<std::size_t>(idx++)] = i;

            // The tracked K can lose meaning on extreme inputs; each guard
            // below retries once with an exact inverse, then skips the column.
            for (int attempt = 0; attempt < 2; ++attempt) {
                const double kjj = k(j, j);
                bool bad = !(kjj > 0.0);

                // Q = (Sigma_AA)^{-1} via the Schur complement of K at column j.
                if (!bad) {
                    for (int a = 0; a < n - 1 && !bad; ++a) {
                        const int ia = others[static_cast<std::size_t>(a)];
                        const double kaj = k(ia, j);
                        for (int b = a; b < n - 1; ++b) {
                            const int ib = others[static_cast<std::size_t>(b)];
                            const double v = k(ia, ib) - kaj * k(ib, j) / kjj;
                            q(a, b) = v;
                            q(b, a) = v;
                        }
                        if (!(q(a, a) > 0.0)) bad = true;
                    }
                }
                double gamma = 0.0;
                if (!bad) {
                    for (int a = 0; a < n - 1; ++a) {
                        u[static_cast<std::size_t>(a)] = c(others[static_cast<std::size_t>(a)], j);
                        lo[static_cast<std::size_t>(a)] = r(others[static_cast<std::size_t>(a)], j);
                    }

                    // Clipped coordinate descent on u^T Q u, u >= lo.
                    for (int a = 0; a < n - 1; ++a) {
                        double acc = 0.0;
                        for (int b = 0; b < n - 1; ++b)
                            acc += q(a, b) * u[static_cast<std::size_t>(b)];
                        g[static_cast<std::size_t>(a)] = acc;
                    }
                    for (int pass = 0; pass < inner_max; ++pass) {
                        double max_delta = 0.0;
                        for (int a = 0; a < n - 1; ++a) {
                            const double qaa = q(a, a);
                            const double cand = u[static_cast<std::size_t>(a)] -
                                                g[static_cast<std::size_t>(a)] / qaa;
                            const double next = std::max(lo[static_cast<std::size_t>(a)], cand);
                            const double delta = next - u[static_cast<std::size_t>(a)];
                            if (delta != 0.0) {
                                u[static_cast<std::size_t>(a)] = next;
                                for (int b = 0; b < n - 1; ++b)
                                    g[static_cast<std::size_t>(b)] += delta * q(b, a);
                                max_delta = std::max(max_delta, std::abs(delta));
                            }
                        }
                        if (max_delta <= inner_tol) break;
                    }

                    if (exact_columns) {
                        double gmax = 0.0, qmax = 0.0;
                        for (int a = 0; a < n - 1; ++a) {
                            qmax = std::max(qmax, q(a, a));
                            if (u[static_cast<std::size_t>(a)] > lo[static_cast<std::size_t>(a)])
                                gmax = std::max(gmax, std::abs(g[static_cast<std::size_t>(a)]));
                        }
                        if (gmax * std::abs(kjj) * 2.0 > 0.25 * tol) {
                            // Direct bound-constrained solve: pin a working set to
                            // the bounds, solve the free block exactly, grow the
                            // set on bound violations, shrink it one index at a
                            // time on negative multipliers.
                            u_cd = u;
                            for (int a = 0; a < n - 1; ++a)
                                act[static_cast<std::size_t>(a)] =
                                    u[static_cast<std::size_t>(a)] <= lo[static_cast<std::size_t>(a)];
                            bool as_ok = false;
                            for (int rounds = 0; rounds < 2 * n; ++rounds) {
                                f_idx.clear();
                                for (int a = 0; a < n - 1; ++a)
                                    if (!act[static_cast<std::size_t>(a)]) f_idx.push_back(a);
                                const int f = static_cast<int>(f_idx.size());
                                if (f > 0) {
                                    Matrix qs(f, f);
                                    Vector rhs(static_cast<std::size_t>(f), 0.0);
                                    for (int a = 0; a < f; ++a) {
                                        for (int b = a; b < f; ++b) {
                                            const double v = q(f_idx[static_cast<std::size_t>(a)],
                                                               f_idx[static_cast<std::size_t>(b)]);
                                            qs(a, b) = v;
                                            qs(b, a) = v;
                                        }
                                        double acc = 0.0;
                                        for (int b2 = 0; b2 < n - 1; ++b2)
                                            if (act[static_cast<std::size_t>(b2)])
                                                acc += q(f_idx[static_cast<std::size_t>(a)], b2) *
                                                       lo[static_cast<std::size_t>(b2)];
                                        rhs[static_cast<std::size_t>(a)] = -acc;
                                    }
                                    Vector xs;
                                    try {
                                        xs = spd_solve(qs, rhs);
                                    } catch (const NotPositiveDefinite&) {
                                        break;
                                    }
                                    bool clipped = false;
                                    for (int a = 0; a < f; ++a) {
                                        const std::size_t ua =
                                            static_cast<std::size_t>(f_idx[static_cast<std::size_t>(a)]);
                                        if (xs[static_cast<std::size_t>(a)] < lo[ua]) {
                                            act[ua] = 1;
                                            clipped = true;
                                        }
                                    }
                                    if (clipped) continue;
                                    for (int a = 0; a < f; ++a)
                                        u[static_cast<std::size_t>(f_idx[static_cast<std::size_t>(a)])] =
                                            xs[static_cast<std::size_t>(a)];
                                }
                                for (int a = 0; a < n - 1; ++a)
                                    if (act[static_cast<std::size_t>(a)])
                                        u[static_cast<std::size_t>(a)] = lo[static_cast<std::size_t>(a)];
                                for (int a = 0; a < n - 1; ++a) {
                                    double acc = 0.0;
                                    for (int b = 0; b < n - 1; ++b)
                                        acc += q(a, b) * u[static_cast<std::size_t>(b)];
                                    g[static_cast<std::size_t>(a)] = acc;
                                }
                                int release = -1;
                                double most = -1e-12 * (qmax + 1.0);
                                for (int a = 0; a < n - 1; ++a)
                                    if (act[static_cast<std::size_t>(a)] &&
                                        g[static_cast<std::size_t>(a)] < most) {
                                        most = g[static_cast<std::size_t>(a)];
                                        release = a;
                                    }
                                if (release < 0) {
                                    as_ok = true;
                                    break;
                                }
                                act[static_cast<std::size_t>(release)] = 0;
                            }
                            if (!as_ok) u = u_cd;  // keep the clipped-descent iterate
                        }
                    }

                    for (int a = 0; a < n - 1; ++a) {
                        double acc = 0.0;
                        for (int b = 0; b < n - 1; ++b)
                            acc += q(a, b) * u[static_cast<std::size_t>(b)];
                        w[static_cast<std::size_t>(a)] = acc;
                        if (!std::isfinite(u[static_cast<std::size_t>(a)])) bad = true;
                    }
                    gamma = c(j, j) - dot(u, w);
                    if (!(gamma > 1e-14 * c(j, j)) || !std::isfinite(gamma)) bad = true;
                }
                if (bad) {
                    if (attempt == 1) break;  // leave the column unchanged
                    try {
                        k = spd_inverse(c);
                    } catch (const NotPositiveDefinite&) {
                        dirty = true;
                        break;
                    }
                    continue;
                }

                for (int a = 0; a < n - 1; ++a) {
                    const int ia = others[static_cast<std::size_t>(a)];
                    movement = std::max(movement,
                                        std::abs(u[static_cast<std::size_t>(a)] - c(ia, j)));
                    c(ia, j) = u[static_cast<std::size_t>(a)];
                    c(j, ia) = u[static_cast<std::size_t>(a)];
                }

                // Rebuild K's row/column j and A-block from the Schur pieces so K
                // tracks the updated Sigma exactly (in exact arithmetic).
                const double kjj_new = 1.0 / gamma;
                k(j, j) = kjj_new;
                for (int a = 0; a < n - 1; ++a) {
                    const int ia = others[static_cast<std::size_t>(a)];
                    const double v = -w[static_cast<std::size_t>(a)] * kjj_new;
                    k(ia, j) = v;
                    k(j, ia) = v;
                }
                for (int a = 0; a < n - 1; ++a) {
                    const int ia = others[static_cast<std::size_t>(a)];
                    const double wa = w[static_cast<std::size_t>(a)];
                    for (int b = 0; b < n - 1; ++b) {
                        const int ib = others[static_cast<std::size_t>(b)];
                        k(ia, ib) = q(a, b) + wa * w[static_cast<std::size_t>(b)] * kjj_new;
                    }
                }
                break;
            }
        }

        if (!dirty && !polish && movement <= 1e-3) polish = true;
        if (!dirty && polish) {
            // Exact scalar solves for pairs violating the sign or slackness
            // conditions: the 1-D optimum over c_ij is the unconstrained
            // stationary point clipped to the bound, and moving to it never
            // decreases det C. Each commit updates K by a rank-2 correction.
            const double gate = 0.25 * tol;
            for (int i = 0; i < n; ++i) {
                for (int j = i + 1; j < n; ++j) {
                    const double kij = k(i, j);
                    const double dij =
                        d[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(j)];
                    const double slack = std::abs(kij * (c(i, j) - r(i, j)));
                    if (slack <= gate && kij / dij <= gate) continue;
                    const double kii = k(i, i), kjj = k(j, j);
                    const double det_p = kii * kjj - kij * kij;
                    if (!(det_p > 0.0)) continue;
                    const double stat = c(i, j) + kij / det_p;
                    if (!std::isfinite(stat)) continue;
                    const double t = std::max(r(i, j), stat);
                    const double delta = t - c(i, j);
                    if (delta == 0.0) continue;
                    const double den = delta * delta * det_p - 2.0 * delta * kij - 1.0;
                    if (!(den < 0.0)) continue;
                    movement = std::max(movement, std::abs(delta));
                    c(i, j) = t;
                    c(j, i) = t;
                    for (int a = 0; a < n; ++a) {
                        ki[static_cast<std::size_t>(a)] = k(a, i);
                        kj[static_cast<std::size_t>(a)] = k(a, j);
                    }
                    const double coef_ii = delta * delta * kjj / den;
                    const double coef_ij = -(delta * delta * kij + delta) / den;
                    const double coef_jj = delta * delta * kii / den;
                    for (int a = 0; a < n; ++a) {
                        const double kia = ki[static_cast<std::size_t>(a)];
                        const double kja = kj[static_cast<std::size_t>(a)];
                        for (int b = a; b < n; ++b) {
                            const double v = k(a, b) -
                                             coef_ii * kia * ki[static_cast<std::size_t>(b)] -
                                             coef_ij * (kia * kj[static_cast<std::size_t>(b)] +
                                                        kja * ki[static_cast<std::size_t>(b)]) -
                                             coef_jj * kja * kj[static_cast<std::size_t>(b)];
                            k(a, b) = v;
                            k(b, a) = v;
                        }
                    }
                }
            }
        }

        try {
            l = cholesky(c);
        } catch (const NotPositiveDefinite&) {
            c = c_good;
            break;
        }
        k = spd_inverse_from_factor(l);
        c_good = c;
        obj = 0.0;
        for (int i = 0; i < n; ++i) obj += std::log(l(i, i));
        sol.objective_history.push_back(-2.0 * obj);
        const double kkt = detail::kkt_residual_scaled(c, k, s, r, d);
        if (kkt <= tol && movement <= tol) {
            sol.converged = true;
            ++sweep;
            break;
        }
        kkt_trace.push_back(kkt);
        if (!exact_columns && kkt_trace.size() >= 6 &&
            kkt > 0.9 * kkt_trace[kkt_trace.size() - 6])
            exact_columns = true;
    }
    sol.iterations = sweep;

    // Exact final inverse; k_hat is then the inverse of sigma_hat to
    // round-off, not to iteration tolerance.
    Matrix k_final = spd_inverse(c);
    sol.kkt_residual = detail::kkt_residual_scaled(c, k_final, s, r, d);
    sol.sigma_hat = Matrix(n, n, 0.0);
    sol.k_hat = Matrix(n, n, 0.0);
    for (int i = 0; i < n; ++i) {
        sol.sigma_hat(i, i) = c(i, i) * s(i, i);
        sol.k_hat(i, i) = k_final(i, i) / s(i, i);
        for (int j = i + 1; j < n; ++j) {
            const double dij = d[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(j)];
            sol.sigma_hat(i, j) = sol.sigma_hat(j, i) = c(i, j) * dij;
            sol.k_hat(i, j) = sol.k_hat(j, i) = k_final(i, j) / dij;
        }
    }
    const double slack_tol = 10.0 * std::max(tol, sol.kkt_residual);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (c(i, j) - r(i, j) > slack_tol) sol.active_set.emplace_back(i, j);
    return sol;
}

// The four optimality conditions of the fit, evaluated directly on the
// original scale from (sigma, k, s). Independent of the solver's internal
// correlation-scale bookkeeping, so it can audit a stored fit.
struct KktReport {
    double diagonal = 0.0;     // max_i |sigma_ii - s_ii| / s_ii
    double lower_bound = 0.0;  // max_{i<j} max(0, s_ij - sigma_ij)
    double sign = 0.0;         // max_{i<j} max(0, k_ij)
    double slackness = 0.0;    // max_{i<j} |k_ij (sigma_ij - s_ij)|
    double inverse_gap = 0.0;  // max |(sigma k - I)_ij|
    double overall = 0.0;      // max of the first four
};

inline KktReport kkt_report(const Matrix& sigma, const Matrix& k, const Matrix& s) {
    require_square_symmetric(sigma, "kkt_report");
    require_square_symmetric(k, "kkt_report");
    require_square_symmetric(s, "kkt_report");
    const int n = s.rows();
    if (sigma.rows() != n || k.rows() != n)
        throw DimensionMismatch("kkt_report: dimension mismatch");
    KktReport rep;
    for (int i = 0; i < n; ++i) {
        if (!(s(i, i) > 0.0))
            throw InvalidInput("kkt_report: input diagonal must be positive");
        rep.diagonal = std::max(rep.diagonal, std::abs(sigma(i, i) - s(i, i)) / s(i, i));
        for (int j = i + 1; j < n; ++j) {
            rep.lower_bound = std::max(rep.lower_bound, s(i, j) - sigma(i, j));
            rep.sign = std::max(rep.sign, k(i, j));
            rep.slackness = std::max(rep.slackness,
                                     std::abs(k(i, j) * (sigma(i, j) - s(i, j))));
        }
    }
    rep.lower_bound = std::max(rep.lower_bound, 0.0);
    rep.sign = std::max(rep.sign, 0.0);
    const Matrix prod = sigma * k;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            rep.inverse_gap = std::max(rep.inverse_gap,
                                       std::abs(prod(i, j) - (i == j ? 1.0 : 0.0)));
    rep.overall = std::max({rep.diagonal, rep.lower_bound, rep.sign, rep.slackness});
    return rep;
}

// Heavy-tail variant: fit on the sine-transformed Kendall matrix, then map
// back to covariance scale with the sample standard deviations. Both scales
// are kept on the result.
inline MtpSolution mtp2_mle_kendall(const ReturnsPanel& p, double tol = 1e-7,
                                    int max_iter = 500) {
    validate_panel(p, "mtp2_mle_kendall");
    if (p.T() < 2) throw EmptyPanel("mtp2_mle_kendall: needs T >= 2");
    Matrix s_tau = kendall_tau_matrix(p);

    double ridge = 0.0;
    if (!is_positive_definite(s_tau)) {
        ridge = 1e-6;
        for (int i = 0; i < s_tau.rows(); ++i) s_tau(i, i) += ridge;
    }

    MtpSolution corr = mtp2_mle(s_tau, tol, max_iter);

    const Matrix s = sample_covariance(p, Denominator::T_minus_1);
    const int n = p.N();
    Vector d(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (!(s(i, i) > 0.0))
            throw ZeroVarianceColumn("mtp2_mle_kendall: asset " +
                                     p.assets[static_cast<std::size_t>(i)] +
                                     " has zero variance");
        d[static_cast<std::size_t>(i)] = std::sqrt(s(i, i));
    }

    MtpSolution sol = corr;
    sol.kendall = true;
    sol.ridge = ridge;
    sol.input_scale = "kendall";
    sol.sigma_corr = corr.sigma_hat;
    sol.k_corr = corr.k_hat;
    sol.sigma_hat = Matrix(n, n, 0.0);
    sol.k_hat = Matrix(n, n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double dij = d[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(j)];
            sol.sigma_hat(i, j) = corr.sigma_hat(i, j) * dij;
            sol.k_hat(i, j) = corr.k_hat(i, j) / dij;
        }
    }
    return sol;
}

// True when K is symmetric, positive definite, and has no off-diagonal entry
// above tol. Returns false (never throws) on non-PD input.
inline bool is_m_matrix(const Matrix& k, double tol = 1e-10) {
    if (!k.square() || k.rows() == 0 || !k.all_finite() || !k.is_symmetric())
        return false;
    for (int i = 0; i < k.rows(); ++i)
        for (int j = 0; j < k.cols(); ++j)
            if (i != j && k(i, j) > tol) return false;
    return is_positive_definite(k);
}

// Density with an evaluate callback; dim tells pair checks how to split
// concatenated points.
struct DensityOracle {
    int dim = 0;
    std::function<double(const Vector&)> evaluate;
};

// Checks p(x) p(y) <= p(x ^ y) p(x v y) for one pair of points, with a 1e-12
// relative slack on the product comparison.
inline bool check_mtp2_pair(const DensityOracle& density, const Vector& x,
                            const Vector& y) {
    if (density.dim <= 0 || !density.evaluate)
        throw InvalidInput("check_mtp2_pair: density oracle is not populated");
    if (static_cast<int>(x.size()) != density.dim ||
        static_cast<int>(y.size()) != density.dim)
        throw DimensionMismatch("check_mtp2_pair: point dimension mismatch");
    Vector lo(x.size()), hi(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        lo[i] = std::min(x[i], y[i]);
        hi[i] = std::max(x[i], y[i]);
    }
    const double lhs = density.evaluate(x) * density.evaluate(y);
    const double rhs = density.evaluate(lo) * density.evaluate(hi);
    return lhs <= rhs + 1e-12 * std::max({std::abs(lhs), std::abs(rhs), 1e-300});
}

// Bivariate Student-t density with location zero, given the 2x2 precision
// (inverse scatter) matrix and df degrees of freedom:
//   p(x) = G((df+2)/2) / (G(df/2) df pi) * det(P)^{1/2}
//          * (1 + x^T P x / df)^{-(df+2)/2}
inline double bivariate_t_density(const Vector& x, const Matrix& precision, double df) {
    if (x.size() != 2 || precision.rows() != 2 || precision.cols() != 2)
        throw DimensionMismatch("bivariate_t_density: needs dimension 2");
    if (!(df > 0.0)) throw InvalidInput("bivariate_t_density: df must be positive");
    require_square_symmetric(precision, "bivariate_t_density");
    const double det = precision(0, 0) * precision(1, 1) - precision(0, 1) * precision(1, 0);
    if (!(det > 0.0) || !(precision(0, 0) > 0.0))
        throw NotPositiveDefinite("bivariate_t_density: precision not PD");
    const double q = precision(0, 0) * x[0] * x[0] + 2.0 * precision(0, 1) * x[0] * x[1] +
                     precision(1, 1) * x[1] * x[1];
    const double pi = 3.14159265358979323846;
    const double norm = std::exp(std::lgamma(0.5 * (df + 2.0)) - std::lgamma(0.5 * df)) /
                        (df * pi) * std::sqrt(det);
    return norm * std::pow(1.0 + q / df, -0.5 * (df + 2.0));
}

inline DensityOracle bivariate_t_oracle(const Matrix& precision, double df) {
    DensityOracle oracle;
    oracle.dim = 2;
    oracle.evaluate = [precision, df](const Vector& x) {
        return bivariate_t_density(x, precision, df);
    };
    return oracle;
}

// Single-factor covariance market_var * beta beta^T + diag(idio_vars). With
// strictly positive beta the inverse is an M-matrix.
inline Matrix single_factor_covariance(const Vector& beta, double market_var,
                                       const Vector& idio_vars) {
    if (beta.empty() || beta.size() != idio_vars.size())
        throw DimensionMismatch("single_factor_covariance: beta and idio sizes differ");
    if (!(market_var > 0.0))
        throw NonpositiveVariance("single_factor_covariance: market variance " +
                                  std::to_string(market_var));
    for (double v : idio_vars)
        if (!(v > 0.0))
            throw NonpositiveVariance("single_factor_covariance: idiosyncratic variance " +
                                      std::to_string(v));
    const int n = static_cast<int>(beta.size());
    Matrix s(n, n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            double v = market_var * beta[static_cast<std::size_t>(i)] *
                       beta[static_cast<std::size_t>(j)];
            if (i == j) v += idio_vars[static_cast<std::size_t>(i)];
            s(i, j) = v;
            s(j, i) = v;
        }
    }
    return s;
}

} // namespace mtp2
