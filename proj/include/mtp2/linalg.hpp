#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/matrix.hpp"

// Dense symmetric linear algebra used by every estimator: Cholesky, SPD
// solves and inverses, and a cyclic Jacobi eigendecomposition. Deterministic:
// fixed loop order, no parallelism, no external dependency.

namespace mtp2 {

// Lower-triangular Cholesky factor L with A = L L^T.
// Throws NotPositiveDefinite when any pivot falls at or below
// 1e-12 * max(diag(A)).
inline Matrix cholesky(const Matrix& a) {
    require_square_symmetric(a, "cholesky");
    const int n = a.rows();
    double max_diag = 0.0;
    for (int i = 0; i < n; ++i) max_diag = std::max(max_diag, a(i, i));
    const double pivot_tol = 1e-12 * max_diag;

    Matrix l(n, n, 0.0);
    for (int j = 0; j < n; ++j) {
        double d = a(j, j);
        const double* lj = l.row_ptr(j);
        for (int k = 0; k < j; ++k) d -= lj[k] * lj[k];
        if (!(d > pivot_tol))
            throw NotPositiveDefinite("pivot " + std::to_string(d) + " at index " +
                                      std::to_string(j));
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            const double* li = l.row_ptr(i);
            for (int k = 0; k < j; ++k) s -= li[k] * lj[k];
            l(i, j) = s / ljj;
        }
    }
    return l;
}

inline bool is_positive_definite(const Matrix& a) {
    if (!a.square() || a.rows() == 0 || !a.all_finite() || !a.is_symmetric())
        return false;
    try {
        cholesky(a);
        return true;
    } catch (const NotPositiveDefinite&) {
        return false;
    }
}

// log det A from the Cholesky factor; exact for SPD input by construction.
inline double log_det(const Matrix& a) {
    Matrix l = cholesky(a);
    double s = 0.0;
    for (int i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
}

inline Vector solve_lower(const Matrix& l, const Vector& b) {
    const int n = l.rows();
    Vector x(b);
    for (int i = 0; i < n; ++i) {
        const double* li = l.row_ptr(i);
        double s = x[static_cast<std::size_t>(i)];
        for (int k = 0; k < i; ++k) s -= li[k] * x[static_cast<std::size_t>(k)];
        x[static_cast<std::size_t>(i)] = s / li[i];
    }
    return x;
}

inline Vector solve_upper_from_lower(const Matrix& l, const Vector& b) {
    const int n = l.rows();
    Vector x(b);
    for (int i = n - 1; i >= 0; --i) {
        double s = x[static_cast<std::size_t>(i)];
        for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[static_cast<std::size_t>(k)];
        x[static_cast<std::size_t>(i)] = s / l(i, i);
    }
    return x;
}

// Solves A x = b for SPD A via Cholesky.
inline Vector spd_solve(const Matrix& a, const Vector& b) {
    if (static_cast<int>(b.size()) != a.rows())
        throw DimensionMismatch("spd_solve: right-hand side length " +
                                std::to_string(b.size()) + " vs dimension " +
                                std::to_string(a.rows()));
    Matrix l = cholesky(a);
    return solve_upper_from_lower(l, solve_lower(l, b));
}

inline Vector spd_solve_with_factor(const Matrix& l, const Vector& b) {
    return solve_upper_from_lower(l, solve_lower(l, b));
}

// A^{-1} for SPD A; the result is symmetrized so mirrored entries match
// exactly.
inline Matrix spd_inverse_from_factor(const Matrix& l) {
    const int n = l.rows();
    Matrix inv(n, n, 0.0);
    Vector e(static_cast<std::size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        e[static_cast<std::size_t>(j)] = 1.0;
        Vector col = solve_upper_from_lower(l, solve_lower(l, e));
        for (int i = 0; i < n; ++i) inv(i, j) = col[static_cast<std::size_t>(i)];
        e[static_cast<std::size_t>(j)] = 0.0;
    }
    inv.symmetrize();
    return inv;
}

inline Matrix spd_inverse(const Matrix& a) {
    return spd_inverse_from_factor(cholesky(a));
}

struct EigenDecomposition {
    Vector values;   // descending; ties keep original diagonal order
    Matrix vectors;  // orthonormal columns, vectors.col(k) pairs with values[k]
};

// Cyclic Jacobi for symmetric matrices. Converged when the off-diagonal
// Frobenius norm falls to 1e-12 * ||A||_F; throws ConvergenceFailure after
// max_sweeps. Eigenvector sign: the largest-magnitude entry of each column is
// made positive (first such entry on ties).
inline EigenDecomposition sym_eigen(const Matrix& a, int max_sweeps = 100) {
    require_square_symmetric(a, "sym_eigen");
    const int n = a.rows();
    Matrix b = a;
    Matrix v = Matrix::identity(n);
    const double norm_a = a.frobenius_norm();
    const double off_tol = 1e-12 * norm_a;

    auto off_norm = [&]() {
        double s = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) s += 2.0 * b(i, j) * b(i, j);
        return std::sqrt(s);
    };

    int sweep = 0;
    while (off_norm() > off_tol) {
        if (sweep++ >= max_sweeps)
            throw ConvergenceFailure("sym_eigen: off-diagonal norm " +
                                     std::to_string(off_norm()) + " after " +
                                     std::to_string(max_sweeps) + " sweeps");
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = b(p, q);
                if (apq == 0.0) continue;
                const double theta = (b(q, q) - b(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0)
                                     ? 1.0 / (theta + std::sqrt(theta * theta + 1.0))
                                     : 1.0 / (theta - std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double bkp = b(k, p), bkq = b(k, q);
                    b(k, p) = c * bkp - s * bkq;
                    b(k, q) = s * bkp + c * bkq;
                }
                for (int k = 0; k < n; ++k) {
                    const double bpk = b(p, k), bqk = b(q, k);
                    b(p, k) = c * bpk - s * bqk;
                    b(q, k) = s * bpk + c * bqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return b(x, x) > b(y, y); });

    EigenDecomposition out;
    out.values.resize(static_cast<std::size_t>(n));
    out.vectors = Matrix(n, n, 0.0);
    for (int k = 0; k < n; ++k) {
        const int src = order[static_cast<std::size_t>(k)];
        out.values[static_cast<std::size_t>(k)] = b(src, src);
        int arg = 0;
        double best = -1.0;
        for (int i = 0; i < n; ++i) {
            const double mag = std::abs(v(i, src));
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        const double sign = (v(arg, src) < 0.0) ? -1.0 : 1.0;
        for (int i = 0; i < n; ++i) out.vectors(i, k) = sign * v(i, src);
    }
    return out;
}

// Moore-Penrose pseudo-inverse of a symmetric matrix: eigenvalues with
// |lambda| <= rel_tol * max|lambda| are treated as zero.
inline Matrix sym_pseudo_inverse(const Matrix& a, double rel_tol = 1e-12) {
    EigenDecomposition eig = sym_eigen(a);
    const int n = a.rows();
    double max_mag = 0.0;
    for (double lam : eig.values) max_mag = std::max(max_mag, std::abs(lam));
    const double cut = rel_tol * max_mag;
    Matrix out(n, n, 0.0);
    for (int k = 0; k < n; ++k) {
        const double lam = eig.values[static_cast<std::size_t>(k)];
        if (std::abs(lam) <= cut) continue;
        const double w = 1.0 / lam;
        for (int i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k);
            if (vik == 0.0) continue;
            for (int j = 0; j < n; ++j) out(i, j) += w * vik * eig.vectors(j, k);
        }
    }
    out.symmetrize();
    return out;
}

} // namespace mtp2
