#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/panel.hpp"

namespace mtp2 {

// Denominator convention for second moments: T is the likelihood convention
// (feeds the Gaussian log-likelihood), T-1 the reporting convention.
enum class Denominator { T, T_minus_1 };

inline Vector sample_mean(const ReturnsPanel& p) {
    validate_panel(p, "sample_mean");
    Vector mu(static_cast<std::size_t>(p.N()), 0.0);
    for (int t = 0; t < p.T(); ++t)
        for (int i = 0; i < p.N(); ++i) mu[static_cast<std::size_t>(i)] += p.returns(t, i);
    for (double& v : mu) v /= p.T();
    return mu;
}

// Centered second-moment matrix; S(i,j) and S(j,i) are written from the same
// accumulation so symmetry is exact.
inline Matrix sample_covariance(const ReturnsPanel& p,
                                Denominator den = Denominator::T_minus_1) {
    validate_panel(p, "sample_covariance");
    const int T = p.T(), N = p.N();
    if (den == Denominator::T_minus_1 && T < 2)
        throw DegenerateDenominator("sample_covariance: T-1 denominator needs T >= 2, got T = " +
                                    std::to_string(T));
    const Vector mu = sample_mean(p);
    Matrix x(T, N);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < N; ++i) x(t, i) = p.returns(t, i) - mu[static_cast<std::size_t>(i)];
    const double denom = (den == Denominator::T) ? static_cast<double>(T)
                                                 : static_cast<double>(T - 1);
    Matrix s(N, N, 0.0);
    for (int i = 0; i < N; ++i) {
        for (int j = i; j < N; ++j) {
            double acc = 0.0;
            for (int t = 0; t < T; ++t) acc += x(t, i) * x(t, j);
            const double v = acc / denom;
            s(i, j) = v;
            s(j, i) = v;
        }
    }
    return s;
}

// Correlation matrix with an exactly unit diagonal. Throws
// ZeroVarianceColumn naming the offending asset.
inline Matrix sample_correlation(const ReturnsPanel& p) {
    validate_panel(p, "sample_correlation");
    if (p.T() < 2)
        throw DegenerateDenominator("sample_correlation: needs T >= 2");
    const Matrix s = sample_covariance(p, Denominator::T_minus_1);
    const int n = s.rows();
    Vector d(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (!(s(i, i) > 0.0))
            throw ZeroVarianceColumn("sample_correlation: asset " +
                                     p.assets[static_cast<std::size_t>(i)] +
                                     " has zero variance");
        d[static_cast<std::size_t>(i)] = std::sqrt(s(i, i));
    }
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
    return r;
}

namespace detail {

// Pair concordance sum: #concordant - #discordant over t < t', ties
// contributing zero. Integer-exact reference double loop.
inline long long concordance_naive(const std::vector<double>& x,
                                   const std::vector<double>& y) {
    const int T = static_cast<int>(x.size());
    long long s = 0;
    for (int t = 0; t < T; ++t) {
        for (int u = t + 1; u < T; ++u) {
            const double dx = x[static_cast<std::size_t>(t)] - x[static_cast<std::size_t>(u)];
            const double dy = y[static_cast<std::size_t>(t)] - y[static_cast<std::size_t>(u)];
            if (dx == 0.0 || dy == 0.0) continue;
            s += ((dx > 0.0) == (dy > 0.0)) ? 1 : -1;
        }
    }
    return s;
}

inline long long merge_count(std::vector<double>& v, std::vector<double>& buf,
                             std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    long long inv = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            inv += static_cast<long long>(mid - i);
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo),
              buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return inv;
}

// Merge-sort concordance count (Knight). Integer-exact, so it agrees with the
// double loop bitwise on any data, ties included:
//   C - D = n0 - n1 - n2 + n3 - 2 * inversions
// with n0 total pairs, n1/n2 pairs tied in x/y, n3 tied in both, counting
// strict y-inversions after sorting by (x, y).
inline long long concordance_fast(const std::vector<double>& x,
                                  const std::vector<double>& y) {
    const std::size_t T = x.size();
    std::vector<std::size_t> ord(T);
    for (std::size_t t = 0; t < T; ++t) ord[t] = t;
    std::sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) {
        if (x[a] != x[b]) return x[a] < x[b];
        return y[a] < y[b];
    });

    const long long n0 = static_cast<long long>(T) * (static_cast<long long>(T) - 1) / 2;
    long long n1 = 0, n2 = 0, n3 = 0;

    std::size_t run = 1;
    for (std::size_t t = 1; t <= T; ++t) {
        if (t < T && x[ord[t]] == x[ord[t - 1]]) {
            ++run;
        } else {
            n1 += static_cast<long long>(run) * (static_cast<long long>(run) - 1) / 2;
            run = 1;
        }
    }
    run = 1;
    for (std::size_t t = 1; t <= T; ++t) {
        if (t < T && x[ord[t]] == x[ord[t - 1]] && y[ord[t]] == y[ord[t - 1]]) {
            ++run;
        } else {
            n3 += static_cast<long long>(run) * (static_cast<long long>(run) - 1) / 2;
            run = 1;
        }
    }
    std::vector<double> ys(T);
    for (std::size_t t = 0; t < T; ++t) ys[t] = y[ord[t]];
    {
        std::vector<double> sorted_y = ys;
        std::sort(sorted_y.begin(), sorted_y.end());
        run = 1;
        for (std::size_t t = 1; t <= T; ++t) {
            if (t < T && sorted_y[t] == sorted_y[t - 1]) {
                ++run;
            } else {
                n2 += static_cast<long long>(run) * (static_cast<long long>(run) - 1) / 2;
                run = 1;
            }
        }
    }
    std::vector<double> buf(T);
    const long long inv = merge_count(ys, buf, 0, T);
    return n0 - n1 - n2 + n3 - 2 * inv;
}

} // namespace detail

// Kendall rank-correlation matrix mapped through the sine transform:
// entry(i,j) = sin(pi/2 * tau_a(i,j)), diagonal exactly 1. tau_a divides the
// concordance sum by T(T-1)/2; ties contribute zero (no tie correction).
// Invariant under strictly increasing per-column transforms.
inline Matrix kendall_tau_matrix(const ReturnsPanel& p) {
    validate_panel(p, "kendall_tau_matrix");
    const int T = p.T(), N = p.N();
    if (T < 2) throw EmptyPanel("kendall_tau_matrix: needs T >= 2, got T = " +
                                std::to_string(T));
    const double n0 = static_cast<double>(T) * (T - 1) / 2.0;
    Matrix out(N, N, 0.0);
    std::vector<double> xi(static_cast<std::size_t>(T)), xj(static_cast<std::size_t>(T));
    for (int i = 0; i < N; ++i) {
        out(i, i) = 1.0;
        for (int t = 0; t < T; ++t) xi[static_cast<std::size_t>(t)] = p.returns(t, i);
        for (int j = i + 1; j < N; ++j) {
            for (int t = 0; t < T; ++t) xj[static_cast<std::size_t>(t)] = p.returns(t, j);
            const double tau = static_cast<double>(detail::concordance_fast(xi, xj)) / n0;
            const double v = std::sin(1.5707963267948966 * tau);
            out(i, j) = v;
            out(j, i) = v;
        }
    }
    return out;
}

// Reference double-loop implementation of the same matrix; the fast variant
// must (and does) match it exactly because both count integers.
inline Matrix kendall_tau_matrix_naive(const ReturnsPanel& p) {
    validate_panel(p, "kendall_tau_matrix");
    const int T = p.T(), N = p.N();
    if (T < 2) throw EmptyPanel("kendall_tau_matrix: needs T >= 2");
    const double n0 = static_cast<double>(T) * (T - 1) / 2.0;
    Matrix out(N, N, 0.0);
    std::vector<double> xi(static_cast<std::size_t>(T)), xj(static_cast<std::size_t>(T));
    for (int i = 0; i < N; ++i) {
        out(i, i) = 1.0;
        for (int t = 0; t < T; ++t) xi[static_cast<std::size_t>(t)] = p.returns(t, i);
        for (int j = i + 1; j < N; ++j) {
            for (int t = 0; t < T; ++t) xj[static_cast<std::size_t>(t)] = p.returns(t, j);
            const double tau = static_cast<double>(detail::concordance_naive(xi, xj)) / n0;
            const double v = std::sin(1.5707963267948966 * tau);
            out(i, j) = v;
            out(j, i) = v;
        }
    }
    return out;
}

} // namespace mtp2
