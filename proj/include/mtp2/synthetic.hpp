#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mtp2/errors.hpp"
#include "mtp2/linalg.hpp"
#include "mtp2/matrix.hpp"
#include "mtp2/panel.hpp"
#include "mtp2/rng.hpp"

// Synthetic market generators with known ground truth. Deterministic given
// the seed (see rng.hpp for the pinned stream). Generators:
//   gaussian_mtp2          Gaussian draws, true precision a sparse M-matrix
//   single_factor          one positive-beta factor plus idiosyncratic noise
//   elliptical_t_inverse_m Student-t draws, scatter inverse an M-matrix

namespace mtp2 {

struct SyntheticSpec {
    std::string generator = "gaussian_mtp2";
    int n = 10;
    int t = 100;
    std::uint64_t seed = 0;
    double sparsity = 0.3;    // edge probability for the M-matrix generators
    int df = 3;               // degrees of freedom, elliptical generator
    double beta_min = 0.5;    // single_factor loading range
    double beta_max = 1.5;
    double market_var = 1e-4;
    double idio_min = 5e-5;
    double idio_max = 2e-4;
    double scale = 0.01;      // return scale for the M-matrix generators
};

struct SyntheticData {
    ReturnsPanel panel;
    Matrix sigma_true;
    Matrix k_true;
    Vector beta_true;  // single_factor only
    SyntheticSpec spec;
};

namespace detail {

inline std::string padded(const std::string& prefix, int value, int width) {
    std::string digits = std::to_string(value);
    while (static_cast<int>(digits.size()) < width) digits.insert(digits.begin(), '0');
    return prefix + digits;
}

// K = D - W with W a nonnegative sparse symmetric off-diagonal part and
// D = diag(row sums) + 0.1 I, so the minimum eigenvalue is at least 0.1 by
// diagonal dominance.
inline Matrix random_m_matrix_precision(int n, double sparsity, Rng& rng) {
    Matrix k(n, n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            if (rng.uniform() <= sparsity) {
                const double w = rng.uniform(0.1, 1.0);
                k(i, j) = -w;
                k(j, i) = -w;
            }
        }
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        for (int j = 0; j < n; ++j)
            if (j != i) row += -k(i, j);
        k(i, i) = row + 0.1;
    }
    return k;
}

} // namespace detail

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n < 1 || spec.t < 1)
        throw InvalidSpec("generate_synthetic: n and t must be positive");
    if (spec.generator != "gaussian_mtp2" && spec.generator != "single_factor" &&
        spec.generator != "elliptical_t_inverse_m")
        throw InvalidSpec("generate_synthetic: unknown generator '" + spec.generator + "'");
    if (spec.generator == "elliptical_t_inverse_m" && spec.df < 1)
        throw InvalidSpec("generate_synthetic: df must be a positive integer");
    if (!(spec.sparsity >= 0.0 && spec.sparsity <= 1.0))
        throw InvalidSpec("generate_synthetic: sparsity must be in [0, 1]");
    if (!(spec.scale > 0.0)) throw InvalidSpec("generate_synthetic: scale must be positive");

    Rng rng(spec.seed);
    SyntheticData out;
    out.spec = spec;
    const int n = spec.n, t = spec.t;

    out.panel.return_kind = "simple";
    for (int i = 0; i < n; ++i) out.panel.assets.push_back(detail::padded("A", i, 4));
    for (int s = 0; s < t; ++s) out.panel.dates.push_back(detail::padded("t", s, 6));
    out.panel.returns = Matrix(t, n);

    if (spec.generator == "single_factor") {
        Vector beta(static_cast<std::size_t>(n)), idio(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) beta[static_cast<std::size_t>(i)] = rng.uniform(spec.beta_min, spec.beta_max);
        for (int i = 0; i < n; ++i)
            idio[static_cast<std::size_t>(i)] = rng.uniform(spec.idio_min, spec.idio_max);
        out.beta_true = beta;
        out.sigma_true = Matrix(n, n, 0.0);
        // Mirror explicitly: (market_var * beta_i) * beta_j rounds differently
        // from (market_var * beta_j) * beta_i, and cholesky checks symmetry bitwise.
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                double v = spec.market_var * beta[static_cast<std::size_t>(i)] *
                           beta[static_cast<std::size_t>(j)];
                if (i == j) v += idio[static_cast<std::size_t>(i)];
                out.sigma_true(i, j) = v;
                out.sigma_true(j, i) = v;
            }
        out.k_true = spd_inverse(out.sigma_true);
        const double market_sd = std::sqrt(spec.market_var);
        for (int s = 0; s < t; ++s) {
            const double m = market_sd * rng.normal();
            for (int i = 0; i < n; ++i)
                out.panel.returns(s, i) =
                    beta[static_cast<std::size_t>(i)] * m +
                    std::sqrt(idio[static_cast<std::size_t>(i)]) * rng.normal();
        }
        return out;
    }

    const Matrix k_unit = detail::random_m_matrix_precision(n, spec.sparsity, rng);
    const Matrix sigma_unit = spd_inverse(k_unit);
    const Matrix l = cholesky(sigma_unit);
    out.sigma_true = (spec.scale * spec.scale) * sigma_unit;
    out.k_true = (1.0 / (spec.scale * spec.scale)) * k_unit;

    Vector z(static_cast<std::size_t>(n));
    for (int s = 0; s < t; ++s) {
        for (int i = 0; i < n; ++i) z[static_cast<std::size_t>(i)] = rng.normal();
        double mult = spec.scale;
        if (spec.generator == "elliptical_t_inverse_m") {
            const double g = rng.chi_squared(spec.df);
            mult *= std::sqrt(static_cast<double>(spec.df) / std::max(g, 1e-300));
        }
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j <= i; ++j) acc += l(i, j) * z[static_cast<std::size_t>(j)];
            out.panel.returns(s, i) = mult * acc;
        }
    }
    return out;
}

} // namespace mtp2
