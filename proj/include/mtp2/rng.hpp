#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mtp2 {

// Deterministic, portable random source. The core stream is std::mt19937_64,
// whose output sequence for a given seed is pinned by the C++ standard; the
// distributions below are written out explicitly (standard-library
// distribution objects are not portable across implementations).
//
//   uniform: u = (x >> 11 + 1) * 2^-53, strictly inside (0, 1]
//   normal:  Box-Muller pair from two uniforms, second value cached
//   chi-squared(k): sum of k squared normals (integer k)
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on (0, 1]; never returns 0 so log(u) is safe.
    double uniform() {
        return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double chi_squared(int k) {
        double s = 0.0;
        for (int i = 0; i < k; ++i) {
            const double z = normal();
            s += z * z;
        }
        return s;
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return engine_() % n; }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace mtp2
