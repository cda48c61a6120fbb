#pragma once

// Seedable random stream with a fixed draw discipline so runs with the same
// seed reproduce bit-for-bit on a given build.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace optionkit {

class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    /// Uniform double in [0, 1). 53 mantissa bits, engine-portable.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        // rejection sampling keeps the distribution exact
        const std::uint64_t span = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % span;
        std::uint64_t r;
        do { r = gen_(); } while (r >= limit);
        return static_cast<int>(r % span);
    }

    /// Standard normal via Box-Muller (hand-rolled: std::normal_distribution
    /// is not bit-stable across library versions).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Sample an index from an unnormalized nonnegative weight vector by CDF
    /// walk. Zero-weight entries are never returned.
    int categorical(const Eigen::VectorXd& w) {
        const double total = w.sum();
        if (!(total > 0.0)) throw std::invalid_argument("categorical: weights sum to zero");
        double u = uniform() * total;
        int last_positive = -1;
        for (int i = 0; i < w.size(); ++i) {
            const double wi = w[i];
            if (wi <= 0.0) continue;
            last_positive = i;
            if (u < wi) return i;
            u -= wi;
        }
        return last_positive;  // u landed on accumulated rounding
    }

    /// Derive an independent child stream (e.g. one per seed or worker).
    RandomStream child(std::uint64_t tag) {
        return RandomStream(gen_() ^ (0x9e3779b97f4a7c15ULL * (tag + 1)));
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace optionkit
