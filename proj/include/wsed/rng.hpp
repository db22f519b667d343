#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace wsed {

// Deterministic random source. std::mt19937_64 produces a bit-stable stream
// on every platform; the standard <random> distributions do not, so the
// integer/real mappings are implemented here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, n). Rejection sampling, unbiased for every n.
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) {
            throw std::invalid_argument("Rng::uniform_index: n must be positive");
        }
        const std::uint64_t rem = (UINT64_MAX % n + 1) % n;  // 2^64 mod n
        std::uint64_t x = engine_();
        if (rem != 0) {
            const std::uint64_t limit = 0 - rem;  // wraps to 2^64 - rem
            while (x >= limit) {
                x = engine_();
            }
        }
        return x % n;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller. Draws a fresh pair per call so the stream does not depend
    // on call parity.
    double gaussian(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - uniform01();  // (0, 1], keeps log finite
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace wsed
