#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace noisear {

// Seeded random stream. Same seed gives the same draw sequence within this
// implementation; cross-implementation bit-parity is not promised.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // Independent stream for a sub-consumer (seed-splitting).
    Rng split(std::uint64_t consumer) const {
        return Rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (consumer + 1)));
    }

    double uniform() {
        // 53-bit uniform in [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t next_u64() { return engine_(); }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace noisear
