#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dorl {

// Exit codes used by the CLI; library code signals the category via the
// exception type.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ModelStateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Splittable counter-based RNG. Every stream is keyed by
// (global seed, purpose label, index), so draws are reproducible no matter
// in which order the streams are consumed.
class Rng {
  public:
    Rng(uint64_t seed, const std::string& label, uint64_t index = 0)
        : state_(mix(mix(mix(0x9e3779b97f4a7c15ULL ^ seed, fnv1a(label)), index), 0x2545f4914f6cdd1dULL)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_, 0xbf58476d1ce4e5b9ULL);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller; u clamped away from 0 so log stays finite.
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    static uint64_t fnv1a(const std::string& s) {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

  private:
    static uint64_t mix(uint64_t z, uint64_t salt) {
        z ^= salt;
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dorl
