#pragma once

#include <cmath>
#include <cstdint>

namespace bevdiff {

// Counter-based deterministic RNG. The stream is the splitmix64 sequence
// seeded by `seed`; every draw advances the counter by a fixed amount, so
// identical seed + identical call sequence reproduces identical outputs on
// any platform with IEEE-754 doubles. Normal variates use Box-Muller with
// both values of the pair consumed (the spare is cached in the state).
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(next_double()) * (hi - lo);
    }

    // i in [0, n)
    uint64_t next_index(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(double p) { return next_double() < p; }

    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return static_cast<float>(spare_);
        }
        // Box-Muller; u clamped away from 0 so log stays finite.
        double u = next_double();
        if (u < 1e-300) u = 1e-300;
        double v = next_double();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 2.0 * 3.14159265358979323846 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    // Independent derived stream. Mixes the stream id through the output
    // function so sibling forks do not correlate.
    Rng fork(uint64_t stream) const {
        Rng probe(state_ ^ (0xD1B54A32D192ED03ull * (stream + 1)));
        return Rng(probe.next_u64());
    }

    // State accessors for checkpointing.
    uint64_t state() const { return state_; }
    bool has_spare() const { return has_spare_; }
    double spare() const { return spare_; }
    void restore(uint64_t state, bool has_spare, double spare) {
        state_ = state;
        has_spare_ = has_spare;
        spare_ = spare;
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace bevdiff
