#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tbench {

// Deterministic RNG. The engine is std::mt19937_64 (its output sequence is
// fixed by the standard); the distribution helpers below are hand-rolled so
// that draws are bit-identical across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    float uniform() {
        return static_cast<float>((next_u64() >> 11) * (1.0 / 9007199254740992.0));
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Box-Muller; consumes two uniforms per pair of normals.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = (next_u64() >> 11) * (1.0 / 9007199254740992.0);
        } while (u1 <= 0.0);
        u2 = (next_u64() >> 11) * (1.0 / 9007199254740992.0);
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = static_cast<float>(r * std::sin(2.0 * M_PI * u2));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(2.0 * M_PI * u2));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    // Derives an independent per-item stream, e.g. (experiment seed, image index).
    static Rng substream(uint64_t seed, uint64_t stream_tag, uint64_t index = 0) {
        uint64_t x = seed;
        x = mix(x ^ (0x9e3779b97f4a7c15ULL + stream_tag));
        x = mix(x ^ (0xbf58476d1ce4e5b9ULL * (index + 1)));
        return Rng(x);
    }

private:
    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 eng_;
    bool have_spare_ = false;
    float spare_ = 0.f;
};

}  // namespace tbench
