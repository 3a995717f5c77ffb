#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace malm {

/// Error type thrown for every contract violation in this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

/// Deterministic 64-bit seed mixing (splitmix64 finalizer). Used to derive
/// per-epoch, per-step and per-bag seeds from one top-level seed so that all
/// randomness is reproducible across runs and platforms.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull + b * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

/// Small deterministic RNG with platform-stable output. The standard
/// distributions are implementation-defined, so all sampling in this project
/// goes through this class instead.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Unbiased (rejection sampling).
    uint64_t bounded(uint64_t n);

    /// Standard normal via Box-Muller.
    double normal();

private:
    uint64_t state_;
};

/// Process-wide runtime setup: double precision default, single-threaded
/// tensor ops (bit-exact reproducibility), seeded torch RNG. Safe to call
/// more than once; the interop thread count is only applied on first call.
void init_runtime(int64_t seed);

/// Re-seed the torch RNG without touching thread/dtype settings.
void reseed(int64_t seed);

constexpr int64_t kCheckpointFormatId = 1;

}  // namespace malm
