#include "malm/common.hpp"

#include <atomic>
#include <cmath>

#include <torch/torch.h>

namespace malm {

uint64_t SplitMix64::bounded(uint64_t n) {
    check(n > 0, "SplitMix64::bounded: n must be positive");
    const uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
        uint64_t x = next();
        if (x >= threshold) return x % n;
    }
}

double SplitMix64::normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void init_runtime(int64_t seed) {
    static std::atomic<bool> threads_set{false};
    if (!threads_set.exchange(true)) {
        torch::set_num_threads(1);
        try {
            torch::set_num_interop_threads(1);
        } catch (const std::exception&) {
            // already configured by an earlier torch call; single intra-op
            // thread is what determinism actually needs
        }
    }
    torch::set_default_dtype(caffe2::TypeMeta::Make<double>());
    torch::manual_seed(static_cast<uint64_t>(seed));
}

void reseed(int64_t seed) { torch::manual_seed(static_cast<uint64_t>(seed)); }

}  // namespace malm
