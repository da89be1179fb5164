#pragma once

// Platform-stable random streams.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The distribution code below is our own: the standard library's
// distributions are implementation-defined and would tie reproducibility to a
// particular toolchain.

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace cdr {

inline constexpr const char* kRngAlgorithm = "mt19937_64";

// splitmix64 finalizer; maps (seed, stream) to an independent engine seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), unbiased by rejection.
    std::uint64_t index(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) {
            x = engine_();
        }
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal by the Marsaglia polar method; one value per call.
    double normal();

    double normal(double mean, double sd) { return mean + sd * normal(); }

    template <class T>
    void shuffle(std::span<T> values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(index(i));
            std::swap(values[i - 1], values[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

// Lower-tail standard normal quantile (Acklam's rational approximation with
// one Halley refinement step; |error| < 1e-12 on (1e-10, 1 - 1e-10)).
double normal_quantile(double p);
double normal_cdf(double x);

}  // namespace cdr
