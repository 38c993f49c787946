#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "exameval/error.hpp"

namespace exameval {

/// Identifies the random stream construction in every report. The engine is
/// std::mt19937_64, whose output sequence the C++ standard fixes exactly.
/// Sub-streams are seeded through SplitMix64 and bounded draws use rejection
/// sampling, so no implementation-defined distribution is involved.
inline constexpr const char* kRngAlgorithm = "mt19937_64+splitmix64-substreams+rejection-bounded";

struct Seed {
    std::uint64_t value = 0;
    std::string algorithm_id = kRngAlgorithm;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Independent stream for (seed, index): replicate i of a resampling run
    /// draws from substream(seed, i) regardless of scheduling.
    static Rng substream(const Seed& seed, std::uint64_t index) {
        if (seed.algorithm_id != kRngAlgorithm)
            throw ConfigError("unsupported RNG algorithm: " + seed.algorithm_id);
        return Rng(splitmix64(seed.value ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InputError("Rng::below(0)");
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t x = engine_();
            if (x >= threshold) return x % n;
        }
    }

    bool coin() { return (engine_() >> 63) != 0; }

    /// Uniform double in [0, 1) from the top 53 bits.
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Fisher-Yates with `below`, portable across standard libraries.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace exameval
