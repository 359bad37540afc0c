#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace ifcd::numerics {

/// xoshiro256** seeded through splitmix64. All distributions are implemented
/// here so that a seed gives bit-identical streams regardless of the standard
/// library in use.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64() noexcept;

    /// Independent child stream; advances this generator once.
    Rng split() noexcept;

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). n must be positive.
    std::size_t below(std::size_t n);
    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi);
    bool bernoulli(double p) noexcept { return uniform() < p; }
    double normal() noexcept;
    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    /// Index drawn proportionally to non-negative weights.
    std::size_t weighted_index(std::span<const double> weights);

    template <class T>
    const T& choice(const std::vector<T>& items) {
        return items[below(items.size())];
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

private:
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace ifcd::numerics
