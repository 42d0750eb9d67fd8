#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace spem {

// Seedable generator that can derive independent child streams, so a draw can
// be tied to (seed, purpose, epoch, sample index) instead of iteration order.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

    std::uint64_t seed() const { return seed_; }

    Rng split(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ULL))); }

    std::uint64_t next() { return engine_(); }

    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

    double normal(double mean = 0.0, double stddev = 1.0)
    {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    // Uniform integer in [0, n).
    std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename It>
    void shuffle(It first, It last)
    {
        std::shuffle(first, last, engine_);
    }

    std::vector<std::size_t> permutation(std::size_t n)
    {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx.begin(), idx.end());
        return idx;
    }

private:
    // splitmix64 finaliser
    static std::uint64_t mix(std::uint64_t z)
    {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kAugment = 3;
inline constexpr std::uint64_t kSynthetic = 4;
}  // namespace streams

}  // namespace spem
