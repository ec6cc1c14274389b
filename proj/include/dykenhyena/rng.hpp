// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace dkh {

/// One step of SplitMix64. Used both to initialise generator state and as the
/// seed-mixing function.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Child seed for shard/run `index` of a parent seed:
///   s = parent ^ (0xD1B54A32D192ED03 * (index + 1)); return splitmix64(s).
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) noexcept {
    std::uint64_t s = parent ^ (0xD1B54A32D192ED03ull * (index + 1));
    return splitmix64(s);
}

/// xorshift64* stream with a SplitMix64-initialised 64-bit state.
///
/// Every random quantity in the project is drawn from this generator so the
/// streams are reproducible in any language:
///   next():     x ^= x >> 12; x ^= x << 25; x ^= x >> 27; return x * 0x2545F4914F6CDD1D
///   uniform():  (next() >> 11) * 2^-53, in [0, 1)
///   normal():   Box-Muller on two uniforms, u1 = 1 - uniform(); only the cosine branch is used
///   below(n):   next() % n
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept {
        std::uint64_t s = seed;
        state_ = splitmix64(s);
        if (state_ == 0) state_ = 0x9E3779B97F4A7C15ull;
    }

    std::uint64_t next() noexcept {
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545F4914F6CDD1Dull;
    }

    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double normal() noexcept {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next() % n; }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

}  // namespace dkh
