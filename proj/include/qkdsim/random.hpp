#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace qkdsim {

/// Deterministic pseudo-random stream keyed by (seed, label).
///
/// Stands in for the quantum random number generator of a real
/// transmitter. Not cryptographically secure. A stream is owned by one
/// consumer at a time; do not share one across threads.
class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::string_view stream_id);

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }
    double normal();
    double exponential(double rate);
    std::uint64_t poisson(double mean);
    std::uint64_t binomial(std::uint64_t trials, double p);

    /// A fresh stream for a sub-task, keyed by this stream's identity.
    RandomStream derive(std::string_view child_id) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t key_;
    std::mt19937_64 engine_;
};

inline RandomStream rng_stream(std::uint64_t seed, std::string_view stream_id) {
    return RandomStream(seed, stream_id);
}

/// 64-bit FNV-1a; stable across platforms.
std::uint64_t stable_hash(std::string_view text);

}  // namespace qkdsim
