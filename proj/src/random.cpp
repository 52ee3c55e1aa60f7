#include "qkdsim/random.hpp"

#include <cmath>
#include <string>

namespace qkdsim {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t key) {
    const std::uint64_t a = splitmix64(seed);
    const std::uint64_t b = splitmix64(key ^ a);
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return std::mt19937_64(seq);
}

}  // namespace

std::uint64_t stable_hash(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

RandomStream::RandomStream(std::uint64_t seed, std::string_view stream_id)
    : seed_(seed), key_(stable_hash(stream_id)), engine_(make_engine(seed, key_)) {}

RandomStream RandomStream::derive(std::string_view child_id) const {
    std::string label = std::to_string(key_);
    label += '/';
    label += child_id;
    return RandomStream(seed_, label);
}

double RandomStream::normal() {
    std::normal_distribution<double> dist;
    return dist(engine_);
}

double RandomStream::exponential(double rate) {
    // 1 - u lies in (0, 1], so the log is finite.
    return -std::log1p(-uniform()) / rate;
}

std::uint64_t RandomStream::poisson(double mean) {
    if (mean <= 0.0) return 0;
    std::poisson_distribution<std::uint64_t> dist(mean);
    return dist(engine_);
}

std::uint64_t RandomStream::binomial(std::uint64_t trials, double p) {
    if (trials == 0 || p <= 0.0) return 0;
    if (p >= 1.0) return trials;
    std::binomial_distribution<std::uint64_t> dist(trials, p);
    return dist(engine_);
}

}  // namespace qkdsim
