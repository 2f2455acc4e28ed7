#pragma once

#include <cmath>
#include <cstdint>

#include "errors.hpp"

namespace oneclip {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

// Counter-based random stream. Every draw is a pure function of
// (seed, stream, counter), so a stream is serialized by its counter alone and
// replays identically on any platform. Normal draws consume exactly two
// counters (Box-Muller without caching).
class RandomSource {
public:
    RandomSource(std::uint64_t seed, std::uint64_t stream)
        : seed_(seed), stream_(stream), base_(stream_base(seed, stream)) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

    std::uint64_t next_u64() {
        return detail::splitmix64(base_ + counter_++ * 0x9e3779b97f4a7c15ULL);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1].
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform over {0, ..., n-1}. Modulo bias is below 2^-50 for the small
    // ranges used here.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ArgumentError("uniform_int: n must be positive");
        return next_u64() % n;
    }

    // Standard normal via Box-Muller; consumes two counters per draw.
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    static std::uint64_t stream_base(std::uint64_t seed, std::uint64_t stream) {
        return detail::splitmix64(seed ^ detail::splitmix64(stream + 0x632be59bd9b4e019ULL));
    }

    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t base_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace oneclip
