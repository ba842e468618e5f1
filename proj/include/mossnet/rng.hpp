#pragma once
#include <cmath>
#include <cstdint>
#include <string_view>

namespace mossnet {

// FNV-1a, used for rng stream derivation and config hashing
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Counter-based generator: output i depends only on (seed, i), so streams are
// reproducible bit-for-bit across platforms and independent of call grouping.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() { return mix(seed_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // uniform in [0, 1), 53-bit mantissa
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; draws a fresh pair every call so the stream stays counter-pure
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 <= 0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.28318530717958647692 * u2);
    }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // independent stream derived from a label; stable under reordering of derivations
    Rng derive(std::string_view label) const { return Rng(mix(seed_ ^ fnv1a(label))); }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

} // namespace mossnet
