#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctf/error.hpp"

namespace ctf {

namespace detail {

// splitmix64 finalizer; full-avalanche 64-bit mix.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

// Counter-based generator: each draw hashes (key, counter). Splitting derives
// an independent key from (key, label), so parallel streams never share state.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(detail::mix64(seed ^ 0x5851f42d4c957f2dULL)) {}

    Rng split(uint64_t label) const {
        Rng child(0);
        child.key_ = detail::mix64(key_ ^ detail::mix64(label + 0x632be59bd9b4e019ULL));
        child.counter_ = 0;
        return child;
    }

    uint64_t next_u64() { return detail::mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [0, n)
    uint64_t below(uint64_t n) {
        check(n > 0, ErrKind::param, "Rng::below requires n > 0");
        // rejection sampling to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (no cached spare: keeps draws counter-pure)
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            const uint64_t j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    uint64_t state_key() const { return key_; }
    uint64_t state_counter() const { return counter_; }
    void restore(uint64_t key, uint64_t counter) {
        key_ = key;
        counter_ = counter;
    }

private:
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace ctf
