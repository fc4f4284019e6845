#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace s6la {

// 64-bit FNV-1a, used for seed derivation and config hashing.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 1469598103934665603ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Seeded random stream. mt19937_64 output is pinned by the standard, and the
// uniform/normal mappings are done by hand because std::*_distribution is
// implementation-defined; runs stay reproducible across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // integer in [0, n), n > 0
    uint64_t below(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Independent stream per (base seed, purpose tag).
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    uint64_t h = fnv1a64(tag);
    h ^= base + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h == 0 ? 1 : h;
}

}  // namespace s6la
