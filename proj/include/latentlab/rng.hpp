#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "latentlab/tensor.hpp"

namespace latentlab {

// Seeded random source. All randomness in the library flows through this
// class; the uniform/normal constructions are written out explicitly (not
// delegated to std distributions) so byte-identical streams are a contract,
// not an accident of the standard library build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), rejection-sampled so every value is exactly equally likely.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return x % n;
    }

    int index(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so the log is finite.
        const double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derive an independent stream from this generator's seed and a key.
    // Pure function of (seed, key): callers can fan out per-item streams
    // whose contents do not depend on visitation order or thread count.
    Rng child(std::uint64_t key) const { return Rng(mix(seed_, key)); }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <class Real>
inline void fill_normal(Tensor<Real>& t, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    for (auto& v : t.data) v = static_cast<Real>(mean + stddev * rng.normal());
}

template <class Real>
inline Tensor<Real> randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor<Real> t(std::move(shape));
    fill_normal(t, rng, stddev);
    return t;
}

}  // namespace latentlab
