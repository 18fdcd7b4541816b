#pragma once

// Deterministic random streams. All experiment randomness flows from one
// master seed through named sub-streams, so any pipeline stage can be
// replayed in isolation. Distributions are hand-rolled on top of
// std::mt19937_64 because the standard library's distribution objects are
// not bit-stable across implementations.

#include <cstdint>
#include <string_view>
#include <cmath>
#include <random>
#include <vector>

namespace clab {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

    // Named sub-stream derived from a master seed.
    static Rng stream(std::uint64_t master, std::string_view name) {
        return Rng(splitmix64(master ^ fnv1a64(name)));
    }

    // Child stream independent of this stream's draw position.
    Rng fork(std::uint64_t index) const {
        return Rng(splitmix64(seed_ ^ splitmix64(index + 0x51ed270b0a1ull)));
    }
    Rng fork(std::string_view name) const {
        return Rng(splitmix64(seed_ ^ fnv1a64(name)));
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    double normal(double mu = 0.0, double sigma = 1.0) {
        // Box-Muller; spend both uniforms, keep one value.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(2.0 * M_PI * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices drawn from [0, n).
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<std::size_t>(k));
        return idx;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

} // namespace clab
