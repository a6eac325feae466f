#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace dilkit {

namespace detail {

// FNV-1a, used to derive per-module child seeds from (seed, label).
inline std::uint64_t fnv1a(std::uint64_t seed, const std::string& label) {
    std::uint64_t h = 14695981039346656037ull ^ seed;
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// splitmix64, used to whiten seeds into full generator state.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d4a9c9bf5a85aaull;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic RNG: xoshiro256** core with Box-Muller normals.
/// One generator per experiment; modules obtain independent streams via
/// child(label). All draws are reproducible bit-for-bit for a given seed,
/// independent of platform or standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64(sm);
    }

    /// Independent stream derived from this generator's seed and a label.
    /// Derivation uses the construction seed only, so children are stable
    /// no matter how many draws the parent has made.
    Rng child(const std::string& label) const {
        return Rng(detail::fnv1a(seed_, label));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller. The second variate of each pair is
    /// discarded, so there is no hidden cache to serialize.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::vector<double> normal_vec(std::size_t n, double mean = 0.0, double stddev = 1.0) {
        std::vector<double> out(n);
        for (auto& x : out) x = normal(mean, stddev);
        return out;
    }

    /// Fisher-Yates shuffle of [0, n).
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(below(static_cast<std::uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

    std::string serialize() const {
        std::ostringstream os;
        os << seed_;
        for (auto w : state_) os << ' ' << w;
        return os.str();
    }

    static Rng deserialize(const std::string& text) {
        std::istringstream is(text);
        Rng r(0);
        is >> r.seed_;
        for (auto& w : r.state_) is >> w;
        return r;
    }

    std::uint64_t seed() const { return seed_; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t seed_ = 0;
    std::uint64_t state_[4] = {};
};

}  // namespace dilkit
