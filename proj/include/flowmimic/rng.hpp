#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace flowmimic {

// Deterministic RNG with hand-rolled distributions. The standard library
// distributions are implementation-defined, which breaks bit-for-bit
// reproducibility guarantees, so everything here is pinned to splitmix64.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 significant bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Multiply-shift keeps the draw unbiased enough for span << 2^64
        // while staying branch-free and reproducible.
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * span;
        return lo + static_cast<int64_t>(m >> 64);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream without disturbing this one.
    Rng fork(uint64_t stream) const {
        uint64_t z = state_ ^ (0x9e3779b97f4a7c15ull * (stream + 0x632be59bd9b4e019ull));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        return Rng(z ^ (z >> 27));
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace flowmimic
