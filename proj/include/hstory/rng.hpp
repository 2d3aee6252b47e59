#pragma once
// SplitMix64 pseudo-random generator. Fixed 64-bit algorithm with only
// exactly-rounded float operations downstream, so generated corpora and
// golden files are bit-identical between runs and platforms.

#include <cstdint>
#include <vector>

namespace hstory {

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

    // Unbiased integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) {
        std::uint64_t x, r;
        do {
            x = next();
            r = x % n;
        } while (x - r > std::uint64_t{0} - n);
        return r;
    }

    // Independent child stream; pure function of the current state and the
    // stream id (does not advance this generator).
    SplitMix64 fork(std::uint64_t stream) const {
        SplitMix64 g(state_ ^ ((stream + 0x9E3779B97F4A7C15ULL) * 0xBF58476D1CE4E5B9ULL));
        g.next();
        return g;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace hstory
