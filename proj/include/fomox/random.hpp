#pragma once

#include <cstdint>
#include <vector>

namespace fomox {

// Counter-based splittable random source.
//
// The i-th raw 64-bit output of stream s under seed k is
//
//     fini(fini(key + i*GAMMA))   with   key = fini(k ^ fini(s + GAMMA)),
//
// where fini is the SplitMix64 finalizer and GAMMA = 0x9E3779B97F4A7C15.
// The algorithm is fixed: equal (seed, stream) pairs reproduce the same
// sequence bitwise across runs, and distinct streams are statistically
// independent. Normal variates use the Marsaglia polar method (log/sqrt
// only), exponentials the inverse CDF.
class RandomSource {
public:
    RandomSource(std::uint64_t seed, std::uint64_t stream);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

    // Derived stream: same seed, child stream id mixed into this stream id.
    // substream(a) != substream(b) for a != b with overwhelming probability.
    RandomSource substream(std::uint64_t child) const;

    std::uint64_t next_u64();

    // Uniform on [0,1) with 53 random bits.
    double uniform01();

    // Uniform on [a,b); the degenerate case a == b returns a (and still
    // consumes one draw). Throws DomainError if a > b.
    double uniform(double a, double b);

    // Standard normal via Marsaglia polar; second variate of a pair is cached.
    double normal();

    // Exponential with mean `scale` via inverse CDF. Throws DomainError if scale <= 0.
    double exponential(double scale);

    // Uniform integer on [lo, hi] inclusive, unbiased (rejection).
    // Throws DomainError if lo > hi.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

    // k distinct indices drawn uniformly from {0,...,n-1}, returned ascending.
    // Throws DomainError if k > n.
    std::vector<std::size_t> subset(std::size_t k, std::size_t n);

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

} // namespace fomox
