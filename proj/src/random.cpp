#include "fomox/random.hpp"

#include <algorithm>
#include <cmath>

#include "fomox/errors.hpp"

namespace fomox {

namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

// SplitMix64 finalizer.
std::uint64_t fini(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

RandomSource::RandomSource(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(fini(seed ^ fini(stream + kGamma))) {}

RandomSource RandomSource::substream(std::uint64_t child) const {
    return RandomSource(seed_, fini(stream_ + kGamma * (child + 1)));
}

std::uint64_t RandomSource::next_u64() {
    return fini(fini(key_ + (++counter_) * kGamma));
}

double RandomSource::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomSource::uniform(double a, double b) {
    if (!(a <= b)) {
        throw DomainError("uniform: empty interval [" + std::to_string(a) + ", " +
                          std::to_string(b) + ")");
    }
    return a + (b - a) * uniform01();
}

double RandomSource::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    // Marsaglia polar: accept (u,v) in the open unit disk, excluding the origin.
    for (;;) {
        const double u = 2.0 * uniform01() - 1.0;
        const double v = 2.0 * uniform01() - 1.0;
        const double s = u * u + v * v;
        if (s >= 1.0 || s == 0.0) continue;
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        cached_normal_ = v * f;
        has_cached_normal_ = true;
        return u * f;
    }
}

double RandomSource::exponential(double scale) {
    if (!(scale > 0.0)) {
        throw DomainError("exponential: scale must be positive, got " + std::to_string(scale));
    }
    // 1 - u is in (0,1], so the log is finite.
    return -scale * std::log1p(-uniform01());
}

std::int64_t RandomSource::uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) {
        throw DomainError("uniform_int: empty range [" + std::to_string(lo) + ", " +
                          std::to_string(hi) + "]");
    }
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<std::int64_t>(next_u64()); // full 64-bit range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % range);
}

std::vector<std::size_t> RandomSource::subset(std::size_t k, std::size_t n) {
    if (k > n) {
        throw DomainError("subset: k = " + std::to_string(k) + " exceeds n = " + std::to_string(n));
    }
    // Partial Fisher-Yates over 0..n-1; first k slots are the sample.
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(n - i - 1)));
        std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> out(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace fomox
