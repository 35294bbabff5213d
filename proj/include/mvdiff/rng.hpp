#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace mvdiff {

// Counter-based deterministic RNG. Every stream is fully identified by
// (seed, stream); draws depend only on the draw index, so any consumer can
// reproduce a stream from scratch. This is what makes checkpoint-resume
// bit-identical: no RNG state needs to survive a restart beyond the counter.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : key_(mix64(seed ^ mix64(stream + 0x9e3779b97f4a7c15ull))) {}

    uint64_t next_u64() {
        uint64_t z = key_ + (++counter_) * 0x9e3779b97f4a7c15ull;
        return mix64(z);
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    // standard normal, Box-Muller with one cached value
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 1.0 - uniform();  // (0,1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    uint64_t counter() const { return counter_; }

    // stable uint64 hash for deriving sub-stream ids from strings
    static uint64_t hash_str(const std::string& s) {
        uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    static uint64_t mix64(uint64_t z) {  // splitmix64 finalizer
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace mvdiff
