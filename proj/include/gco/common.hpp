#ifndef GCO_COMMON_HPP
#define GCO_COMMON_HPP

#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gco {

// Runtime failure with a message meant for the user (exit code 2 territory).
struct RuntimeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid input / config (exit code 1 territory).
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// FNV-1a 64-bit. Used for checkpoint payload hashes and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t hash_u64(uint64_t h, uint64_t x) {
    return fnv1a64(&x, sizeof(x), h);
}

// Stable sub-seed derivation: same (root, a, b, c) always gives the same stream.
inline uint64_t derive_seed(uint64_t root, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    h = hash_u64(h, root);
    h = hash_u64(h, a);
    h = hash_u64(h, b);
    h = hash_u64(h, c);
    return h;
}

// Deterministic RNG. mt19937_64 gives the same sequence on every platform;
// the distributions are hand-rolled because the std ones are not portable.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double u01() { return (next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ValidationError("Rng::uniform_int: n must be positive");
        uint64_t bound = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return static_cast<int64_t>(x % bound);
    }

    // standard normal, Box-Muller
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = u01(); } while (u1 <= 0.0);
        u2 = u01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// GCO_NUM_THREADS caps OpenMP worker parallelism; unset means library default.
void init_threads();
int max_threads();

} // namespace gco

#endif
