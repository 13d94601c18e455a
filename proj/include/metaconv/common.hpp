#pragma once

// Shared plumbing: error types, seeded random streams, content hashing and
// numeric guards. Every random draw in the library goes through Rng so that
// a (config, seed) pair replays bit-for-bit.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaconv {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad or infeasible configuration (oversize batch, 2k > samples, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed or inconsistent data (unknown speaker, duplicate edge, ...).
class DataError : public Error {
public:
    using Error::Error;
};

// Non-finite value met where a finite one is required.
class NumericError : public Error {
public:
    using Error::Error;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stable sub-stream derivation: hash the base seed with a labelled path so
// independent consumers (episodes, decoders, samplers) never share a stream.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> parts) {
    uint64_t h = splitmix64(base);
    for (uint64_t p : parts) h = splitmix64(h ^ (p + 0x9e3779b97f4a7c15ULL));
    return h;
}

// Deterministic counter-based generator (xoshiro-free: iterated splitmix64).
// Avoids std::uniform_*_distribution, whose output is implementation-defined,
// so golden values in tests stay valid across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xa02e9b8c61f4d7e5ULL)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // Uniform in [0, n). Multiply-shift; bias is O(n / 2^64).
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw ConfigError("Rng::uniform_index: empty range");
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform_real() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller, pair-cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform_real();
        double u2 = uniform_real();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n), order randomized (partial Fisher-Yates).
    std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k) {
        if (k > n) throw ConfigError("Rng::sample_distinct: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + uniform_index(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline uint64_t fnv1a64(const void* data, std::size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

inline void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace metaconv
