#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace neglab {

// Deterministic random helpers. std::normal_distribution and
// std::uniform_int_distribution are not pinned by the standard, so every
// draw here is built directly on mt19937 output to keep golden files and
// seeded tests bit-stable across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(seed)) {}

    uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1) with 32 bits of resolution.
    double uniform() { return next_u32() * (1.0 / 4294967296.0); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // tiny relative to 2^32 in every call site, and determinism is what
    // matters, not the last ulp of uniformity.
    uint32_t below(uint32_t n) { return next_u32() % n; }

    // Box-Muller, one value per call (the spare is discarded to keep the
    // stream position independent of usage parity).
    float gaussian(float mean = 0.0f, float stddev = 1.0f) {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double z = r * std::cos(2.0 * M_PI * u2);
        return mean + stddev * static_cast<float>(z);
    }

    std::vector<float> gaussian_vector(size_t n, float mean, float stddev) {
        std::vector<float> out(n);
        for (auto& v : out) v = gaussian(mean, stddev);
        return out;
    }

    // Fisher-Yates shuffle of indices 0..n-1.
    std::vector<size_t> permutation(size_t n) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        for (size_t i = n; i > 1; --i) {
            const size_t j = below(static_cast<uint32_t>(i));
            std::swap(idx[i - 1], idx[j]);
        }
        return idx;
    }

  private:
    std::mt19937 engine_;
};

// FNV-1a 64-bit, used for config hashes and fixture request keys.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace neglab
