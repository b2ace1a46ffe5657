#pragma once

// Shared plumbing: error taxonomy, counter-based RNG, content hashing.

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mareo {

// ---------------------------------------------------------------------------
// Errors.  Exit-code mapping (see tools/): ConfigError -> 2, NumericError -> 3.
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct StateError : std::runtime_error {
    explicit StateError(const std::string& m) : std::runtime_error("state error: " + m) {}
};

struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& m) : std::runtime_error("value error: " + m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error("format error: " + m) {}
};

struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& m) : std::runtime_error("generation error: " + m) {}
};

// ---------------------------------------------------------------------------
// Counter-based RNG.  A draw is a pure function of (seed, stream, counter), so
// per-sample generators can be created in any order and still agree bit-for-bit.
// Integer mixing only; no platform-dependent state.
// ---------------------------------------------------------------------------

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL))) {}

    std::uint64_t next_u64() { return mix64(key_ + counter_++ * 0x9e3779b97f4a7c15ULL); }

    // [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        if (hi < lo) throw ValueError("uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller; u1 in (0,1] so log() is finite.
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable stream ids from names (parameter init, per-task streams).
inline std::uint64_t stream_id(const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Content hashing for dataset/config manifests (FNV-1a 64).
// ---------------------------------------------------------------------------

class ContentHash {
  public:
    void update(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return h_; }
    std::string hex() const {
        static const char* d = "0123456789abcdef";
        std::string out(16, '0');
        std::uint64_t v = h_;
        for (int i = 15; i >= 0; --i) {
            out[static_cast<std::size_t>(i)] = d[v & 0xf];
            v >>= 4;
        }
        return out;
    }

  private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace mareo
