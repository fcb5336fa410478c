#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace odt {

// Error taxonomy shared by the library, the C API and the CLI.
// UsageError -> exit/status 2, FormatError -> 3, NumericError -> 4.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr double kPi = 3.14159265358979323846;

// Wraps an angle to [-pi, pi).
template <class S>
inline S wrap_phase(S x) {
    double y = static_cast<double>(x);
    y -= 2.0 * kPi * std::floor((y + kPi) / (2.0 * kPi));
    if (y >= kPi) y -= 2.0 * kPi;  // guard against rounding at the seam
    return static_cast<S>(y);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a stream index.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ull));
}

// Deterministic RNG. xoshiro256** core seeded via splitmix64; all
// distributions are derived in-house so streams are reproducible
// independent of the C++ standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t x = seed;
        for (auto& s : state_) {
            x = splitmix64(x);
            s = x;
        }
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

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi_inclusive) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi_inclusive - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }

    // Truncated normal: resample until |z| <= 2, then scale.
    double trunc_normal(double stddev) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return z * stddev;
    }

    // Rayleigh with unit mean.
    double rayleigh_unit_mean() {
        const double sigma = std::sqrt(2.0 / kPi);
        double u = uniform();
        return sigma * std::sqrt(-2.0 * std::log(1.0 - u));
    }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4] = {};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

enum class LogLevel { kQuiet = 0, kWarn = 1, kInfo = 2 };

// Verbosity comes from ODT_LOG (quiet|warn|info); defaults to warnings only.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("ODT_LOG");
        if (!env) return LogLevel::kWarn;
        const std::string v(env);
        if (v == "quiet" || v == "0") return LogLevel::kQuiet;
        if (v == "info" || v == "2") return LogLevel::kInfo;
        return LogLevel::kWarn;
    }();
    return level;
}

inline void log_warn(const std::string& msg) {
    if (log_level() >= LogLevel::kWarn) std::fprintf(stderr, "warning: %s\n", msg.c_str());
}

inline void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::kInfo) std::fprintf(stderr, "info: %s\n", msg.c_str());
}

}  // namespace odt
