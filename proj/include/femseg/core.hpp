#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace femseg {

/// Shapes or extents that do not fit an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed on-disk artifacts (volumes, checkpoints, manifests, configs).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN or infinity where finite values are required.
class NonFiniteError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline constexpr std::string_view kVersion = "femseg 1.0.0";

// ---------------------------------------------------------------------------
// Logging. A process-wide sink that defaults to stderr at info level.

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

struct Logger {
    LogLevel level = LogLevel::info;
    std::function<void(LogLevel, const std::string&)> sink;
};

inline Logger& logger() {
    static Logger instance;
    return instance;
}

inline void log(LogLevel lvl, const std::string& msg) {
    auto& lg = logger();
    if (lvl < lg.level) return;
    static std::mutex m;
    const std::lock_guard lock(m);
    if (lg.sink) {
        lg.sink(lvl, msg);
        return;
    }
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

template <class... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic random numbers. Distributions are written out here so that
// seeded streams do not depend on the standard library's distribution code.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Mixes a master seed with a stream tag into an independent child seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return splitmix64(splitmix64(seed) ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
}

/// xoshiro256** seeded through splitmix64.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t s = seed;
        for (auto& w : state_) {
            s += 0x9E3779B97F4A7C15ULL;
            w = splitmix64(s);
        }
    }

    std::uint64_t next() {
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

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n <= 1) return 0;
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t r = next();
        while (r >= limit) r = next();
        return static_cast<std::size_t>(r % bound);
    }

    /// Standard normal via Box-Muller (one draw per call, the pair's twin is cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <class Container>
void shuffle(Container& c, Rng& rng) {
    for (std::size_t i = c.size(); i > 1; --i) {
        const std::size_t j = rng.index(i);
        using std::swap;
        swap(c[i - 1], c[j]);
    }
}

}  // namespace femseg
