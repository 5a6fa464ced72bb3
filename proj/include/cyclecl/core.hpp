// Shared value types, error classes and the portable RNG used by every module.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cyclecl {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ProtocolError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct MissingArtifact : Error {
    using Error::Error;
};

enum class FrameLabel : std::uint8_t { periodic = 0, non_periodic = 1 };

inline bool is_anomalous(FrameLabel l) { return l == FrameLabel::non_periodic; }

// ---------------------------------------------------------------------------
// Dense row-major containers
// ---------------------------------------------------------------------------
template <typename T>
struct BasicMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    BasicMatrix() = default;
    BasicMatrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool empty() const { return rows == 0; }
    bool operator==(const BasicMatrix&) const = default;
};

using Matrix = BasicMatrix<double>;

// Three-axis tensor, typically (time, region, channel).
template <typename T>
struct Tensor3 {
    std::size_t d0 = 0;
    std::size_t d1 = 0;
    std::size_t d2 = 0;
    std::vector<T> data;

    Tensor3() = default;
    Tensor3(std::size_t a, std::size_t b, std::size_t c, T fill = T{})
        : d0(a), d1(b), d2(c), data(a * b * c, fill) {}

    T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data[(i * d1 + j) * d2 + k]; }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * d1 + j) * d2 + k];
    }

    // Contiguous (d1 x d2) slab at the first index.
    std::span<T> slab(std::size_t i) { return {data.data() + i * d1 * d2, d1 * d2}; }
    std::span<const T> slab(std::size_t i) const { return {data.data() + i * d1 * d2, d1 * d2}; }

    bool operator==(const Tensor3&) const = default;
};

// ---------------------------------------------------------------------------
// Small vector helpers
// ---------------------------------------------------------------------------
inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

template <typename Range>
bool all_finite(const Range& r) {
    for (const auto& v : r)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Random numbers
//
// std distributions are implementation-defined, so draws are derived directly
// from the engine's bits to keep datasets identical across toolchains.
// ---------------------------------------------------------------------------
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finaliser over a combined word
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::size_t index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::index: empty range");
        // Lemire's multiply-shift; bias is below 2^-64 * n
        return static_cast<std::size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }
    double normal(double mean, double sigma) { return mean + sigma * normal(); }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a, used for config hashes in run manifests.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace cyclecl
