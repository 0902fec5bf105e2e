// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvad {

// Error taxonomy. The CLI maps each category onto an exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

/// Dense H x W x C image, channel-interleaved (HWC), row-major.
template <typename T>
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<T> data;

    Image() = default;
    Image(int h, int w, int c, T fill = T(0))
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    T& at(int y, int x, int c) { return data[index(y, x, c)]; }
    const T& at(int y, int x, int c) const { return data[index(y, x, c)]; }

    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    template <typename U>
    Image<U> cast() const {
        Image<U> out(height, width, channels);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool operator==(const Image&) const = default;
};

using Frame = Image<float>;

inline std::string shape_string(int h, int w, int c) {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

template <typename T>
std::string shape_string(const Image<T>& im) {
    return shape_string(im.height, im.width, im.channels);
}

template <typename A, typename B>
void require_same_shape(const Image<A>& a, const Image<B>& b, const char* what) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.height, a.width, a.channels) +
                         " vs " + shape_string(b.height, b.width, b.channels));
}

// ---------------------------------------------------------------------------
// Portable randomness: hand-written distributions over std::mt19937_64 and
// SplitMix64.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Stream seed for (base, tag, a, b). Keys are distinct for a < 2^32, b < 2^24.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint32_t tag, std::uint64_t a, std::uint64_t b = 0) {
    const std::uint64_t key = (static_cast<std::uint64_t>(tag) << 56) ^ (a << 24) ^ b;
    return splitmix64(splitmix64(base) ^ key);
}

/// Uniform double in [0, 1) with 53 random bits.
template <typename Rng>
double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Unbiased uniform integer in [0, n) via rejection.
template <typename Rng>
std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return r % n;
}

/// Standard normal via Box-Muller (one value per call).
template <typename Rng>
double standard_normal(Rng& rng) {
    double u1;
    do {
        u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Normal(0, std) resampled until it falls inside +-2 std.
template <typename Rng>
double truncated_normal(Rng& rng, double std) {
    double z;
    do {
        z = standard_normal(rng);
    } while (std::abs(z) > 2.0);
    return z * std;
}

/// Fisher-Yates with the portable index draw.
template <typename It, typename Rng>
void portable_shuffle(It first, It last, Rng& rng) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
        const auto j = uniform_index(rng, i);
        std::swap(first[i - 1], first[j]);
    }
}

}  // namespace mvad
