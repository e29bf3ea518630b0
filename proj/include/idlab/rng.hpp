#pragma once

// Counter-based random numbers.
//
// A Generator is a (key, counter) pair. Draw i of a stream is
//     mix64(key + i * 0x9E3779B97F4A7C15)
// with mix64 the SplitMix64 finalizer, i.e. the SplitMix64 sequence evaluated
// at an explicit counter. The key is derived from (seed, stream id) so every
// purpose gets its own independent sequence and a draw never depends on how
// many values another purpose consumed. Normal and gamma variates are
// generated here, not through <random> distributions, whose algorithms differ
// between standard libraries.

#include "idlab/common.hpp"

#include <cmath>
#include <cstdint>

namespace idlab {

/// Documented stream ids; one per purpose.
enum class Stream : std::uint64_t {
    latents = 1,
    noise = 2,
    mixing_params = 3,
    slices = 4,
    init = 5,
    eval = 6,
    bootstrap = 7,
    planning = 8,
    resample = 9,
};

constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

class Generator {
public:
    using result_type = std::uint64_t;
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

    Generator(std::uint64_t seed, Stream stream)
        : Generator(seed, static_cast<std::uint64_t>(stream)) {}
    Generator(std::uint64_t seed, std::uint64_t stream)
        : key_(mix64(mix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL + 0x632BE59BD9B4E019ULL))) {}

    /// Child stream keyed by an index (step, layer, sample range, ...).
    Generator substream(std::uint64_t index) const {
        Generator g = *this;
        g.key_ = mix64(key_ ^ mix64(index + 0xA0761D6478BD642FULL));
        g.counter_ = 0;
        g.has_spare_ = false;
        return g;
    }

    static constexpr std::uint64_t min() { return 0; }
    static constexpr std::uint64_t max() { return ~std::uint64_t{0}; }

    std::uint64_t operator()() noexcept { return mix64(key_ + (counter_++) * kGamma); }

    std::uint64_t counter() const noexcept { return counter_; }

    /// Uniform on the open interval (0, 1).
    double uniform() noexcept {
        return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal by Box-Muller; the second value of each pair is kept.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang; shape < 1 uses the U^(1/a) boost.
    double gamma(double shape) {
        require(shape > 0.0, "gamma shape must be positive");
        if (shape < 1.0) {
            const double u = uniform();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        require(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is < 2^-64 * n, negligible here.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
    }

    Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
        return m;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// A seed derived from (seed, stream, index); distinct purposes never collide.
inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t index) {
    return Generator(seed, stream).substream(index)();
}

}  // namespace idlab
