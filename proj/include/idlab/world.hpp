#pragma once

// Latent worlds: marginal distributions and positive-pair channels.

#include "idlab/common.hpp"
#include "idlab/rng.hpp"

#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace idlab {

enum class DistKind { gaussian, gennorm };

struct LatentDistribution {
    DistKind kind = DistKind::gaussian;
    double alpha = 2.0;  ///< gennorm shape; ignored for gaussian

    static LatentDistribution gaussian() { return {DistKind::gaussian, 2.0}; }
    static LatentDistribution gennorm(double alpha) { return {DistKind::gennorm, alpha}; }

    void validate() const {
        if (kind == DistKind::gennorm)
            require(alpha > 0.0 && std::isfinite(alpha), "gennorm alpha must be positive");
    }
    bool is_gaussian() const { return kind == DistKind::gaussian; }
};

/// Unit-variance generalized normal: density proportional to exp(-|z/s|^alpha)
/// with s chosen so that Var = 1.
class StandardGenNorm {
public:
    explicit StandardGenNorm(double alpha) : alpha_(alpha) {
        require(alpha > 0.0 && std::isfinite(alpha), "gennorm alpha must be positive");
        using boost::math::lgamma;
        scale_ = std::exp(0.5 * (lgamma(1.0 / alpha) - lgamma(3.0 / alpha)));
        log_norm_ = std::log(alpha / (2.0 * scale_)) - lgamma(1.0 / alpha);
    }

    double alpha() const { return alpha_; }
    double scale() const { return scale_; }

    double log_pdf(double z) const { return log_norm_ - std::pow(std::abs(z) / scale_, alpha_); }
    double pdf(double z) const { return std::exp(log_pdf(z)); }

    double cdf(double z) const {
        const double tail = 0.5 * boost::math::gamma_q(1.0 / alpha_, std::pow(std::abs(z) / scale_, alpha_));
        return z >= 0.0 ? 1.0 - tail : tail;
    }

    /// Population excess kurtosis Gamma(5/a)Gamma(1/a)/Gamma(3/a)^2 - 3.
    double excess_kurtosis() const {
        using boost::math::lgamma;
        const double a = alpha_;
        return std::exp(lgamma(5.0 / a) + lgamma(1.0 / a) - 2.0 * lgamma(3.0 / a)) - 3.0;
    }

    /// Normal score Phi^{-1}(F(z)), computed from the two-sided tail so that
    /// neither tail loses precision.
    double to_normal_score(double z) const {
        if (z == 0.0) return 0.0;
        const double two_tail = boost::math::gamma_q(1.0 / alpha_, std::pow(std::abs(z) / scale_, alpha_));
        if (two_tail <= 0.0) return std::copysign(kMaxScore, z);
        const double u = std::sqrt(2.0) * boost::math::erfc_inv(two_tail);
        return std::copysign(std::min(u, kMaxScore), z);
    }

    /// Inverse of to_normal_score: F^{-1}(Phi(u)).
    double from_normal_score(double u) const {
        if (u == 0.0) return 0.0;
        const double au = std::min(std::abs(u), kMaxScore);
        const double two_tail = std::erfc(au / std::sqrt(2.0));
        if (two_tail >= 1.0) return 0.0;
        const double x = boost::math::gamma_q_inv(1.0 / alpha_, two_tail);
        return std::copysign(scale_ * std::pow(x, 1.0 / alpha_), u);
    }

private:
    static constexpr double kMaxScore = 37.0;
    double alpha_;
    double scale_;
    double log_norm_;
};

struct LatentBatch {
    Matrix data;  ///< rows = samples, cols = latent dimensions
    std::uint64_t seed = 0;

    Eigen::Index dim() const { return data.cols(); }
    Eigen::Index count() const { return data.rows(); }

    void validate() const {
        require(data.rows() >= 1 && data.cols() >= 1, "latent batch must be non-empty");
        require(data.allFinite(), "latent batch contains non-finite entries");
    }
};

struct PairBatch {
    LatentBatch z;
    LatentBatch z_prime;
    Vector rho;
    std::optional<Matrix> x;
    std::optional<Matrix> x_prime;
};

inline double sample_one(const LatentDistribution& dist, const std::optional<StandardGenNorm>& gn, Generator& g) {
    if (dist.is_gaussian()) return g.normal();
    // |X| = s * G^(1/alpha), G ~ Gamma(1/alpha), random sign.
    const double a = gn->alpha();
    const double mag = gn->scale() * std::pow(g.gamma(1.0 / a), 1.0 / a);
    return (g() >> 63) ? -mag : mag;
}

/// i.i.d. unit-variance latents; deterministic in (count, dim, dist, seed).
inline LatentBatch sample_latents(Eigen::Index count, Eigen::Index dim, const LatentDistribution& dist,
                                  std::uint64_t seed) {
    require(count >= 1 && dim >= 1, "sample_latents: count and dim must be positive");
    dist.validate();
    std::optional<StandardGenNorm> gn;
    if (!dist.is_gaussian()) gn.emplace(dist.alpha);
    Generator g(seed, Stream::latents);
    LatentBatch out{Matrix(count, dim), seed};
    for (Eigen::Index i = 0; i < count; ++i)
        for (Eigen::Index j = 0; j < dim; ++j) out.data(i, j) = sample_one(dist, gn, g);
    return out;
}

inline void validate_rho(const Vector& rho, Eigen::Index dim) {
    require(rho.size() == dim, "rho length must equal latent dimension");
    for (Eigen::Index i = 0; i < rho.size(); ++i)
        require(rho(i) > 0.0 && rho(i) < 1.0, "rho components must lie strictly inside (0,1)");
}

inline Vector broadcast_rho(double rho, Eigen::Index dim) { return Vector::Constant(dim, rho); }

/// z' = rho * z + sqrt(1 - rho^2) * eta, per dimension, with explicit noise.
inline Matrix ou_transition(const Matrix& z, const Vector& rho, const Matrix& eta) {
    validate_rho(rho, z.cols());
    require(eta.rows() == z.rows() && eta.cols() == z.cols(), "noise shape must match latents");
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        const double r = rho(j);
        out.col(j) = r * z.col(j) + std::sqrt(1.0 - r * r) * eta.col(j);
    }
    return out;
}

/// Ornstein-Uhlenbeck positive pair; the standard Gaussian is stationary.
inline PairBatch ou_pair(const LatentBatch& z, const Vector& rho, std::uint64_t noise_seed) {
    z.validate();
    validate_rho(rho, z.dim());
    Generator g(noise_seed, Stream::noise);
    const Matrix eta = g.normal_matrix(z.count(), z.dim());
    PairBatch out;
    out.z = z;
    out.z_prime = LatentBatch{ou_transition(z.data, rho, eta), noise_seed};
    out.rho = rho;
    return out;
}

/// Resample-mixture channel: each coordinate is copied with probability
/// rho_target, otherwise redrawn from the marginal. Preserves any marginal
/// exactly; Corr(z_i, z'_i) = rho_target.
inline PairBatch additive_pair(const LatentBatch& z, const LatentDistribution& dist, double rho_target,
                               std::uint64_t noise_seed) {
    z.validate();
    dist.validate();
    require(rho_target > 0.0 && rho_target < 1.0, "rho_target must lie strictly inside (0,1)");
    std::optional<StandardGenNorm> gn;
    if (!dist.is_gaussian()) gn.emplace(dist.alpha);
    Generator coin(noise_seed, Stream::noise);
    Generator fresh(noise_seed, Stream::resample);
    PairBatch out;
    out.z = z;
    out.z_prime = LatentBatch{z.data, noise_seed};
    out.rho = broadcast_rho(rho_target, z.dim());
    for (Eigen::Index i = 0; i < z.count(); ++i)
        for (Eigen::Index j = 0; j < z.dim(); ++j) {
            const double draw = sample_one(dist, gn, fresh);  // consumed either way
            if (coin.uniform() >= rho_target) out.z_prime.data(i, j) = draw;
        }
    return out;
}

/// Gaussian-copula OU channel: map each coordinate to its normal score, apply
/// the OU transition there, map back. Preserves any continuous marginal
/// exactly and reduces to ou_pair for Gaussian latents.
inline PairBatch copula_pair(const LatentBatch& z, const LatentDistribution& dist, const Vector& rho,
                             std::uint64_t noise_seed) {
    z.validate();
    dist.validate();
    validate_rho(rho, z.dim());
    if (dist.is_gaussian()) return ou_pair(z, rho, noise_seed);
    const StandardGenNorm gn(dist.alpha);
    Matrix u(z.count(), z.dim());
    for (Eigen::Index i = 0; i < z.count(); ++i)
        for (Eigen::Index j = 0; j < z.dim(); ++j) u(i, j) = gn.to_normal_score(z.data(i, j));
    Generator g(noise_seed, Stream::noise);
    const Matrix u_prime = ou_transition(u, rho, g.normal_matrix(z.count(), z.dim()));
    PairBatch out;
    out.z = z;
    out.z_prime = LatentBatch{Matrix(z.count(), z.dim()), noise_seed};
    out.rho = rho;
    for (Eigen::Index i = 0; i < z.count(); ++i)
        for (Eigen::Index j = 0; j < z.dim(); ++j) out.z_prime.data(i, j) = gn.from_normal_score(u_prime(i, j));
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: columnar CSV (header z0..z{n-1}) and a binary dump with a
// 16-byte header {magic u32 "IDLB", dim u32, count u64}, then little-endian
// f64 values, row-major.

inline void write_csv(std::ostream& os, const Matrix& m, const std::string& prefix = "z") {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << prefix << j;
    os << '\n' << std::setprecision(17);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
        os << '\n';
    }
}

inline Matrix read_csv(std::istream& is) {
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "csv: missing header");
    const auto cols = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
    std::vector<double> values;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        Eigen::Index n = 0;
        while (std::getline(ss, cell, ',')) {
            values.push_back(std::stod(cell));
            ++n;
        }
        require(n == cols, "csv: ragged row");
    }
    const auto rows = static_cast<Eigen::Index>(values.size()) / cols;
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = values[static_cast<std::size_t>(i * cols + j)];
    return m;
}

inline constexpr std::uint32_t kBinaryMagic = 0x424C4449;  // "IDLB" little-endian

namespace detail {
inline void put_le(std::ostream& os, std::uint64_t v, int bytes) {
    for (int b = 0; b < bytes; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xFF));
}
inline std::uint64_t get_le(std::istream& is, int bytes) {
    std::uint64_t v = 0;
    for (int b = 0; b < bytes; ++b) {
        const int c = is.get();
        require(c != EOF, "binary dump truncated");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
    }
    return v;
}
}  // namespace detail

inline void write_binary(std::ostream& os, const Matrix& m) {
    detail::put_le(os, kBinaryMagic, 4);
    detail::put_le(os, static_cast<std::uint64_t>(m.cols()), 4);
    detail::put_le(os, static_cast<std::uint64_t>(m.rows()), 8);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            std::uint64_t bits;
            const double v = m(i, j);
            std::memcpy(&bits, &v, sizeof bits);
            detail::put_le(os, bits, 8);
        }
}

inline Matrix read_binary(std::istream& is) {
    require(detail::get_le(is, 4) == kBinaryMagic, "binary dump: bad magic");
    const auto dim = static_cast<Eigen::Index>(detail::get_le(is, 4));
    const auto count = static_cast<Eigen::Index>(detail::get_le(is, 8));
    Matrix m(count, dim);
    for (Eigen::Index i = 0; i < count; ++i)
        for (Eigen::Index j = 0; j < dim; ++j) {
            const std::uint64_t bits = detail::get_le(is, 8);
            double v;
            std::memcpy(&v, &bits, sizeof v);
            m(i, j) = v;
        }
    return m;
}

}  // namespace idlab
