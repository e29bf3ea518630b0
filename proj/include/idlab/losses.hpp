#pragma once

// Alignment loss and the three Gaussianity-enforcing objectives.
//
// Each loss attaches to a Tape as one custom node whose adjoint is derived by
// hand; the *_value overloads evaluate without recording gradients.

#include "idlab/common.hpp"
#include "idlab/quadrature.hpp"
#include "idlab/rng.hpp"
#include "idlab/tape.hpp"

#include <string>

namespace idlab {

enum class LossKind { sigreg, vicreg, infonce };

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::sigreg: return "sigreg";
        case LossKind::vicreg: return "vicreg";
        case LossKind::infonce: return "infonce";
    }
    return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "sigreg") return LossKind::sigreg;
    if (s == "vicreg") return LossKind::vicreg;
    if (s == "infonce") return LossKind::infonce;
    throw ParameterError("unknown loss kind: " + s);
}

struct VicWeights {
    double variance = 1.0;
    double covariance = 1.0;
};

struct LossConfig {
    LossKind kind = LossKind::sigreg;
    double lambda = 1e-3;
    int n_slices = 16;
    double sigma = 1.0;
    VicWeights vic_weights;
    double vic_eps = 0.0;  ///< std = sqrt(var + eps) in the variance hinge
    std::uint64_t slice_seed = 0;
    /// Multiplier on the SIGReg statistic. The statistic is B times the squared
    /// characteristic-function gap; 32 keeps lambda = 1e-3 out of the collapse
    /// regime at batch 256 (a plain B-scaling makes collapse the cheaper optimum).
    double sigreg_gain = 32.0;

    void validate() const {
        require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0,1]");
        require(n_slices >= 1, "n_slices must be >= 1");
        require(sigma > 0.0, "sigma must be positive");
        require(vic_eps >= 0.0, "vic_eps must be non-negative");
        require(sigreg_gain > 0.0, "sigreg_gain must be positive");
    }
};

namespace detail {
inline Matrix scalar_matrix(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
}
inline void check_pair(const Tape& t, Var y, Var yp, const char* who) {
    require(t.value(y).rows() == t.value(yp).rows() && t.value(y).cols() == t.value(yp).cols(),
            std::string(who) + ": views must have matching shapes");
}
}  // namespace detail

// ---- alignment --------------------------------------------------------------

/// Mean over rows of |y_i - y'_i|^2.
inline Var alignment_loss(Tape& t, Var y, Var yp) {
    detail::check_pair(t, y, yp, "alignment_loss");
    const Matrix diff = t.value(y) - t.value(yp);
    const double b = static_cast<double>(diff.rows());
    return t.custom(detail::scalar_matrix(diff.squaredNorm() / b), {y, yp},
                    [y, yp, diff, b](Tape& tp, const Matrix& g) {
                        const Matrix gy = (2.0 * g(0, 0) / b) * diff;
                        tp.accumulate(y, gy);
                        tp.accumulate(yp, -gy);
                    });
}

// ---- SIGReg -----------------------------------------------------------------

/// Epps-Pulley statistic on random 1-D projections. For each unit direction a,
/// with p = y a, the statistic is
///     B * sum_k w_k |phi_emp(t_k) - exp(-t_k^2/2)|^2
/// over a 17-point Gauss-Hermite rule (weights sum to 1), averaged over
/// slices. Directions come from `slices`; pass a fresh substream per step.
inline constexpr int kSigregNodes = 17;

inline const Quadrature& sigreg_quadrature() {
    static const Quadrature q = gauss_hermite(kSigregNodes);
    return q;
}

/// Expected statistic for i.i.d. standard-normal rows: sum_k w_k (1 - e^{-t_k^2}).
inline double sigreg_null_mean() {
    const Quadrature& q = sigreg_quadrature();
    return (q.weights.array() * (1.0 - (-q.nodes.array().square()).exp())).sum();
}

inline Matrix random_directions(Eigen::Index dim, int n_slices, Generator& slices) {
    Matrix a = slices.normal_matrix(dim, n_slices);
    for (Eigen::Index j = 0; j < a.cols(); ++j) a.col(j).normalize();
    return a;
}

/// gain * B * mean over slices of sum_k w_k |phi_emp(t_k) - e^{-t_k^2/2}|^2,
/// and its gradient w.r.t. y, for fixed directions.
inline std::pair<double, Matrix> sigreg_with_grad(const Matrix& y, const Matrix& directions, double gain = 1.0) {
    const Eigen::Index b = y.rows();
    require(b >= 8, "sigreg: batch must have at least 8 rows");
    require(directions.rows() == y.cols(), "sigreg: direction dimension mismatch");
    const auto m = static_cast<double>(directions.cols());
    const Quadrature& q = sigreg_quadrature();
    const Matrix p = y * directions;  // B x M
    Eigen::ArrayXXd dp = Eigen::ArrayXXd::Zero(p.rows(), p.cols());
    Eigen::ArrayXd stat = Eigen::ArrayXd::Zero(p.cols());
    // The rule is symmetric and the integrand even in t: fold +-t pairs, skip t = 0.
    for (Eigen::Index k = (q.nodes.size() + 1) / 2; k < q.nodes.size(); ++k) {
        const double tk = q.nodes(k);
        const double wk = 2.0 * q.weights(k);
        const double target = std::exp(-0.5 * tk * tk);
        const Eigen::ArrayXXd arg = tk * p.array();
        const Eigen::ArrayXXd cs = arg.cos();
        const Eigen::ArrayXXd sn = arg.sin();
        const Eigen::ArrayXd c = cs.colwise().mean().transpose() - target;
        const Eigen::ArrayXd s = sn.colwise().mean().transpose();
        stat += wk * static_cast<double>(b) * (c.square() + s.square());
        dp += 2.0 * wk * tk * (cs.rowwise() * s.transpose() - sn.rowwise() * c.transpose());
    }
    return {gain * stat.mean(), (gain / m) * (dp.matrix() * directions.transpose())};
}

inline Var sigreg_loss(Tape& t, Var y, const Matrix& directions, double gain = 1.0) {
    auto [value, grad] = sigreg_with_grad(t.value(y), directions, gain);
    return t.custom(detail::scalar_matrix(value), {y},
                    [y, grad = std::move(grad)](Tape& tp, const Matrix& g) { tp.accumulate(y, g(0, 0) * grad); });
}

inline Var sigreg_loss(Tape& t, Var y, int n_slices, Generator slices, double gain = 1.0) {
    require(n_slices >= 1, "sigreg: n_slices must be >= 1");
    return sigreg_loss(t, y, random_directions(t.value(y).cols(), n_slices, slices), gain);
}

// ---- VICReg -----------------------------------------------------------------

/// Mean over dims of max(0, 1 - sqrt(var_d + eps)), population variance.
inline Var vicreg_variance_term(Tape& t, Var y, double eps = 0.0) {
    const Matrix& v = t.value(y);
    const auto b = static_cast<double>(v.rows());
    const auto n = static_cast<double>(v.cols());
    const Matrix c = v.rowwise() - v.colwise().mean();
    const RowVector sd = ((c.colwise().squaredNorm() / b).array() + eps).sqrt().matrix();
    double val = 0.0;
    RowVector coef = RowVector::Zero(v.cols());
    for (Eigen::Index d = 0; d < v.cols(); ++d) {
        if (sd(d) < 1.0) {
            val += (1.0 - sd(d)) / n;
            // d sd / d y_id = c_id / (B sd); the subgradient at sd = 0 is taken as 0.
            if (sd(d) > 0.0) coef(d) = -1.0 / (n * b * sd(d));
        }
    }
    return t.custom(detail::scalar_matrix(val), {y}, [y, c, coef](Tape& tp, const Matrix& g) {
        tp.accumulate(y, g(0, 0) * (c.array().rowwise() * coef.array()).matrix());
    });
}

/// Sum of squared off-diagonal entries of the batch covariance, divided by n.
inline Var vicreg_covariance_term(Tape& t, Var y) {
    const Matrix& v = t.value(y);
    const auto b = static_cast<double>(v.rows());
    const auto n = static_cast<double>(v.cols());
    const Matrix c = v.rowwise() - v.colwise().mean();
    Matrix off = (c.transpose() * c) / b;
    off.diagonal().setZero();
    const double val = off.squaredNorm() / n;
    Matrix grad = (4.0 / (n * b)) * (c * off);
    return t.custom(detail::scalar_matrix(val), {y},
                    [y, grad = std::move(grad)](Tape& tp, const Matrix& g) { tp.accumulate(y, g(0, 0) * grad); });
}

struct VicregTerms {
    Var invariance;
    Var variance;    ///< averaged over the two views
    Var covariance;  ///< averaged over the two views
    Var regularizer; ///< weighted variance + covariance
};

inline VicregTerms vicreg_losses(Tape& t, Var y, Var yp, const VicWeights& w, double eps = 0.0) {
    detail::check_pair(t, y, yp, "vicreg");
    VicregTerms out;
    out.invariance = alignment_loss(t, y, yp);
    out.variance = t.scale(t.add(vicreg_variance_term(t, y, eps), vicreg_variance_term(t, yp, eps)), 0.5);
    out.covariance = t.scale(t.add(vicreg_covariance_term(t, y), vicreg_covariance_term(t, yp)), 0.5);
    out.regularizer = t.add(t.scale(out.variance, w.variance), t.scale(out.covariance, w.covariance));
    return out;
}

// ---- InfoNCE ----------------------------------------------------------------

/// Row-softmax cross-entropy over similarities s_ij = -|y_i - y'_j|^2 / sigma^2
/// with the diagonal as target, computed stably via log-sum-exp.
inline Var infonce_loss(Tape& t, Var y, Var yp, double sigma) {
    detail::check_pair(t, y, yp, "infonce");
    require(sigma > 0.0, "infonce: sigma must be positive");
    const Matrix& a = t.value(y);
    const Matrix& p = t.value(yp);
    const Eigen::Index b = a.rows();
    const double inv_s2 = 1.0 / (sigma * sigma);
    Matrix s = 2.0 * a * p.transpose();
    s.colwise() -= a.rowwise().squaredNorm();
    s.rowwise() -= p.rowwise().squaredNorm().transpose();
    s *= inv_s2;
    double loss = 0.0;
    Matrix gs(b, b);  // dL/ds
    for (Eigen::Index i = 0; i < b; ++i) {
        const double mx = s.row(i).maxCoeff();
        const Eigen::ArrayXd e = (s.row(i).array() - mx).exp().transpose();
        const double z = e.sum();
        loss += (mx + std::log(z)) - s(i, i);
        gs.row(i) = (e / z).transpose();
        gs(i, i) -= 1.0;
    }
    loss /= static_cast<double>(b);
    gs /= static_cast<double>(b);
    // s_ij = -(|a_i|^2 - 2 a_i.p_j + |p_j|^2) / sigma^2
    Matrix ga = 2.0 * inv_s2 * (gs * p - (gs.rowwise().sum().asDiagonal() * a));
    Matrix gp = 2.0 * inv_s2 * (gs.transpose() * a - (gs.colwise().sum().transpose().asDiagonal() * p));
    return t.custom(detail::scalar_matrix(loss), {y, yp},
                    [y, yp, ga = std::move(ga), gp = std::move(gp)](Tape& tp, const Matrix& g) {
                        tp.accumulate(y, g(0, 0) * ga);
                        tp.accumulate(yp, g(0, 0) * gp);
                    });
}

// ---- combiner ---------------------------------------------------------------

struct LossParts {
    Var total;
    Var align;
    Var reg;
};

/// sigreg / vicreg: total = lambda * reg + (1 - lambda) * align.
/// infonce: total = the InfoNCE term; lambda is ignored.
/// SIGReg is averaged over both views with shared directions.
inline LossParts total_loss(Tape& t, const LossConfig& cfg, Var y, Var yp, Generator slices) {
    cfg.validate();
    LossParts out;
    out.align = alignment_loss(t, y, yp);
    switch (cfg.kind) {
        case LossKind::sigreg: {
            const Matrix dirs = random_directions(t.value(y).cols(), cfg.n_slices, slices);
            out.reg = t.scale(t.add(sigreg_loss(t, y, dirs, cfg.sigreg_gain), sigreg_loss(t, yp, dirs, cfg.sigreg_gain)), 0.5);
            break;
        }
        case LossKind::vicreg:
            out.reg = vicreg_losses(t, y, yp, cfg.vic_weights, cfg.vic_eps).regularizer;
            break;
        case LossKind::infonce:
            out.reg = infonce_loss(t, y, yp, cfg.sigma);
            out.total = out.reg;
            return out;
    }
    out.total = t.add(t.scale(out.reg, cfg.lambda), t.scale(out.align, 1.0 - cfg.lambda));
    return out;
}

/// Combination rule alone, for reporting.
inline double combine(const LossConfig& cfg, double align, double reg) {
    return cfg.kind == LossKind::infonce ? reg : cfg.lambda * reg + (1.0 - cfg.lambda) * align;
}

}  // namespace idlab
