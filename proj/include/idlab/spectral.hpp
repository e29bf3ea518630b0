#pragma once

// Hermite basis, Mehler contraction, Hermite-weight estimation, a
// Sturm-Liouville eigen-solver, and Jacobian-based energy checks.

#include "idlab/common.hpp"
#include "idlab/linalg.hpp"
#include "idlab/rng.hpp"
#include "idlab/tape.hpp"
#include "idlab/world.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace idlab {

// ---- Hermite polynomials -------------------------------------------------------

/// Probabilists' Hermite polynomial He_k by the three-term recurrence.
inline double hermite(int k, double x) {
    require(k >= 0, "hermite: degree must be non-negative");
    if (k == 0) return 1.0;
    double prev = 1.0, cur = x;
    for (int j = 1; j < k; ++j) {
        const double next = x * cur - j * prev;
        prev = cur;
        cur = next;
    }
    return cur;
}

/// He_k / sqrt(k!), orthonormal under the standard Gaussian.
inline double hermite_normalized(int k, double x) {
    return hermite(k, x) * std::exp(-0.5 * std::lgamma(static_cast<double>(k) + 1.0));
}

/// Normalized Hermite values of degrees 0..max_degree for every entry of x.
/// Result [d] is a matrix shaped like x.
inline std::vector<Matrix> hermite_table(const Matrix& x, int max_degree) {
    std::vector<Matrix> out;
    out.push_back(Matrix::Ones(x.rows(), x.cols()));
    if (max_degree >= 1) out.push_back(x);
    for (int k = 1; k < max_degree; ++k)
        out.push_back(((x.array() * out[k].array() - std::sqrt(static_cast<double>(k)) * out[k - 1].array()) /
                       std::sqrt(static_cast<double>(k + 1)))
                          .matrix());
    return out;
}

struct MonteCarloEstimate {
    double estimate = 0.0;
    double standard_error = 0.0;
};

inline MonteCarloEstimate mean_and_se(const Vector& v) {
    const auto n = static_cast<double>(v.size());
    require(v.size() >= 2, "need at least two samples");
    const double m = v.mean();
    const double var = (v.array() - m).square().sum() / (n - 1.0);
    return {m, std::sqrt(var / n)};
}

/// Monte-Carlo estimate of E[h_k(z') h_j(z)] over OU pairs, with
/// h normalized Hermite; the exact value is rho^k when k = j, else 0.
inline MonteCarloEstimate mehler_check(double rho, int k, int j, Eigen::Index samples, std::uint64_t seed) {
    require(rho > 0.0 && rho < 1.0, "mehler_check: rho must lie in (0,1)");
    require(k >= 0 && j >= 0, "mehler_check: degrees must be non-negative");
    const LatentBatch z = sample_latents(samples, 1, LatentDistribution::gaussian(), seed);
    const PairBatch p = ou_pair(z, broadcast_rho(rho, 1), seed);
    const int d = std::max(k, j);
    const auto hz = hermite_table(p.z.data, d);
    const auto hzp = hermite_table(p.z_prime.data, d);
    return mean_and_se(hzp[k].col(0).cwiseProduct(hz[j].col(0)));
}

// ---- correlation decomposition --------------------------------------------------

/// Variance fractions w_1..w_D of a unit-variance function by Hermite degree.
struct HermiteWeights {
    Vector weights;  ///< weights(d - 1) = w_d
    int max_degree = 0;

    double sum() const { return weights.sum(); }
};

/// sum_d w_d rho^d.
inline double correlation_from_weights(const HermiteWeights& w, double rho) {
    double out = 0.0, r = 1.0;
    for (Eigen::Index d = 0; d < w.weights.size(); ++d) {
        r *= rho;
        out += w.weights(d) * r;
    }
    return out;
}

/// Minimum alignment loss of a whitened n-dimensional representation.
inline double loss_lower_bound(double rho, int n) { return 2.0 * (1.0 - rho) * n; }

/// All multi-indices over `dim` coordinates with total degree in [1, max_degree],
/// ordered by degree.
inline std::vector<std::vector<int>> multi_indices(int dim, int max_degree) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<std::size_t>(dim), 0);
    for (int deg = 1; deg <= max_degree; ++deg) {
        std::function<void(int, int)> rec = [&](int pos, int left) {
            if (pos == dim - 1) {
                cur[static_cast<std::size_t>(pos)] = left;
                out.push_back(cur);
                return;
            }
            for (int a = left; a >= 0; --a) {
                cur[static_cast<std::size_t>(pos)] = a;
                rec(pos + 1, left - a);
            }
        };
        rec(0, deg);
    }
    return out;
}

inline constexpr int kMaxHermiteDegree = 8;
inline constexpr int kMaxHermiteDim = 4;

/// Design matrix of products prod_i h_{alpha_i}(z_i), one column per index.
inline Matrix hermite_features(const Matrix& z, const std::vector<std::vector<int>>& indices, int max_degree) {
    const auto table = hermite_table(z, max_degree);
    Matrix f = Matrix::Ones(z.rows(), static_cast<Eigen::Index>(indices.size()));
    for (std::size_t c = 0; c < indices.size(); ++c)
        for (Eigen::Index i = 0; i < z.cols(); ++i) {
            const int a = indices[c][static_cast<std::size_t>(i)];
            if (a > 0) f.col(static_cast<Eigen::Index>(c)).array() *= table[static_cast<std::size_t>(a)].col(i).array();
        }
    return f;
}

/// Least-squares Hermite coefficients of each output column against z,
/// grouped into variance fractions by total degree. One result per column.
inline std::vector<HermiteWeights> estimate_hermite_weights(const Matrix& h, const Matrix& z, int max_degree) {
    require(h.rows() == z.rows(), "estimate_hermite_weights: row mismatch");
    require(max_degree >= 1 && max_degree <= kMaxHermiteDegree, "estimate_hermite_weights: degree must lie in [1, 8]");
    require(z.cols() >= 1 && z.cols() <= kMaxHermiteDim, "estimate_hermite_weights: dim must lie in [1, 4]");
    const auto idx = multi_indices(static_cast<int>(z.cols()), max_degree);
    const auto basis = static_cast<Eigen::Index>(idx.size()) + 1;
    if (z.rows() < 10 * basis)
        throw ConditioningError("estimate_hermite_weights: need at least 10 samples per basis function");
    const Matrix f = hermite_features(z, idx, max_degree);
    const LinearFit fit = ols_fit(f, h);
    if (fit.degenerate) throw ConditioningError("estimate_hermite_weights: rank-deficient Hermite design");
    std::vector<HermiteWeights> out;
    for (Eigen::Index col = 0; col < h.cols(); ++col) {
        HermiteWeights w{Vector::Zero(max_degree), max_degree};
        for (std::size_t c = 0; c < idx.size(); ++c) {
            int deg = 0;
            for (int a : idx[c]) deg += a;
            const double coef = fit.weights(static_cast<Eigen::Index>(c), col);
            w.weights(deg - 1) += coef * coef;
        }
        out.push_back(w);
    }
    return out;
}

inline HermiteWeights estimate_hermite_weights(const Vector& h, const Matrix& z, int max_degree) {
    return estimate_hermite_weights(Matrix(h), z, max_degree).front();
}

struct CorrelationChain {
    double predicted = 0.0;       ///< from Hermite weights
    double direct = 0.0;          ///< Monte-Carlo E[h(z) h(z')]
    double standard_error = 0.0;  ///< combined SE of the difference
};

/// Predicted vs direct positive-pair correlation of a map h, averaged over
/// output components. Outputs are centred and whitened on a fit sample; the
/// Hermite weights come from that sample (split into batches for an SE) and
/// the direct correlation from an independent OU-pair sample.
inline CorrelationChain correlation_chain_check(const std::function<Matrix(const Matrix&)>& h, int dim, double rho,
                                                int max_degree, Eigen::Index fit_samples, Eigen::Index mc_samples,
                                                std::uint64_t seed, int batches = 10) {
    require(batches >= 2, "correlation_chain_check: need at least two batches");
    const Matrix zf = sample_latents(fit_samples, dim, LatentDistribution::gaussian(), derive_seed(seed, Stream::eval, 0)).data;
    const Matrix hf = h(zf);
    const RowVector mean = column_mean(hf);
    const Matrix w = inverse_sqrt_spd(covariance(hf));
    const Matrix yf = (hf.rowwise() - mean) * w;

    auto predict = [&](const Matrix& y, const Matrix& z) {
        double acc = 0.0;
        for (const auto& hw : estimate_hermite_weights(y, z, max_degree)) acc += correlation_from_weights(hw, rho);
        return acc / static_cast<double>(y.cols());
    };
    CorrelationChain out;
    out.predicted = predict(yf, zf);
    const Eigen::Index per = fit_samples / batches;
    Vector part(batches);
    for (int b = 0; b < batches; ++b) part(b) = predict(yf.middleRows(b * per, per), zf.middleRows(b * per, per));
    // Batches have 1/batches of the data, so their spread overstates the
    // full-sample SE by sqrt(batches); mean_and_se already divides by it.
    const double se_pred = mean_and_se(part).standard_error;

    const LatentBatch zm = sample_latents(mc_samples, dim, LatentDistribution::gaussian(), derive_seed(seed, Stream::eval, 1));
    const PairBatch pm = ou_pair(zm, broadcast_rho(rho, dim), derive_seed(seed, Stream::eval, 2));
    const Matrix y = (h(pm.z.data).rowwise() - mean) * w;
    const Matrix yp = (h(pm.z_prime.data).rowwise() - mean) * w;
    const MonteCarloEstimate direct = mean_and_se(y.cwiseProduct(yp).rowwise().mean());
    out.direct = direct.estimate;
    out.standard_error = std::sqrt(direct.standard_error * direct.standard_error + se_pred * se_pred);
    return out;
}

// ---- Sturm-Liouville ---------------------------------------------------------------

struct SLSpectrum {
    Vector grid;            ///< cell centres
    Vector density;         ///< normalized so sum(density) * h = 1
    Vector eigenvalues;     ///< ascending
    Matrix eigenfunctions;  ///< columns, unit norm in the density-weighted inner product
};

namespace detail {

/// Number of eigenvalues of the symmetric tridiagonal (d, e) below x.
inline int sturm_count(const Vector& d, const Vector& e, double x) {
    int count = 0;
    double q = 1.0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        const double off = i > 0 ? e(i - 1) * e(i - 1) : 0.0;
        q = d(i) - x - (i > 0 ? off / q : 0.0);
        if (q == 0.0) q = -std::numeric_limits<double>::epsilon() * (std::abs(d(i)) + 1.0);
        if (q < 0.0) ++count;
    }
    return count;
}

/// Solve (T - shift I) y = b for tridiagonal T by Gaussian elimination with
/// partial pivoting.
inline Vector tridiag_solve(const Vector& d, const Vector& e, double shift, const Vector& b) {
    const Eigen::Index n = d.size();
    // Bands after pivoting: main a, first super c1, second super c2; sub l.
    Vector a = d.array() - shift, c1 = Vector::Zero(n), c2 = Vector::Zero(n), rhs = b;
    Vector sub = Vector::Zero(n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        c1(i) = e(i);
        sub(i + 1) = e(i);
    }
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
        if (std::abs(sub(i + 1)) > std::abs(a(i))) {
            // Swap rows i and i + 1.
            std::swap(a(i), sub(i + 1));
            std::swap(c1(i), a(i + 1));
            std::swap(c2(i), c1(i + 1));
            std::swap(rhs(i), rhs(i + 1));
        }
        if (a(i) == 0.0) a(i) = std::numeric_limits<double>::min();
        const double m = sub(i + 1) / a(i);
        a(i + 1) -= m * c1(i);
        c1(i + 1) -= m * c2(i);
        rhs(i + 1) -= m * rhs(i);
    }
    if (a(n - 1) == 0.0) a(n - 1) = std::numeric_limits<double>::min();
    Vector y(n);
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        double s = rhs(i);
        if (i + 1 < n) s -= c1(i) * y(i + 1);
        if (i + 2 < n) s -= c2(i) * y(i + 2);
        y(i) = s / a(i);
    }
    return y;
}

}  // namespace detail

/// Smallest `count` eigenpairs of the Neumann problem
///     -(K p phi')' = lambda p phi   on [lo, hi]
/// from a cell-centred, face-weighted finite-difference stencil. The log
/// density is taken as input so that steep tails stay representable.
inline SLSpectrum sl_first_eigenfunctions(const std::function<double(double)>& log_density, double k_coef,
                                          int grid_size, double lo, double hi, int count = 4) {
    require(k_coef > 0.0, "sl: K must be positive");
    require(grid_size >= 8, "sl: grid must have at least 8 points");
    require(hi > lo, "sl: empty domain");
    require(count >= 1 && count <= grid_size, "sl: bad eigenpair count");
    const Eigen::Index m = grid_size;
    const double h = (hi - lo) / static_cast<double>(m);
    Vector x(m), lp(m), lf(m + 1);
    for (Eigen::Index i = 0; i < m; ++i) x(i) = lo + (static_cast<double>(i) + 0.5) * h;
    for (Eigen::Index i = 0; i < m; ++i) lp(i) = log_density(x(i));
    for (Eigen::Index i = 0; i <= m; ++i) lf(i) = log_density(lo + static_cast<double>(i) * h);
    require(lp.allFinite() && lf.allFinite(), "sl: density must be positive and finite on the domain");

    // Symmetrized operator S = P^{-1/2} A P^{-1/2}, psi = sqrt(p) phi.
    const double c = k_coef / (h * h);
    Vector d(m), e(m - 1);
    for (Eigen::Index i = 0; i < m; ++i) {
        double diag = 0.0;
        if (i > 0) diag += std::exp(lf(i) - lp(i));
        if (i + 1 < m) diag += std::exp(lf(i + 1) - lp(i));
        d(i) = c * diag;
    }
    for (Eigen::Index i = 0; i + 1 < m; ++i) e(i) = -c * std::exp(lf(i + 1) - 0.5 * (lp(i) + lp(i + 1)));

    const double bound = d.cwiseAbs().maxCoeff() + 2.0 * e.cwiseAbs().maxCoeff();
    SLSpectrum out;
    out.grid = x;
    const double lmax = lp.maxCoeff();
    out.density = (lp.array() - lmax).exp();
    out.density /= out.density.sum() * h;
    out.eigenvalues.resize(count);
    out.eigenfunctions.resize(m, count);
    for (int k = 0; k < count; ++k) {
        // Bisection on the Sturm count for the k-th smallest eigenvalue.
        double a = -bound - 1.0, b = bound + 1.0;
        for (int it = 0; it < 200 && b - a > 1e-14 * std::max(1.0, std::abs(a) + std::abs(b)); ++it) {
            const double mid = 0.5 * (a + b);
            if (detail::sturm_count(d, e, mid) > k)
                b = mid;
            else
                a = mid;
        }
        const double lam = 0.5 * (a + b);
        out.eigenvalues(k) = lam;
        // Inverse iteration from a deterministic start.
        Vector psi = Vector::LinSpaced(m, 1.0, 2.0);
        for (int j = 0; j < k; ++j) psi -= out.eigenfunctions.col(j).dot(psi) * out.eigenfunctions.col(j);
        const double shift = lam + 1e-10 * std::max(1.0, std::abs(lam));
        for (int it = 0; it < 4; ++it) {
            psi = detail::tridiag_solve(d, e, shift, psi);
            for (int j = 0; j < k; ++j) psi -= out.eigenfunctions.col(j).dot(psi) * out.eigenfunctions.col(j);
            psi.normalize();
        }
        out.eigenfunctions.col(k) = psi;
    }
    // Back to phi = psi / sqrt(p), unit norm in L2(p dx), signed so that the
    // value at the right end is positive (as for Hermite polynomials).
    const Vector sp = out.density.cwiseSqrt();
    for (int k = 0; k < count; ++k) {
        Vector phi = out.eigenfunctions.col(k).cwiseQuotient(sp);
        const double nrm = std::sqrt((phi.array().square() * out.density.array()).sum() * h);
        phi /= nrm;
        if (phi(m - 1) < 0.0) phi = -phi;
        out.eigenfunctions.col(k) = phi;
    }
    return out;
}

/// Domain for a gennorm density: [-8, 8], trimmed to where the log density
/// stays within 50 nats of its peak.
inline std::pair<double, double> gennorm_sl_domain(double alpha) {
    const StandardGenNorm g(alpha);
    double hi = 8.0;
    const double peak = g.log_pdf(0.0);
    if (peak - g.log_pdf(hi) > 50.0) hi = g.scale() * std::pow(50.0, 1.0 / alpha);
    return {-hi, hi};
}

/// 1 - R^2 of the density-weighted affine regression of phi on the grid.
inline double affine_deviation(const Vector& phi, const Vector& grid, const Vector& density) {
    require(phi.size() == grid.size() && grid.size() == density.size(), "affine_deviation: size mismatch");
    require((density.array() >= 0.0).all() && density.sum() > 0.0, "affine_deviation: bad density");
    const Vector w = density / density.sum();
    const double mx = w.dot(grid), mf = w.dot(phi);
    const Vector xc = grid.array() - mx, fc = phi.array() - mf;
    const double sxx = w.dot(xc.cwiseProduct(xc)), sff = w.dot(fc.cwiseProduct(fc)), sxf = w.dot(xc.cwiseProduct(fc));
    if (sff == 0.0) return 0.0;
    if (sxx == 0.0) return 1.0;
    return std::clamp(1.0 - sxf * sxf / (sxx * sff), 0.0, 1.0);
}

/// Number of sign changes, ignoring exact zeros.
inline int sign_changes(const Vector& v) {
    int changes = 0, last = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        const int s = (v(i) > 0.0) - (v(i) < 0.0);
        if (s != 0 && last != 0 && s != last) ++changes;
        if (s != 0) last = s;
    }
    return changes;
}

// ---- Jacobian energy ---------------------------------------------------------------

struct JacobianStats {
    double energy = 0.0;          ///< mean |J|_F^2
    double energy_se = 0.0;
    double mean_log_det = 0.0;    ///< mean ln|det J|
    double log_det_se = 0.0;
};

using TapeMap = std::function<Var(Tape&, Var)>;

/// Exact Jacobians of a row-wise map by one backward pass per output
/// dimension over the whole batch (rows do not interact).
inline JacobianStats dirichlet_energy(const TapeMap& h, const Matrix& samples) {
    require(samples.rows() >= 2, "dirichlet_energy: need at least two samples");
    Tape t;
    const Var x = t.leaf(samples);
    const Var y = h(t, x);
    const Eigen::Index n = samples.cols(), m = t.value(y).cols(), rows = samples.rows();
    std::vector<Matrix> jac_rows;  // jac_rows[j](i, :) = d y_ij / d x_i
    for (Eigen::Index j = 0; j < m; ++j) {
        Matrix seed = Matrix::Zero(rows, m);
        seed.col(j).setOnes();
        t.backward(y, seed);
        jac_rows.push_back(t.grad(x));
    }
    Vector energy = Vector::Zero(rows), logdet = Vector::Zero(rows);
    for (const Matrix& g : jac_rows) energy += g.rowwise().squaredNorm();
    if (m == n) {
        Matrix j(m, n);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index r = 0; r < m; ++r) j.row(r) = jac_rows[static_cast<std::size_t>(r)].row(i);
            logdet(i) = std::log(std::abs(j.partialPivLu().determinant()));
        }
    }
    const MonteCarloEstimate e = mean_and_se(energy);
    JacobianStats out{e.estimate, e.standard_error, 0.0, 0.0};
    if (m == n) {
        const MonteCarloEstimate l = mean_and_se(logdet);
        out.mean_log_det = l.estimate;
        out.log_det_se = l.standard_error;
    }
    return out;
}

}  // namespace idlab
