#pragma once

// Straight-line latent planning with nearest-neighbour decoding, and the
// LQR / Riccati checks of rotation covariance.

#include "idlab/common.hpp"
#include "idlab/linalg.hpp"
#include "idlab/mixing.hpp"
#include "idlab/rng.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <functional>
#include <limits>
#include <ostream>
#include <tuple>
#include <vector>

namespace idlab {

// ---- retrieval planning ------------------------------------------------------------

struct RetrievalLibrary {
    Matrix embeddings;    ///< encoder outputs, one row per frame
    Matrix latents;       ///< true latents of the same frames
    Matrix observations;  ///< mixed observations of the same frames

    Eigen::Index count() const { return embeddings.rows(); }

    void validate() const {
        require(count() >= 1, "retrieval library is empty");
        require(latents.rows() == count() && observations.rows() == count(), "library matrices are not row-aligned");
    }
};

struct DecodedPath {
    std::vector<Eigen::Index> rows;  ///< library row of each waypoint
    Matrix latents;                  ///< (T + 1) x n, true-latent coordinates
};

inline Eigen::Index nearest_row(const Matrix& embeddings, const RowVector& q) {
    Eigen::Index best = 0;
    (embeddings.rowwise() - q).rowwise().squaredNorm().minCoeff(&best);
    return best;
}

/// Waypoints y_t = (1 - t) y_s + t y_g at t = k / T, k = 0..T, each decoded to
/// the library row with the nearest embedding.
inline DecodedPath interpolate_and_decode(const RetrievalLibrary& lib, Eigen::Index start, Eigen::Index goal, int T) {
    lib.validate();
    require(T >= 2, "interpolate_and_decode: T must be >= 2");
    require(start >= 0 && start < lib.count() && goal >= 0 && goal < lib.count(), "interpolate_and_decode: bad index");
    const RowVector ys = lib.embeddings.row(start), yg = lib.embeddings.row(goal);
    DecodedPath out;
    out.latents.resize(T + 1, lib.latents.cols());
    for (int k = 0; k <= T; ++k) {
        const double t = static_cast<double>(k) / T;
        const Eigen::Index r = nearest_row(lib.embeddings, (1.0 - t) * ys + t * yg);
        out.rows.push_back(r);
        out.latents.row(k) = lib.latents.row(r);
    }
    return out;
}

/// Arc length of the path over the chord |theta_g - theta_s|. A zero chord
/// gives 1 for a stationary path.
inline double path_length_metric(const Matrix& path, const RowVector& theta_s, const RowVector& theta_g) {
    require(path.rows() >= 1 && path.cols() == theta_s.size() && theta_s.size() == theta_g.size(),
            "path_length_metric: shape mismatch");
    double arc = 0.0;
    for (Eigen::Index k = 0; k + 1 < path.rows(); ++k) arc += (path.row(k + 1) - path.row(k)).norm();
    const double chord = (theta_g - theta_s).norm();
    if (chord == 0.0) return arc == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return arc / chord;
}

/// Mean perpendicular distance of the waypoints to the chord line.
inline double orthogonal_deviation(const Matrix& path, const RowVector& theta_s, const RowVector& theta_g) {
    require(path.rows() >= 1 && path.cols() == theta_s.size(), "orthogonal_deviation: shape mismatch");
    const RowVector dir = theta_g - theta_s;
    const double len = dir.norm();
    double total = 0.0;
    for (Eigen::Index k = 0; k < path.rows(); ++k) {
        const RowVector v = path.row(k) - theta_s;
        total += len == 0.0 ? v.norm() : (v - (v.dot(dir) / (len * len)) * dir).norm();
    }
    return total / static_cast<double>(path.rows());
}

struct PlanningRow {
    std::string run_id;
    std::string encoder_id;
    int pair_idx = 0;
    double path_length = 0.0;
    double deviation = 0.0;
};

/// Random distinct start/goal pairs, scored along straight embedding lines.
inline std::vector<PlanningRow> evaluate_planning(const RetrievalLibrary& lib, int pairs, int T, std::uint64_t seed,
                                                  const std::string& run_id, const std::string& encoder_id) {
    lib.validate();
    require(lib.count() >= 2, "evaluate_planning: need at least two library rows");
    Generator g(seed, Stream::planning);
    std::vector<PlanningRow> out;
    for (int p = 0; p < pairs; ++p) {
        const auto s = static_cast<Eigen::Index>(g.below(static_cast<std::uint64_t>(lib.count())));
        auto e = static_cast<Eigen::Index>(g.below(static_cast<std::uint64_t>(lib.count() - 1)));
        if (e >= s) ++e;
        const DecodedPath path = interpolate_and_decode(lib, s, e, T);
        const RowVector ts = lib.latents.row(s), tg = lib.latents.row(e);
        out.push_back({run_id, encoder_id, p, path_length_metric(path.latents, ts, tg),
                       orthogonal_deviation(path.latents, ts, tg)});
    }
    return out;
}

inline void write_planning_csv(std::ostream& os, const std::vector<PlanningRow>& rows) {
    os << "run_id,encoder_id,pair_idx,path_length,deviation\n";
    os.precision(17);
    for (const auto& r : rows)
        os << r.run_id << ',' << r.encoder_id << ',' << r.pair_idx << ',' << r.path_length << ',' << r.deviation << '\n';
}

// ---- LQR ------------------------------------------------------------------------------

struct LQRProblem {
    Matrix A, B;
    Matrix W, W_T;  ///< stage and terminal state costs
    Matrix R;       ///< action cost
    Matrix Q_rot;   ///< latent coordinate change

    void validate(bool require_orthogonal = true) const {
        const Eigen::Index n = A.rows();
        require(A.cols() == n && B.rows() == n, "lqr: A must be square and B must have n rows");
        require(W.rows() == n && W.cols() == n && W_T.rows() == n && W_T.cols() == n, "lqr: W shapes");
        require(R.rows() == B.cols() && R.cols() == B.cols(), "lqr: R shape");
        require(Q_rot.rows() == n && Q_rot.cols() == n, "lqr: Q_rot shape");
        require((W - W.transpose()).norm() <= 1e-12 * (1.0 + W.norm()), "lqr: W must be symmetric");
        require((R - R.transpose()).norm() <= 1e-12 * (1.0 + R.norm()), "lqr: R must be symmetric");
        require(Eigen::SelfAdjointEigenSolver<Matrix>(W).eigenvalues().minCoeff() >= -1e-12, "lqr: W must be PSD");
        require(Eigen::SelfAdjointEigenSolver<Matrix>(W_T).eigenvalues().minCoeff() >= -1e-12, "lqr: W_T must be PSD");
        require(Eigen::SelfAdjointEigenSolver<Matrix>(R).eigenvalues().minCoeff() > 0.0, "lqr: R must be PD");
        if (require_orthogonal)
            require((Q_rot.transpose() * Q_rot - Matrix::Identity(n, n)).norm() <= 1e-10, "lqr: Q_rot must be orthogonal");
    }
};

inline Matrix riccati_map(const LQRProblem& p, const Matrix& P) {
    const Matrix bp = p.B.transpose() * P;
    const Matrix s = p.R + bp * p.B;
    return p.A.transpose() * P * p.A - p.A.transpose() * bp.transpose() * s.ldlt().solve(bp * p.A) + p.W;
}

/// Fixed-point iteration of the Riccati map from P = W.
inline Matrix dare_solve(const LQRProblem& p, double tol = 1e-12, int max_iters = 100000) {
    require(tol > 0.0 && max_iters >= 1, "dare_solve: bad tolerance or iteration cap");
    Matrix P = p.W;
    for (int it = 0; it < max_iters; ++it) {
        Matrix next = riccati_map(p, P);
        next = 0.5 * (next + next.transpose());
        if (!next.allFinite()) throw ConvergenceError("dare_solve: iteration diverged");
        const double change = (next - P).norm();
        P = std::move(next);
        if (change < tol * std::max(1.0, P.norm())) return P;
    }
    throw ConvergenceError("dare_solve: no convergence within the iteration cap");
}

inline double riccati_residual(const LQRProblem& p, const Matrix& P) { return (P - riccati_map(p, P)).norm(); }

/// Optimal feedback a = -K z.
inline Matrix lqr_gain(const LQRProblem& p, const Matrix& P) {
    const Matrix bp = p.B.transpose() * P;
    return (p.R + bp * p.B).ldlt().solve(bp * p.A);
}

/// The same problem written in coordinates z_hat = Q z (Q^T used as the inverse).
inline LQRProblem rotate_problem(const LQRProblem& p) {
    const Matrix& q = p.Q_rot;
    return {q * p.A * q.transpose(), q * p.B, q * p.W * q.transpose(), q * p.W_T * q.transpose(), p.R, q};
}

struct LQRResiduals {
    double gain_residual = 0.0;
    double value_residual = 0.0;
};

/// Solve in true and rotated coordinates; compare K_hat with K Q^T and the
/// values at a fixed set of test states.
inline LQRResiduals lqr_rotation_check(const LQRProblem& p, int test_states = 16, std::uint64_t seed = 0) {
    p.validate(false);
    const Matrix P = dare_solve(p);
    const Matrix K = lqr_gain(p, P);
    const LQRProblem r = rotate_problem(p);
    const Matrix Ph = dare_solve(r);
    const Matrix Kh = lqr_gain(r, Ph);
    LQRResiduals out;
    out.gain_residual = (Kh - K * p.Q_rot.transpose()).norm();
    Generator g(seed, Stream::planning);
    for (int i = 0; i < test_states; ++i) {
        const Vector z = g.normal_matrix(p.A.rows(), 1);
        const Vector zh = p.Q_rot * z;
        out.value_residual = std::max(out.value_residual, std::abs(zh.dot(Ph * zh) - z.dot(P * z)));
    }
    return out;
}

/// Random stabilizable problem: contractive-ish A, full-rank B, PD costs, random rotation.
inline LQRProblem random_lqr_problem(int dim, std::uint64_t seed, int actions = -1) {
    require(dim >= 1, "random_lqr_problem: dim must be positive");
    const int m = actions > 0 ? actions : dim;
    Generator g(seed, Stream::planning);
    LQRProblem p;
    p.A = g.normal_matrix(dim, dim) * (1.1 / std::sqrt(static_cast<double>(dim)));
    p.B = g.normal_matrix(dim, m);
    const Matrix lw = g.normal_matrix(dim, dim);
    p.W = lw * lw.transpose() / dim + 0.1 * Matrix::Identity(dim, dim);
    const Matrix lt = g.normal_matrix(dim, dim);
    p.W_T = lt * lt.transpose() / dim;
    const Matrix lr = g.normal_matrix(m, m);
    p.R = lr * lr.transpose() / m + Matrix::Identity(m, m);
    p.Q_rot = random_orthogonal(dim, g);
    return p;
}

inline void write_lqr_csv(std::ostream& os, const std::vector<std::tuple<std::uint64_t, int, LQRResiduals>>& rows) {
    os << "seed,dim,gain_residual,value_residual\n";
    os.precision(17);
    for (const auto& [seed, dim, r] : rows) os << seed << ',' << dim << ',' << r.gain_residual << ',' << r.value_residual << '\n';
}

// ---- Monte-Carlo value equivalence ------------------------------------------------------

using StageCost = std::function<double(const Vector& z, const Vector& a)>;
using TerminalCost = std::function<double(const Vector& z)>;

struct LinearDynamics {
    Matrix A, B;
    double noise = 0.0;  ///< z' = A z + B a + noise * eps, eps standard normal
};

struct ValueComparison {
    double true_cost = 0.0;
    double latent_cost = 0.0;
    double true_se = 0.0;
    double latent_se = 0.0;
    double paired_se = 0.0;  ///< SE of the per-sample difference

    /// Agreement within 3 unpaired standard errors (exact when both are 0).
    bool equal_within_noise() const {
        return std::abs(true_cost - latent_cost) <= 3.0 * std::sqrt(true_se * true_se + latent_se * latent_se);
    }
    /// Disagreement beyond 3 paired standard errors.
    bool detectably_unequal() const { return std::abs(true_cost - latent_cost) > 3.0 * paired_se; }
};

/// Expected open-loop trajectory cost from z0 under the original dynamics and
/// from Q z0 under the pushforward dynamics (Q A Q^T, Q B, noise Q eps), with
/// common random numbers. The same cost functions are used in both frames.
inline ValueComparison value_equivalence_mc(const StageCost& stage, const TerminalCost& terminal,
                                            const LinearDynamics& dyn, const Matrix& q_rot, const Matrix& actions,
                                            const Vector& z0, int samples, std::uint64_t seed) {
    const Eigen::Index n = dyn.A.rows();
    require(dyn.A.cols() == n && dyn.B.rows() == n && q_rot.rows() == n && q_rot.cols() == n && z0.size() == n,
            "value_equivalence_mc: shape mismatch");
    require(actions.cols() == dyn.B.cols(), "value_equivalence_mc: action width mismatch");
    require(samples >= 2, "value_equivalence_mc: need at least two samples");
    const Matrix ah = q_rot * dyn.A * q_rot.transpose(), bh = q_rot * dyn.B;
    Generator g(seed, Stream::planning);
    Vector ct(samples), cl(samples);
    for (int s = 0; s < samples; ++s) {
        Vector z = z0, zh = q_rot * z0;
        double a = 0.0, b = 0.0;
        for (Eigen::Index t = 0; t < actions.rows(); ++t) {
            const Vector u = actions.row(t).transpose();
            a += stage(z, u);
            b += stage(zh, u);
            const Vector eps = g.normal_matrix(n, 1);
            z = dyn.A * z + dyn.B * u + dyn.noise * eps;
            zh = ah * zh + bh * u + dyn.noise * (q_rot * eps);
        }
        ct(s) = a + terminal(z);
        cl(s) = b + terminal(zh);
    }
    auto se = [](const Vector& v) {
        const double m = v.mean();
        return std::sqrt((v.array() - m).square().sum() / (v.size() - 1.0) / v.size());
    };
    return {ct.mean(), cl.mean(), se(ct), se(cl), se(ct - cl)};
}

}  // namespace idlab
