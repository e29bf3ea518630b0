#pragma once

// Least squares, covariances and Procrustes alignment shared across modules.

#include "idlab/common.hpp"

#include <Eigen/SVD>

namespace idlab {

inline RowVector column_mean(const Matrix& x) { return x.colwise().mean(); }

inline Matrix centered(const Matrix& x) { return x.rowwise() - column_mean(x); }

/// Population covariance (divides by the row count).
inline Matrix covariance(const Matrix& x) {
    const Matrix c = centered(x);
    return (c.transpose() * c) / static_cast<double>(x.rows());
}

/// Population cross-covariance E[(a - mean a)^T (b - mean b)].
inline Matrix cross_covariance(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), "cross_covariance: row mismatch");
    return (centered(a).transpose() * centered(b)) / static_cast<double>(a.rows());
}

struct LinearFit {
    Matrix weights;   ///< source_dim x target_dim
    RowVector bias;   ///< 1 x target_dim
    bool degenerate = false;

    Matrix predict(const Matrix& source) const { return (source * weights).rowwise() + bias; }
};

/// OLS with intercept, target ~ source * W + b. Rank deficiency is flagged,
/// and a least-norm-style pivoted solution is still returned.
inline LinearFit ols_fit(const Matrix& source, const Matrix& target) {
    require(source.rows() == target.rows(), "ols: row count mismatch");
    require(source.rows() >= 2, "ols: need at least two rows");
    const Eigen::Index n = source.rows(), p = source.cols();
    Matrix design(n, p + 1);
    design.col(0).setOnes();
    design.rightCols(p) = source;
    Eigen::ColPivHouseholderQR<Matrix> qr(design);
    qr.setThreshold(1e-12);
    LinearFit fit;
    fit.degenerate = qr.rank() < p + 1;
    const Matrix coef = qr.solve(target);
    fit.bias = coef.row(0);
    fit.weights = coef.bottomRows(p);
    if (!coef.allFinite()) {
        fit.degenerate = true;
        fit.bias = column_mean(target);
        fit.weights = Matrix::Zero(p, target.cols());
    }
    return fit;
}

/// Coefficient of determination averaged uniformly over target columns.
/// A constant target column scores 1 when predicted exactly, else 0.
inline double r2_score(const Matrix& target, const Matrix& prediction) {
    require(target.rows() == prediction.rows() && target.cols() == prediction.cols(), "r2: shape mismatch");
    double total = 0.0;
    for (Eigen::Index j = 0; j < target.cols(); ++j) {
        const double mean = target.col(j).mean();
        const double sst = (target.col(j).array() - mean).square().sum();
        const double sse = (target.col(j) - prediction.col(j)).squaredNorm();
        if (sst > 0.0)
            total += 1.0 - sse / sst;
        else
            total += sse == 0.0 ? 1.0 : 0.0;
    }
    return total / static_cast<double>(target.cols());
}

/// In-sample OLS R^2.
inline double in_sample_r2(const Matrix& source, const Matrix& target) {
    return r2_score(target, ols_fit(source, target).predict(source));
}

struct ProcrustesResult {
    Matrix rotation;  ///< Q with Q^T Q = I
    double error = 0.0;  ///< mean over rows of |h - Q z|^2
    bool degenerate = false;
};

/// min over orthogonal Q of mean |h_i - Q z_i|^2, via the SVD of E[h z^T].
/// Inputs are used as given; centre them first if means should not count.
inline ProcrustesResult procrustes(const Matrix& h, const Matrix& z) {
    require(h.rows() == z.rows() && h.cols() == z.cols(), "procrustes: shape mismatch");
    require(h.cols() >= 1 && h.rows() >= 1, "procrustes: empty input");
    const Matrix c = (h.transpose() * z) / static_cast<double>(h.rows());
    ProcrustesResult out;
    if (c.norm() == 0.0) {
        out.degenerate = true;
        out.rotation = Matrix::Identity(h.cols(), h.cols());
    } else {
        Eigen::JacobiSVD<Matrix> svd(c, Eigen::ComputeFullU | Eigen::ComputeFullV);
        out.rotation = svd.matrixU() * svd.matrixV().transpose();
    }
    out.error = (h - z * out.rotation.transpose()).rowwise().squaredNorm().mean();
    return out;
}

/// |Q^T Q - I|_F / sqrt(n).
inline double orthogonality_error(const Matrix& q) {
    require(q.rows() == q.cols() && q.rows() >= 1, "orthogonality_error: square matrix required");
    const auto n = q.rows();
    return (q.transpose() * q - Matrix::Identity(n, n)).norm() / std::sqrt(static_cast<double>(n));
}

/// Symmetric inverse square root of an SPD matrix.
inline Matrix inverse_sqrt_spd(const Matrix& s) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    const Vector ev = es.eigenvalues().cwiseMax(1e-300);
    return es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

/// Whiten rows: (x - mean) Cov^{-1/2}.
inline Matrix whiten(const Matrix& x) { return centered(x) * inverse_sqrt_spd(covariance(x)); }

}  // namespace idlab
