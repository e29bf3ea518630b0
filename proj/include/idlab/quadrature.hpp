#pragma once

#include "idlab/common.hpp"

#include <Eigen/Eigenvalues>

namespace idlab {

struct Quadrature {
    Vector nodes;
    Vector weights;
};

/// Gauss-Hermite rule for the standard normal density (weights sum to 1),
/// by Golub-Welsch on the probabilists' Hermite Jacobi matrix.
inline Quadrature gauss_hermite(int points) {
    require(points >= 1, "gauss_hermite: need at least one point");
    Matrix jacobi = Matrix::Zero(points, points);
    for (int k = 1; k < points; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Matrix> es(jacobi);
    Quadrature q{es.eigenvalues(), es.eigenvectors().row(0).transpose().cwiseAbs2()};
    // Symmetrise away eigensolver round-off so +-t pairs match exactly.
    for (int i = 0; i < points / 2; ++i) {
        const int j = points - 1 - i;
        const double t = 0.5 * (q.nodes(j) - q.nodes(i));
        const double w = 0.5 * (q.weights(i) + q.weights(j));
        q.nodes(i) = -t;
        q.nodes(j) = t;
        q.weights(i) = q.weights(j) = w;
    }
    if (points % 2 == 1) q.nodes(points / 2) = 0.0;
    q.weights /= q.weights.sum();
    return q;
}

}  // namespace idlab
