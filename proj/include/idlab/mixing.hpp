#pragma once

// Nonlinear generative mixings x = g(z) and their analytic inverses.

#include "idlab/common.hpp"
#include "idlab/linalg.hpp"
#include "idlab/rng.hpp"
#include "idlab/tape.hpp"

#include <string>
#include <vector>

namespace idlab {

enum class MixingKind { spiral, sin_shear, parabolic_shear, coupling };

inline std::string to_string(MixingKind k) {
    switch (k) {
        case MixingKind::spiral: return "spiral";
        case MixingKind::sin_shear: return "sin_shear";
        case MixingKind::parabolic_shear: return "parabolic_shear";
        case MixingKind::coupling: return "coupling";
    }
    return "?";
}

inline MixingKind mixing_kind_from_string(const std::string& s) {
    if (s == "spiral") return MixingKind::spiral;
    if (s == "sin_shear") return MixingKind::sin_shear;
    if (s == "parabolic_shear") return MixingKind::parabolic_shear;
    if (s == "coupling") return MixingKind::coupling;
    throw ParameterError("unknown mixing kind: " + s);
}

/// Width of the hidden layer in each coupling scale/translation network.
inline constexpr int kCouplingHidden = 16;
/// Per-layer bound on the log-scale output: s = kScaleBound * tanh(raw).
inline const double kScaleBound = 0.5 * std::log(2.0);

/// One-hidden-layer tanh network a -> W2 tanh(a W1 + b1) + b2.
struct SmallNet {
    Matrix w1, b1, w2, b2;
};

struct CouplingLayer {
    Matrix rotation;  ///< orthogonal pre-rotation, applied row-wise as z <- O z
    SmallNet scale;
    SmallNet shift;
};

struct MixingSpec {
    MixingKind kind = MixingKind::spiral;
    int dim = 2;
    int layers = 0;                  ///< coupling only
    std::uint64_t param_seed = 0;    ///< coupling only
    std::vector<CouplingLayer> coupling;  ///< materialized from param_seed

    void validate() const {
        if (kind == MixingKind::coupling) {
            require(dim >= 2 && dim % 2 == 0, "coupling mixing requires even dim >= 2");
            require(layers >= 1, "coupling mixing requires layers >= 1");
        } else {
            require(dim == 2, to_string(kind) + " mixing requires dim = 2");
        }
    }
};

/// Orthogonal matrix from the QR factorization of a Gaussian matrix, with the
/// diagonal of R forced positive so the result is unique.
inline Matrix random_orthogonal(Eigen::Index n, Generator& g) {
    const Matrix a = g.normal_matrix(n, n);
    Eigen::HouseholderQR<Matrix> qr(a);
    Matrix q = qr.householderQ() * Matrix::Identity(n, n);
    const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < n; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

namespace detail {
inline SmallNet random_small_net(Eigen::Index in, Eigen::Index out, Generator& g, double gain_in, double gain_out) {
    SmallNet net;
    net.w1 = g.normal_matrix(in, kCouplingHidden) * (gain_in / std::sqrt(static_cast<double>(in)));
    net.b1 = g.normal_matrix(1, kCouplingHidden) * 0.5;
    net.w2 = g.normal_matrix(kCouplingHidden, out) * (gain_out / std::sqrt(static_cast<double>(kCouplingHidden)));
    net.b2 = g.normal_matrix(1, out) * 0.1;
    return net;
}
}  // namespace detail

/// Frozen random coupling stack; parameters are a pure function of the seed.
inline MixingSpec build_coupling_mixing(int dim, int layers, std::uint64_t param_seed) {
    MixingSpec spec{MixingKind::coupling, dim, layers, param_seed, {}};
    spec.validate();
    const Eigen::Index half = dim / 2;
    const Generator root(param_seed, Stream::mixing_params);
    for (int l = 0; l < layers; ++l) {
        Generator g = root.substream(static_cast<std::uint64_t>(l));
        CouplingLayer layer;
        layer.rotation = random_orthogonal(dim, g);
        layer.scale = detail::random_small_net(half, dim - half, g, 1.0, 1.0);
        layer.shift = detail::random_small_net(half, dim - half, g, 1.5, 1.2);
        spec.coupling.push_back(std::move(layer));
    }
    return spec;
}

inline MixingSpec make_mixing(MixingKind kind, int dim = 2, int layers = 4, std::uint64_t param_seed = 0) {
    if (kind == MixingKind::coupling) return build_coupling_mixing(dim, layers, param_seed);
    MixingSpec spec{kind, dim, 0, 0, {}};
    spec.validate();
    return spec;
}

/// Apply a SmallNet on the tape with frozen (constant) parameters.
inline Var small_net_forward(Tape& t, Var a, Var w1, Var b1, Var w2, Var b2) {
    const Var h = t.tanh(t.add_row(t.matmul(a, w1), b1));
    return t.add_row(t.matmul(h, w2), b2);
}

/// g(z) recorded on a tape, so Jacobians of the mixing are available.
inline Var apply_mixing(Tape& t, const MixingSpec& spec, Var z) {
    spec.validate();
    require(t.value(z).cols() == spec.dim, "apply_mixing: latent dimension does not match mixing");
    switch (spec.kind) {
        case MixingKind::spiral: {
            // g(z) = R(pi |z|) z
            const Var theta = t.scale(t.row_norm(z), kPi);
            const Var c = t.cos(theta), s = t.sin(theta);
            const Var z1 = t.cols(z, 0, 1), z2 = t.cols(z, 1, 1);
            const Var x1 = t.sub(t.mul(c, z1), t.mul(s, z2));
            const Var x2 = t.add(t.mul(s, z1), t.mul(c, z2));
            return t.hcat(x1, x2);
        }
        case MixingKind::sin_shear: {
            const Var z1 = t.cols(z, 0, 1), z2 = t.cols(z, 1, 1);
            return t.hcat(t.add(z1, t.sin(t.scale(z2, 1.5))), z2);
        }
        case MixingKind::parabolic_shear: {
            const Var z1 = t.cols(z, 0, 1), z2 = t.cols(z, 1, 1);
            return t.hcat(z1, t.add(z2, t.mul(z1, z1)));
        }
        case MixingKind::coupling: {
            require(static_cast<int>(spec.coupling.size()) == spec.layers, "coupling mixing is not materialized");
            const Eigen::Index half = spec.dim / 2;
            Var x = z;
            for (const CouplingLayer& layer : spec.coupling) {
                x = t.matmul_transposed(x, t.constant(layer.rotation));
                const Var a = t.cols(x, 0, half);
                const Var b = t.cols(x, half, spec.dim - half);
                const SmallNet& sn = layer.scale;
                const SmallNet& tn = layer.shift;
                const Var s = t.scale(t.tanh(small_net_forward(t, a, t.constant(sn.w1), t.constant(sn.b1),
                                                               t.constant(sn.w2), t.constant(sn.b2))),
                                      kScaleBound);
                const Var sh = small_net_forward(t, a, t.constant(tn.w1), t.constant(tn.b1), t.constant(tn.w2),
                                                 t.constant(tn.b2));
                x = t.hcat(a, t.add(t.mul(b, t.exp(s)), sh));
            }
            return x;
        }
    }
    throw ParameterError("unknown mixing");
}

inline Matrix apply_mixing(const MixingSpec& spec, const Matrix& z) {
    Tape t;
    return t.value(apply_mixing(t, spec, t.constant(z)));
}

namespace detail {
inline Matrix small_net_value(const SmallNet& n, const Matrix& a) {
    Matrix h = (a * n.w1).rowwise() + n.b1.row(0);
    h = h.array().tanh().matrix();
    return (h * n.w2).rowwise() + n.b2.row(0);
}
}  // namespace detail

/// Analytic inverse z = g^{-1}(x).
inline Matrix invert_mixing(const MixingSpec& spec, const Matrix& x) {
    spec.validate();
    require(x.cols() == spec.dim, "invert_mixing: dimension mismatch");
    Matrix z(x.rows(), x.cols());
    switch (spec.kind) {
        case MixingKind::spiral:
            // Rotations preserve the norm, so |x| = |z| and the angle is known.
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                const double th = -kPi * x.row(i).norm();
                const double c = std::cos(th), s = std::sin(th);
                z(i, 0) = c * x(i, 0) - s * x(i, 1);
                z(i, 1) = s * x(i, 0) + c * x(i, 1);
            }
            return z;
        case MixingKind::sin_shear:
            z.col(1) = x.col(1);
            z.col(0) = x.col(0) - (1.5 * x.col(1)).array().sin().matrix();
            return z;
        case MixingKind::parabolic_shear:
            z.col(0) = x.col(0);
            z.col(1) = x.col(1) - x.col(0).cwiseProduct(x.col(0));
            return z;
        case MixingKind::coupling: {
            const Eigen::Index half = spec.dim / 2;
            z = x;
            for (auto it = spec.coupling.rbegin(); it != spec.coupling.rend(); ++it) {
                const Matrix a = z.leftCols(half);
                const Matrix s = detail::small_net_value(it->scale, a).array().tanh().matrix() * kScaleBound;
                const Matrix sh = detail::small_net_value(it->shift, a);
                z.rightCols(spec.dim - half) =
                    ((z.rightCols(spec.dim - half) - sh).array() * (-s.array()).exp()).matrix();
                z = z * it->rotation;  // row-wise O^T z
            }
            return z;
        }
    }
    throw ParameterError("unknown mixing");
}

struct MixingDifficulty {
    double r2_z_to_x = 0.0;
    double r2_x_to_z = 0.0;
    bool degenerate = false;
};

/// How far a mixing is from linear: in-sample OLS R^2 in both directions.
inline MixingDifficulty mixing_difficulty(const Matrix& x, const Matrix& z) {
    require(x.rows() == z.rows(), "mixing_difficulty: row counts differ");
    const LinearFit zx = ols_fit(z, x);
    const LinearFit xz = ols_fit(x, z);
    return {r2_score(x, zx.predict(z)), r2_score(z, xz.predict(x)), zx.degenerate || xz.degenerate};
}

}  // namespace idlab
