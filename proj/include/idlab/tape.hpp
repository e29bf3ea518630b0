#pragma once

// Reverse-mode gradient tape over dense matrices.
//
// Every node holds a matrix value; gradients flow from one output node back
// to the leaves in reverse creation order. Ops are matrix-level (matmul,
// broadcast bias, elementwise maps, column slicing) and loss functions attach
// as custom nodes with hand-derived adjoints. A scalar is a 1x1 matrix.

#include "idlab/common.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

namespace idlab {

class Tape;

struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
public:
    /// Adjoint callback: receives the output gradient and accumulates into inputs.
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Matrix value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, nullptr);
    }
    Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

    const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    double scalar(Var v) const { return value(v)(0, 0); }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Gradient of the last backward() output w.r.t. v (zeros if unreached).
    Matrix grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    void accumulate(Var v, const Matrix& g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    void zero_grad() {
        for (Node& n : nodes_) n.grad.resize(0, 0);
    }

    /// Propagate `seed` (same shape as the output) back through the tape.
    void backward(Var out, const Matrix& seed) {
        require(seed.rows() == value(out).rows() && seed.cols() == value(out).cols(),
                "backward: seed shape mismatch");
        zero_grad();
        accumulate(out, seed);
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.size() == 0 || !n.backward) continue;
            // Adjoints only write to earlier nodes, so n.grad stays valid.
            n.backward(*this, n.grad);
        }
    }

    void backward(Var scalar_out) {
        require(value(scalar_out).size() == 1, "backward: output is not a scalar");
        backward(scalar_out, Matrix::Ones(1, 1));
    }

    /// Attach a node with a caller-supplied adjoint.
    Var custom(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
        bool rg = false;
        for (Var v : inputs) rg = rg || requires_grad(v);
        return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
    }

    // ---- linear algebra -------------------------------------------------

    Var matmul(Var a, Var b) {
        require(value(a).cols() == value(b).rows(), "matmul: inner dimension mismatch");
        Matrix out = value(a) * value(b);
        return custom(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
            if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
            if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
        });
    }

    /// x (B x n) times b^T; b is (m x n). Used for row-wise linear maps y_i = M x_i.
    Var matmul_transposed(Var x, Var m) {
        require(value(x).cols() == value(m).cols(), "matmul_transposed: dimension mismatch");
        Matrix out = value(x) * value(m).transpose();
        return custom(std::move(out), {x, m}, [x, m](Tape& t, const Matrix& g) {
            if (t.requires_grad(x)) t.accumulate(x, g * t.value(m));
            if (t.requires_grad(m)) t.accumulate(m, g.transpose() * t.value(x));
        });
    }

    /// Broadcast a 1 x n row over every row of x.
    Var add_row(Var x, Var row) {
        require(value(row).rows() == 1 && value(row).cols() == value(x).cols(), "add_row: shape mismatch");
        Matrix out = value(x).rowwise() + value(row).row(0);
        return custom(std::move(out), {x, row}, [x, row](Tape& t, const Matrix& g) {
            if (t.requires_grad(x)) t.accumulate(x, g);
            if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
        });
    }

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Matrix out = value(a) + value(b);
        return custom(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
            t.accumulate(a, g);
            t.accumulate(b, g);
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Matrix out = value(a) - value(b);
        return custom(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
            t.accumulate(a, g);
            t.accumulate(b, -g);
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Matrix out = value(a).cwiseProduct(value(b));
        return custom(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
            if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
            if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
        });
    }

    Var scale(Var a, double c) {
        Matrix out = c * value(a);
        return custom(std::move(out), {a}, [a, c](Tape& t, const Matrix& g) { t.accumulate(a, c * g); });
    }

    /// Scale every row of x (B x n) by the matching entry of c (B x 1).
    Var mul_col(Var x, Var c) {
        require(value(c).cols() == 1 && value(c).rows() == value(x).rows(), "mul_col: shape mismatch");
        Matrix out = value(x).array().colwise() * value(c).col(0).array();
        return custom(std::move(out), {x, c}, [x, c](Tape& t, const Matrix& g) {
            if (t.requires_grad(x)) t.accumulate(x, (g.array().colwise() * t.value(c).col(0).array()).matrix());
            if (t.requires_grad(c)) t.accumulate(c, g.cwiseProduct(t.value(x)).rowwise().sum());
        });
    }

    /// Euclidean norm of each row, B x 1. Gradient at a zero row is taken as 0.
    Var row_norm(Var x) {
        Matrix out = value(x).rowwise().norm();
        return custom(std::move(out), {x}, [x, self = std::size_t{size()}](Tape& t, const Matrix& g) {
            const Matrix& xv = t.value(x);
            const Matrix& r = t.nodes_[self].value;
            Matrix gx(xv.rows(), xv.cols());
            for (Eigen::Index i = 0; i < xv.rows(); ++i)
                if (r(i, 0) > 0.0)
                    gx.row(i) = (g(i, 0) / r(i, 0)) * xv.row(i);
                else
                    gx.row(i).setZero();
            t.accumulate(x, gx);
        });
    }

    // ---- structure ------------------------------------------------------

    Var cols(Var x, Eigen::Index start, Eigen::Index count) {
        require(start >= 0 && count >= 0 && start + count <= value(x).cols(), "cols: range out of bounds");
        Matrix out = value(x).middleCols(start, count);
        return custom(std::move(out), {x}, [x, start, count](Tape& t, const Matrix& g) {
            Matrix gx = Matrix::Zero(t.value(x).rows(), t.value(x).cols());
            gx.middleCols(start, count) = g;
            t.accumulate(x, gx);
        });
    }

    Var hcat(Var a, Var b) {
        require(value(a).rows() == value(b).rows(), "hcat: row mismatch");
        const Eigen::Index na = value(a).cols();
        Matrix out(value(a).rows(), na + value(b).cols());
        out << value(a), value(b);
        return custom(std::move(out), {a, b}, [a, b, na](Tape& t, const Matrix& g) {
            t.accumulate(a, g.leftCols(na));
            t.accumulate(b, g.rightCols(g.cols() - na));
        });
    }

    /// Sum of all entries, 1 x 1.
    Var sum(Var x) {
        Matrix out(1, 1);
        out(0, 0) = value(x).sum();
        return custom(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
            t.accumulate(x, Matrix::Constant(t.value(x).rows(), t.value(x).cols(), g(0, 0)));
        });
    }

    // ---- elementwise ----------------------------------------------------

    /// Exact GELU: x * Phi(x).
    Var gelu(Var x) {
        Matrix out = value(x).unaryExpr([](double v) { return 0.5 * v * std::erfc(-v * kInvSqrt2); });
        return custom(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
            const Matrix d = t.value(x).unaryExpr([](double v) {
                return 0.5 * std::erfc(-v * kInvSqrt2) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
            });
            t.accumulate(x, g.cwiseProduct(d));
        });
    }

    Var tanh(Var x) {
        Matrix out = value(x).array().tanh().matrix();
        const std::size_t self = size();
        return custom(std::move(out), {x}, [x, self](Tape& t, const Matrix& g) {
            const Matrix& y = t.nodes_[self].value;
            t.accumulate(x, g.cwiseProduct((1.0 - y.array().square()).matrix()));
        });
    }

    Var exp(Var x) {
        Matrix out = value(x).array().exp().matrix();
        const std::size_t self = size();
        return custom(std::move(out), {x}, [x, self](Tape& t, const Matrix& g) {
            t.accumulate(x, g.cwiseProduct(t.nodes_[self].value));
        });
    }

    Var sin(Var x) {
        Matrix out = value(x).array().sin().matrix();
        return custom(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
            t.accumulate(x, g.cwiseProduct(t.value(x).array().cos().matrix()));
        });
    }

    Var cos(Var x) {
        Matrix out = value(x).array().cos().matrix();
        return custom(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
            t.accumulate(x, -g.cwiseProduct(t.value(x).array().sin().matrix()));
        });
    }

private:
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;

    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Matrix value, bool requires_grad, Backward fn) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(fn)});
        return Var{nodes_.size() - 1};
    }

    void check_same(Var a, Var b, const char* op) const {
        require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
                std::string(op) + ": shape mismatch");
    }

    std::deque<Node> nodes_;
};

}  // namespace idlab
