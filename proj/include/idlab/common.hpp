#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace idlab {

/// Dense matrix with rows = samples, cols = dimensions.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Invalid argument, shape, or configuration.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or gradient during optimization.
class TrainingDivergence : public std::runtime_error {
public:
    TrainingDivergence(const std::string& what, long step)
        : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// Iterative solver failed to reach tolerance.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Least-squares problem too poorly conditioned for the requested fit.
class ConditioningError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ParameterError(msg);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline constexpr double kPi = 3.14159265358979323846;

}  // namespace idlab
