#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace rectiflow {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Index = Eigen::Index;
using Seed = std::uint64_t;

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class InvalidDistributionError : public Error {
public:
    using Error::Error;
};

class InvalidMatrixError : public Error {
public:
    using Error::Error;
};

class InvalidArgumentError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

/// Evaluation requested at a time where the field is undefined (e.g. t = 1
/// for conditional-expectation fields, or an interior degeneracy).
class SingularTimeError : public Error {
public:
    SingularTimeError(const std::string& msg, double t) : Error(msg), t(t) {}
    double t;
};

class SingularCovarianceError : public Error {
public:
    SingularCovarianceError(const std::string& msg, double t) : Error(msg), t(t) {}
    double t;
};

/// Spatial query outside the region where a field is defined.
class OutOfSupportError : public Error {
public:
    OutOfSupportError(const std::string& msg, double t, VectorXd x)
        : Error(msg), t(t), x(std::move(x)) {}
    double t;
    VectorXd x;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

/// The induced ODE has no unique solution: distinct trajectories merged at
/// an interior time.
class NonRectifiableError : public Error {
public:
    NonRectifiableError(const std::string& msg, double t_star, double min_spread)
        : Error(msg), t_star(t_star), min_spread(min_spread) {}
    double t_star;
    double min_spread;
};

class ResourceError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

inline bool all_finite(const Eigen::Ref<const MatrixXd>& m) {
    return m.allFinite();
}

} // namespace rectiflow
