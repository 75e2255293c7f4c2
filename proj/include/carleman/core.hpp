#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace carleman {

using Point = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/** @brief Base of every error thrown by the library. */
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what, std::string key = {})
        : std::runtime_error(what), key_(std::move(key)) {}
    /** @brief Config key or quantity the error refers to (may be empty). */
    const std::string& key() const { return key_; }
    virtual const char* category() const { return "error"; }

private:
    std::string key_;
};

// Input could not be parsed.
class ConfigError : public Error {
public:
    using Error::Error;
    const char* category() const override { return "config"; }
};

// Input parsed but violates a precondition.
class ValidationError : public Error {
public:
    using Error::Error;
    const char* category() const override { return "validation"; }
};

class DomainError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "domain"; }
};

class DimensionError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "dimension"; }
};

class SymmetryViolation : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "symmetry"; }
};

class EllipticityViolation : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "ellipticity"; }
};

class PositivityError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "positivity"; }
};

class PreconditionError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "precondition"; }
};

// Not enough grid points for a requested difference stencil.
class StencilError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* category() const override { return "stencil"; }
};

// Numerical failure while computing.
class SolverError : public Error {
public:
    SolverError(const std::string& what, double residual, std::vector<double> trace = {})
        : Error(what), residual_(residual), trace_(std::move(trace)) {}
    double residual() const { return residual_; }
    const std::vector<double>& trace() const { return trace_; }
    const char* category() const override { return "solver"; }

private:
    double residual_;
    std::vector<double> trace_;
};

// A weight left the double range; the caller should switch to log-space scaling.
class OverflowError : public Error {
public:
    using Error::Error;
    const char* category() const override { return "overflow"; }
};

}  // namespace carleman
