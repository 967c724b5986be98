#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace clf {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Thrown for violated preconditions on caller-supplied data (shapes, ranges, ids).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation cannot complete (divergence, exhausted search, bad file).
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration (unknown keys, bad values, missing files).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractError(what);
}

}  // namespace clf
