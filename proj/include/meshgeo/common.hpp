#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace meshgeo {

using Index = std::ptrdiff_t;

/// Dense row-major matrix; the storage type behind features, weights and activations.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixXd = Matrix<double>;
using MatrixXf = Matrix<float>;

/// Raised when a file or byte stream does not follow its declared format.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line)
        : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
          message_(what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
    std::size_t line_;
};

/// Raised when two operands have incompatible shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(Index r, Index c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

}  // namespace meshgeo
