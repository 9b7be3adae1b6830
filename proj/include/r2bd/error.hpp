#pragma once

#include <stdexcept>
#include <string>

namespace r2bd {

/// Raised when an input violates a documented precondition (shape, range, config).
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a training run produces a non-finite loss or otherwise diverges.
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& message) {
    if (!cond) throw ValidationError(message);
}

}  // namespace r2bd
