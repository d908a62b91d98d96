#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mcmle {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument or malformed input (dimensions, ranges, file contents).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Every importance ratio for a record is exactly zero, so the estimated
/// marginal density vanishes and its logarithm is undefined.
class AllImpossibleError : public Error {
 public:
  explicit AllImpossibleError(std::optional<std::size_t> record = std::nullopt)
      : Error(record ? "all importance ratios are zero for record " + std::to_string(*record)
                     : std::string("all importance ratios are zero")),
        record_(record) {}

  std::optional<std::size_t> record() const noexcept { return record_; }

 private:
  std::optional<std::size_t> record_;
};

/// Objective or gradient evaluated to NaN or infinity during optimization.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, std::vector<double> theta)
      : Error(what), theta_(std::move(theta)) {}

  const std::vector<double>& theta() const noexcept { return theta_; }

 private:
  std::vector<double> theta_;
};

/// The curvature matrix is singular or too ill-conditioned to invert: the
/// likelihood has a ridge or the model is not locally identifiable.
class RidgeError : public Error {
 public:
  RidgeError(double smallest_eigenvalue, double condition_number)
      : Error("information matrix is nearly singular (smallest eigenvalue " +
              std::to_string(smallest_eigenvalue) + ", condition number " +
              std::to_string(condition_number) + "): likelihood ridge or non-identifiable model"),
        smallest_eigenvalue_(smallest_eigenvalue),
        condition_number_(condition_number) {}

  double smallest_eigenvalue() const noexcept { return smallest_eigenvalue_; }
  double condition_number() const noexcept { return condition_number_; }

 private:
  double smallest_eigenvalue_;
  double condition_number_;
};

}  // namespace mcmle
