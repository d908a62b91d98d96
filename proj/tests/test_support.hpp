#pragma once

// Shared helpers for the unit tests: finite differences, toy models and the
// one-random-effect desk model.

#include <cmath>
#include <functional>
#include <limits>
#include <span>

#include "mcmle/engine.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/rng.hpp"

namespace mcmle::testing {

inline const double kSqrtHalf = std::sqrt(0.5);

/// Truth used by the McCulloch-structure desk model.
inline glmm::GlmmParams desk_truth() {
  glmm::GlmmParams p;
  p.beta = Vector::Constant(1, 5.0);
  p.delta = Vector::Constant(1, kSqrtHalf);
  return p;
}

inline glmm::GlmmParams params(std::initializer_list<double> beta, std::initializer_list<double> delta) {
  glmm::GlmmParams p;
  p.beta = Eigen::Map<const Vector>(beta.begin(), static_cast<Eigen::Index>(beta.size()));
  p.delta = Eigen::Map<const Vector>(delta.begin(), static_cast<Eigen::Index>(delta.size()));
  return p;
}

inline Vector vec(std::initializer_list<double> v) {
  return Eigen::Map<const Vector>(v.begin(), static_cast<Eigen::Index>(v.size()));
}

/// Central differences of a scalar function.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5) {
  Vector g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vector a = x, b = x;
    a[k] += h;
    b[k] -= h;
    g[k] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

/// Central differences of a vector function (column k = d/dx_k).
inline Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x, double h = 1e-5) {
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Vector a = x, b = x;
    a[k] += h;
    b[k] -= h;
    J.col(k) = (f(a) - f(b)) / (2.0 * h);
  }
  return J;
}

/// max |a - b| / max(|b|_max, floor).
inline double rel_err(const Matrix& a, const Matrix& b, double floor = 1e-8) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), floor);
}

/// Generic model whose records are integers; used to exercise the engine
/// without the GLMM batched evaluator. rho = -0.5 (x - a y)^2 * theta0^2 + theta1 * x
struct QuadraticToyModel {
  using Record = double;
  std::size_t theta_dim() const { return 2; }
  std::size_t missing_dim() const { return 1; }
  double log_ratio(const Vector& t, std::span<const double> x, const double& y) const {
    const double r = x[0] - y;
    return -0.5 * r * r * t[0] * t[0] + t[1] * x[0];
  }
  Vector log_ratio_grad(const Vector& t, std::span<const double> x, const double& y) const {
    const double r = x[0] - y;
    Vector g(2);
    g << -r * r * t[0], x[0];
    return g;
  }
  Matrix log_ratio_hess(const Vector&, std::span<const double> x, const double& y) const {
    const double r = x[0] - y;
    Matrix h = Matrix::Zero(2, 2);
    h(0, 0) = -r * r;
    return h;
  }
  void sample_importance(Xoshiro256ss& rng, std::span<double> out) const {
    for (auto& v : out) v = standard_normal(rng);
  }
};

/// Ratio is -inf unless x > threshold (structurally impossible otherwise).
struct ThresholdModel {
  using Record = double;
  std::size_t theta_dim() const { return 1; }
  std::size_t missing_dim() const { return 1; }
  double log_ratio(const Vector& t, std::span<const double> x, const double& y) const {
    return x[0] > y ? t[0] * x[0] : -std::numeric_limits<double>::infinity();
  }
  Vector log_ratio_grad(const Vector&, std::span<const double> x, const double&) const {
    return Vector::Constant(1, x[0]);
  }
  Matrix log_ratio_hess(const Vector&, std::span<const double>, const double&) const { return Matrix::Zero(1, 1); }
  void sample_importance(Xoshiro256ss& rng, std::span<double> out) const {
    for (auto& v : out) v = standard_normal(rng);
  }
};

}  // namespace mcmle::testing
