#pragma once

// Quasi-Newton maximization and profile likelihoods.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcmle/errors.hpp"
#include "mcmle/types.hpp"

namespace mcmle {

struct ValueGrad {
  double value = 0.0;
  Vector grad;
};

/// theta -> (objective, gradient). The optimizer maximizes.
using Objective = std::function<ValueGrad(const Vector&)>;

struct OptOptions {
  /// Absolute gradient sup-norm tolerance; when unset the tolerance is
  /// gtol_rel * (1 + |objective|) at the current iterate.
  std::optional<double> gtol;
  double gtol_rel = 1e-8;
  int max_iter = 500;
  bool keep_trace = true;
};

struct TracePoint {
  double objective;
  double grad_norm;
};

struct OptResult {
  ParamVector theta_hat;
  double objective = 0.0;
  Vector gradient;
  double grad_norm = 0.0;
  double gtol = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<TracePoint> trace;
};

namespace detail {

inline std::vector<double> to_std(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline ValueGrad checked_eval(const Objective& f, const Vector& x) {
  ValueGrad vg = f(x);
  if (!std::isfinite(vg.value)) throw NonFiniteError("objective is not finite", to_std(x));
  if (vg.grad.size() != x.size()) throw InvalidInput("objective gradient has the wrong length");
  if (!vg.grad.allFinite()) throw NonFiniteError("objective gradient is not finite", to_std(x));
  return vg;
}

inline double tolerance(const OptOptions& opts, double value) {
  return opts.gtol ? *opts.gtol : opts.gtol_rel * (1.0 + std::abs(value));
}

}  // namespace detail

/// BFGS ascent with a backtracking line search. Every accepted step either
/// satisfies the Armijo condition or (at roundoff level near the optimum)
/// does not decrease the objective while shrinking the gradient, so the
/// trace of objectives is non-decreasing.
inline OptResult maximize(const Objective& objective, const ParamVector& theta0, const OptOptions& opts = {}) {
  constexpr double armijo = 1e-4;
  constexpr int max_halvings = 60;

  const Eigen::Index d = theta0.size();
  Vector x = theta0.values;
  ValueGrad cur = detail::checked_eval(objective, x);

  OptResult res;
  auto record = [&](double gnorm) {
    if (opts.keep_trace) res.trace.push_back({cur.value, gnorm});
  };

  Matrix H = Matrix::Identity(d, d);  // inverse Hessian of -objective
  bool scaled = false;
  int failures = 0;
  double gnorm = cur.grad.lpNorm<Eigen::Infinity>();
  record(gnorm);

  int iter = 0;
  while (iter < opts.max_iter) {
    if (gnorm <= detail::tolerance(opts, cur.value)) break;

    // Ascent direction for the objective.
    Vector dir = H * cur.grad;
    if (!scaled) dir = cur.grad / cur.grad.norm();
    double slope = dir.dot(cur.grad);
    if (!(slope > 0.0)) {
      H.setIdentity();
      scaled = false;
      dir = cur.grad / cur.grad.norm();
      slope = dir.dot(cur.grad);
    }

    double t = 1.0;
    bool accepted = false;
    Vector x_new;
    ValueGrad next;
    for (int h = 0; h < max_halvings; ++h, t *= 0.5) {
      x_new = x + t * dir;
      next = detail::checked_eval(objective, x_new);
      const bool sufficient = next.value >= cur.value + armijo * t * slope;
      const bool flat_but_better =
          next.value >= cur.value && next.grad.lpNorm<Eigen::Infinity>() < gnorm;
      if (sufficient || flat_but_better) {
        accepted = true;
        break;
      }
    }

    if (!accepted) {
      // Retry once from a steepest-ascent restart before giving up.
      if (++failures > 1 || !scaled) break;
      H.setIdentity();
      scaled = false;
      continue;
    }
    failures = 0;
    ++iter;

    const Vector s = x_new - x;
    const Vector yk = cur.grad - next.grad;  // gradient change of -objective
    const double sy = s.dot(yk);
    if (sy > 1e-12 * s.norm() * yk.norm()) {
      if (!scaled) {
        H = Matrix::Identity(d, d) * (sy / yk.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Vector Hy = H * yk;
      const double yHy = yk.dot(Hy);
      H += ((sy + yHy) * rho * rho) * (s * s.transpose()) - rho * (Hy * s.transpose() + s * Hy.transpose());
      H = 0.5 * (H + H.transpose()).eval();
    }

    x = std::move(x_new);
    cur = std::move(next);
    gnorm = cur.grad.lpNorm<Eigen::Infinity>();
    record(gnorm);
  }

  res.theta_hat = ParamVector(x, theta0.layout);
  res.objective = cur.value;
  res.gradient = cur.grad;
  res.grad_norm = gnorm;
  res.gtol = detail::tolerance(opts, cur.value);
  res.iterations = iter;
  res.converged = gnorm <= res.gtol;
  return res;
}

struct ProfilePoint {
  double grid_value = 0.0;
  double profile_max = 0.0;
  Vector theta;
  bool converged = false;
};

/// Error raised while profiling, tagged with the grid value.
class ProfileError : public Error {
 public:
  ProfileError(double grid_value, const std::string& what)
      : Error("profile at grid value " + std::to_string(grid_value) + ": " + what), grid_value_(grid_value) {}
  double grid_value() const noexcept { return grid_value_; }

 private:
  double grid_value_;
};

/// Maximizes over all coordinates except `coord`, which is pinned to each
/// grid value in turn. Each solve starts from the previous maximizer.
inline std::vector<ProfilePoint> profile(const Objective& objective, const ParamVector& theta0, std::size_t coord,
                                         const std::vector<double>& grid, const OptOptions& opts = {}) {
  const auto d = static_cast<std::size_t>(theta0.size());
  if (grid.empty()) throw InvalidInput("profile grid is empty");
  if (coord >= d) throw InvalidInput("profile coordinate out of range");

  std::vector<ProfilePoint> out;
  out.reserve(grid.size());
  Vector warm = theta0.values;

  for (double g : grid) {
    Vector full = warm;
    full[static_cast<Eigen::Index>(coord)] = g;
    try {
      if (d == 1) {
        const ValueGrad vg = detail::checked_eval(objective, full);
        out.push_back({g, vg.value, full, true});
        continue;
      }
      auto embed = [&](const Vector& reduced) {
        Vector t(static_cast<Eigen::Index>(d));
        t.head(static_cast<Eigen::Index>(coord)) = reduced.head(static_cast<Eigen::Index>(coord));
        t[static_cast<Eigen::Index>(coord)] = g;
        t.tail(static_cast<Eigen::Index>(d - coord - 1)) = reduced.tail(static_cast<Eigen::Index>(d - coord - 1));
        return t;
      };
      Objective reduced_obj = [&](const Vector& reduced) {
        ValueGrad vg = objective(embed(reduced));
        Vector gr(static_cast<Eigen::Index>(d - 1));
        gr.head(static_cast<Eigen::Index>(coord)) = vg.grad.head(static_cast<Eigen::Index>(coord));
        gr.tail(static_cast<Eigen::Index>(d - coord - 1)) = vg.grad.tail(static_cast<Eigen::Index>(d - coord - 1));
        return ValueGrad{vg.value, std::move(gr)};
      };
      Vector start(static_cast<Eigen::Index>(d - 1));
      start.head(static_cast<Eigen::Index>(coord)) = full.head(static_cast<Eigen::Index>(coord));
      start.tail(static_cast<Eigen::Index>(d - coord - 1)) = full.tail(static_cast<Eigen::Index>(d - coord - 1));
      const OptResult r = maximize(reduced_obj, ParamVector(start), opts);
      warm = embed(r.theta_hat.values);
      out.push_back({g, r.objective, warm, r.converged});
    } catch (const ProfileError&) {
      throw;
    } catch (const std::exception& e) {
      throw ProfileError(g, e.what());
    }
  }
  return out;
}

}  // namespace mcmle
