#pragma once

// Plug-in estimates of J, V and W, the sandwich covariance
//   J^-1 (V/n + W/m) J^-1
// of the Monte Carlo MLE, standard errors and confidence ellipsoids.

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mcmle/engine.hpp"
#include "mcmle/errors.hpp"
#include "mcmle/parallel.hpp"
#include "mcmle/types.hpp"

namespace mcmle {

inline constexpr double kDefaultConditionCap = 1e12;

struct PlugInEstimates {
  Matrix J;
  Matrix V;
  Matrix W;
  double loglik = 0.0;
  Vector score;
};

namespace detail {

inline Matrix symmetrize(const Matrix& A) { return 0.5 * (A + A.transpose()); }

/// (m/n) diag(u) (S - 1 g^T): one record's contribution to the S-hat rows.
inline RowMatrix w_contribution(const RecordWorkspace& ws, const Vector& g, double scale) {
  const auto m = static_cast<Eigen::Index>(ws.u.size());
  const Eigen::Map<const Vector> u(ws.u.data(), m);
  RowMatrix c = ws.scores.rowwise() - g.transpose();
  c = (scale * u).asDiagonal() * c;
  return c;
}

}  // namespace detail

/// J-hat, V-hat and W-hat in one pass over the records (shared-sample
/// scheme). Records are processed in parallel blocks and accumulated in
/// record order.
template <MissingDataModel M>
PlugInEstimates plug_in_estimates(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                                  const MonteCarloSample& sample, EvalOptions opts = {}) {
  check_theta(model, theta);
  const auto eval = bind_evaluator(model, theta, sample);
  const auto d = static_cast<Eigen::Index>(model.theta_dim());
  const std::size_t n = data.size();
  const std::size_t m = sample.size();
  const double scale = static_cast<double>(m) / static_cast<double>(n);

  PlugInEstimates out;
  Matrix hess_sum = Matrix::Zero(d, d);
  Matrix outer_sum = Matrix::Zero(d, d);
  RowMatrix s_hat = RowMatrix::Zero(static_cast<Eigen::Index>(m), d);
  out.score = Vector::Zero(d);

  const std::size_t threads = std::max<std::size_t>(opts.threads, 1);
  const std::size_t block = 4 * threads;
  std::vector<RecordTerms> terms(block);
  std::vector<RowMatrix> contrib(block);
  for (std::size_t start = 0; start < n; start += block) {
    const std::size_t count = std::min(block, n - start);
    parallel_for(count, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
      RecordWorkspace ws;
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t j = start + k;
        terms[k] = record_terms(eval, data[j], m, Derivatives::hessian, ws, j);
        contrib[k] = detail::w_contribution(ws, terms[k].score, scale);
      }
    });
    for (std::size_t k = 0; k < count; ++k) {
      out.loglik += terms[k].log_marginal;
      out.score += terms[k].score;
      hess_sum += terms[k].hessian;
      outer_sum.noalias() += terms[k].score * terms[k].score.transpose();
      s_hat += contrib[k];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  out.J = detail::symmetrize(-inv_n * hess_sum);
  out.V = detail::symmetrize(inv_n * outer_sum);
  out.W = detail::symmetrize((s_hat.transpose() * s_hat) / static_cast<double>(m));
  return out;
}

/// J-hat = -(1/n) * Hessian of the Monte Carlo log likelihood.
template <MissingDataModel M>
Matrix estimate_J(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                  const MonteCarloSample& sample, EvalOptions opts = {}) {
  return detail::symmetrize(-mc_hessian(model, theta, data, sample, opts) / static_cast<double>(data.size()));
}

/// V-hat = (1/n) sum_j g_j g_j^T with g_j the per-record Monte Carlo score
/// (uncentered).
template <MissingDataModel M>
Matrix estimate_V(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                  const MonteCarloSample& sample, EvalOptions opts = {}) {
  const auto terms = all_record_terms(model, theta, data, sample, Derivatives::gradient, opts);
  const auto d = static_cast<Eigen::Index>(model.theta_dim());
  Matrix acc = Matrix::Zero(d, d);
  for (const auto& t : terms) acc.noalias() += t.score * t.score.transpose();
  return detail::symmetrize(acc / static_cast<double>(data.size()));
}

/// W-hat = (1/m) sum_i S_i S_i^T with S_i = (1/n) sum_j m u_ij (s_ij - g_j).
template <MissingDataModel M>
Matrix estimate_W(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                  const MonteCarloSample& sample) {
  check_theta(model, theta);
  const auto eval = bind_evaluator(model, theta, sample);
  const std::size_t m = sample.size();
  const double scale = static_cast<double>(m) / static_cast<double>(data.size());
  RowMatrix s_hat = RowMatrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(model.theta_dim()));
  RecordWorkspace ws;
  for (std::size_t j = 0; j < data.size(); ++j) {
    const RecordTerms t = record_terms(eval, data[j], m, Derivatives::gradient, ws, j);
    s_hat += detail::w_contribution(ws, t.score, scale);
  }
  return detail::symmetrize((s_hat.transpose() * s_hat) / static_cast<double>(m));
}

/// The S-hat rows themselves (m x d); their column means vanish identically.
template <MissingDataModel M>
RowMatrix s_hat_rows(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                     const MonteCarloSample& sample) {
  const auto eval = bind_evaluator(model, theta, sample);
  const std::size_t m = sample.size();
  const double scale = static_cast<double>(m) / static_cast<double>(data.size());
  RowMatrix s_hat = RowMatrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(model.theta_dim()));
  RecordWorkspace ws;
  for (std::size_t j = 0; j < data.size(); ++j) {
    const RecordTerms t = record_terms(eval, data[j], m, Derivatives::gradient, ws, j);
    s_hat += detail::w_contribution(ws, t.score, scale);
  }
  return s_hat;
}

/// Plug-in estimates under the fresh-sample scheme (one sample per record).
/// W here estimates W-tilde = Q var_h of the conditional-score ratio:
/// (1/n) sum_j m sum_i u_ij^2 (s_ij - g_j)(s_ij - g_j)^T.
template <MissingDataModel M>
PlugInEstimates plug_in_estimates_fresh(const M& model, const Vector& theta,
                                        const ObservedData<typename M::Record>& data,
                                        const std::vector<MonteCarloSample>& samples) {
  check_theta(model, theta);
  const auto d = static_cast<Eigen::Index>(model.theta_dim());
  PlugInEstimates out;
  out.score = Vector::Zero(d);
  Matrix hess_sum = Matrix::Zero(d, d);
  Matrix outer_sum = Matrix::Zero(d, d);
  Matrix w_sum = Matrix::Zero(d, d);
  RecordWorkspace ws;
  for (std::size_t j = 0; j < data.size(); ++j) {
    const auto eval = bind_evaluator(model, theta, samples[j]);
    const RecordTerms t = record_terms(eval, data[j], samples[j].size(), Derivatives::hessian, ws, j);
    out.loglik += t.log_marginal;
    out.score += t.score;
    hess_sum += t.hessian;
    outer_sum.noalias() += t.score * t.score.transpose();
    const RowMatrix c = detail::w_contribution(ws, t.score, 1.0);
    w_sum.noalias() += static_cast<double>(samples[j].size()) * (c.transpose() * c);
  }
  const double inv_n = 1.0 / static_cast<double>(data.size());
  out.J = detail::symmetrize(-inv_n * hess_sum);
  out.V = detail::symmetrize(inv_n * outer_sum);
  out.W = detail::symmetrize(inv_n * w_sum);
  return out;
}

/// Symmetric eigendecomposition with the conditioning check applied to J.
/// Throws RidgeError when |lambda|_max / |lambda|_min exceeds `cap`.
inline Eigen::SelfAdjointEigenSolver<Matrix> checked_eigen(const Matrix& J, double cap) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(detail::symmetrize(J));
  if (eig.info() != Eigen::Success) throw RidgeError(0.0, std::numeric_limits<double>::infinity());
  const Vector abs_vals = eig.eigenvalues().cwiseAbs();
  const double lo = abs_vals.minCoeff();
  const double hi = abs_vals.maxCoeff();
  const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (!(cond <= cap)) throw RidgeError(eig.eigenvalues().minCoeff(), cond);
  return eig;
}

/// J^-1 (V/n + W/m) J^-1 computed from the eigendecomposition of J.
inline Matrix sandwich_vcov(const Matrix& J, const Matrix& V, const Matrix& W, double n, double m,
                            double cond_cap = kDefaultConditionCap) {
  if (!(n > 0.0) || !(m > 0.0)) throw InvalidInput("sample sizes must be positive");
  const auto eig = checked_eigen(J, cond_cap);
  const Matrix& Q = eig.eigenvectors();
  const Vector inv = eig.eigenvalues().cwiseInverse();
  const Matrix middle = V / n + W / m;
  const Matrix core = inv.asDiagonal() * (Q.transpose() * middle * Q) * inv.asDiagonal();
  return detail::symmetrize(Q * core * Q.transpose());
}

/// m -> infinity limit: J^-1 V J^-1 / n.
inline Matrix sandwich_vcov(const Matrix& J, const Matrix& V, double n, double cond_cap = kDefaultConditionCap) {
  return sandwich_vcov(J, V, Matrix::Zero(J.rows(), J.cols()), n, 1.0, cond_cap);
}

struct InferenceReport {
  Matrix J_hat;
  Matrix V_hat;
  Matrix W_hat;
  std::optional<Matrix> vcov;  // absent when J-hat is ill-conditioned
  Vector se;
  std::size_t m = 0;
  std::size_t n = 0;
  ParamVector theta_ref;
  std::optional<std::string> ridge_warning;
};

/// Labeled standard errors sqrt(diag(vcov)).
inline std::vector<std::pair<std::string, double>> standard_errors(const Matrix& vcov, const ParamLayout& layout) {
  if (vcov.rows() != vcov.cols() || static_cast<std::size_t>(vcov.rows()) != layout.size())
    throw InvalidInput("covariance matrix does not match the parameter layout");
  const auto labels = layout.labels();
  std::vector<std::pair<std::string, double>> out;
  for (Eigen::Index k = 0; k < vcov.rows(); ++k) {
    const double v = vcov(k, k);
    if (!(v >= 0.0) || !std::isfinite(v))
      throw Error("covariance diagonal entry for " + labels[static_cast<std::size_t>(k)] +
                  " is negative or not finite");
    out.emplace_back(labels[static_cast<std::size_t>(k)], std::sqrt(v));
  }
  return out;
}

inline std::vector<std::pair<std::string, double>> standard_errors(const InferenceReport& report) {
  if (!report.vcov) throw Error("no covariance available: " + report.ridge_warning.value_or("unknown reason"));
  return standard_errors(*report.vcov, *report.theta_ref.layout);
}

/// Plug-in inference at theta (usually the MCMLE).
template <MissingDataModel M>
InferenceReport infer(const M& model, const ParamVector& theta, const ObservedData<typename M::Record>& data,
                      const MonteCarloSample& sample, EvalOptions opts = {}, double cond_cap = kDefaultConditionCap) {
  const PlugInEstimates est = plug_in_estimates(model, theta.values, data, sample, opts);
  InferenceReport rep;
  rep.J_hat = est.J;
  rep.V_hat = est.V;
  rep.W_hat = est.W;
  rep.m = sample.size();
  rep.n = data.size();
  rep.theta_ref = theta;
  try {
    rep.vcov = sandwich_vcov(est.J, est.V, est.W, static_cast<double>(rep.n), static_cast<double>(rep.m), cond_cap);
    rep.se = rep.vcov->diagonal().cwiseMax(0.0).cwiseSqrt();
  } catch (const RidgeError& e) {
    rep.ridge_warning = e.what();
  }
  return rep;
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
inline double chi_square_quantile(double level, std::size_t dof) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidInput("confidence level must lie in (0, 1)");
  if (dof == 0) throw InvalidInput("degrees of freedom must be positive");
  if (dof == 2) return -2.0 * std::log1p(-level);
  return 2.0 * boost::math::gamma_p_inv(0.5 * static_cast<double>(dof), level);
}

/// {theta : (theta - center)^T vcov^-1 (theta - center) <= chi2}.
struct Ellipsoid {
  Vector center;
  Matrix vcov;
  Matrix axes;    // columns: principal directions
  Vector radii;   // semi-axis lengths along `axes`
  double level = 0.0;
  double chi2 = 0.0;
};

inline Ellipsoid confidence_ellipsoid(const Matrix& vcov, const Vector& center, double level) {
  if (vcov.rows() != vcov.cols() || vcov.rows() != center.size())
    throw InvalidInput("covariance and center dimensions differ");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(detail::symmetrize(vcov));
  if (eig.info() != Eigen::Success || !(eig.eigenvalues().minCoeff() > 0.0))
    throw InvalidInput("confidence region covariance must be positive definite");
  Ellipsoid e;
  e.center = center;
  e.vcov = detail::symmetrize(vcov);
  e.level = level;
  e.chi2 = chi_square_quantile(level, static_cast<std::size_t>(center.size()));
  e.axes = eig.eigenvectors();
  e.radii = (eig.eigenvalues() * e.chi2).cwiseSqrt();
  return e;
}

inline Ellipsoid confidence_ellipse(const Matrix& vcov2, const Vector& center, double level) {
  if (vcov2.rows() != 2 || center.size() != 2) throw InvalidInput("confidence ellipse is two-dimensional");
  return confidence_ellipsoid(vcov2, center, level);
}

inline double quadratic_form(const Ellipsoid& e, const Vector& point) {
  const Vector diff = point - e.center;
  return diff.dot(e.vcov.llt().solve(diff));
}

inline bool ellipse_contains(const Ellipsoid& e, const Vector& point) { return quadratic_form(e, point) <= e.chi2; }

}  // namespace mcmle
