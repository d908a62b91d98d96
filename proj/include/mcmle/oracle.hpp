#pragma once

// Exact reference computations for GLMMs with a single random effect.
//
// The observed-data likelihood integrates over one standard normal b, so
// Gauss-Hermite quadrature evaluates it to near machine precision. For
// small T the response space {0,1}^T can be enumerated, which gives the
// expected information J, the score variance V, the Monte Carlo variance W
// and the Kullback-Leibler information exactly (up to quadrature error).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mcmle/engine.hpp"
#include "mcmle/errors.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/optim.hpp"
#include "mcmle/types.hpp"

namespace mcmle::oracle {

/// Nodes and weights for integrals against the standard normal density.
struct QuadratureRule {
  std::size_t order = 0;
  Vector nodes;
  Vector weights;
};

/// Gauss-Hermite rule with probabilists' weighting. Nodes start from the
/// eigenvalues of the Jacobi matrix and are polished by Newton steps on the
/// orthonormal Hermite polynomial; weights are the Christoffel numbers
/// 1 / sum_k q_k(x)^2.
inline QuadratureRule gauss_hermite(std::size_t order) {
  if (order == 0) throw InvalidInput("quadrature order must be positive");
  const auto N = static_cast<Eigen::Index>(order);
  QuadratureRule rule;
  rule.order = order;
  rule.nodes.resize(N);
  rule.weights.resize(N);
  if (order == 1) {
    rule.nodes[0] = 0.0;
    rule.weights[0] = 1.0;
    return rule;
  }

  Vector diag = Vector::Zero(N);
  Vector sub(N - 1);
  for (Eigen::Index k = 0; k < N - 1; ++k) sub[k] = std::sqrt(static_cast<double>(k + 1));
  Eigen::SelfAdjointEigenSolver<Matrix> eig;
  eig.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);

  // q_0..q_{N-1} at x; returns (q_N(x), sum_{k<N} q_k(x)^2, q_{N-1}(x)).
  auto evaluate = [order](double x, double& qn, double& sumsq, double& qn1) {
    double prev = 0.0;
    double cur = 1.0;
    sumsq = 1.0;
    for (std::size_t k = 0; k + 1 < order + 1; ++k) {
      const double next = (x * cur - std::sqrt(static_cast<double>(k)) * prev) / std::sqrt(static_cast<double>(k + 1));
      prev = cur;
      cur = next;
      if (k + 1 < order) sumsq += cur * cur;
    }
    qn = cur;
    qn1 = prev;
  };

  const double sqrt_n = std::sqrt(static_cast<double>(order));
  for (Eigen::Index t = 0; t < N; ++t) {
    double x = eig.eigenvalues()[t];
    double qn, sumsq, qn1;
    for (int it = 0; it < 8; ++it) {
      evaluate(x, qn, sumsq, qn1);
      const double step = qn / (sqrt_n * qn1);
      x -= step;
      if (std::abs(step) <= 1e-16 * std::max(1.0, std::abs(x))) break;
    }
    evaluate(x, qn, sumsq, qn1);
    rule.nodes[t] = x;
    rule.weights[t] = 1.0 / sumsq;
  }
  // Enforce exact symmetry about zero.
  for (Eigen::Index t = 0; t < N / 2; ++t) {
    const Eigen::Index s = N - 1 - t;
    const double x = 0.5 * (rule.nodes[s] - rule.nodes[t]);
    const double w = 0.5 * (rule.weights[s] + rule.weights[t]);
    rule.nodes[t] = -x;
    rule.nodes[s] = x;
    rule.weights[t] = w;
    rule.weights[s] = w;
  }
  if (N % 2 == 1) rule.nodes[N / 2] = 0.0;
  return rule;
}

namespace detail {

inline void require_one_effect(const glmm::GlmmDesign& design) {
  if (design.q() != 1)
    throw InvalidInput("quadrature oracle requires exactly one random effect (q = 1); design has q = " +
                       std::to_string(design.q()));
}

/// Per-node quantities of a fixed (unadapted) rule that do not depend on y:
/// rho(t, y) = y . eta_t - A_t and grad(t, y) = M_t^T y - M_t^T p_t.
struct NodeTable {
  Vector log_w;
  RowMatrix eta;               // N x T
  Vector log_norm;             // N
  RowMatrix design;  // (N d) x T: row t*d + c is column c of M_t
  RowMatrix mtp;     // N x d

  NodeTable(const glmm::GlmmDesign& dsg, const glmm::GlmmParams& params, const QuadratureRule& rule) {
    const auto N = static_cast<Eigen::Index>(rule.order);
    const auto T = static_cast<Eigen::Index>(dsg.T());
    const auto d = static_cast<Eigen::Index>(dsg.theta_dim());
    log_w = rule.weights.array().log();
    eta.resize(N, T);
    log_norm.resize(N);
    mtp.resize(N, d);
    design.resize(N * d, T);
    for (Eigen::Index t = 0; t < N; ++t) {
      Vector b(1);
      b[0] = rule.nodes[t];
      const Vector e = glmm::linear_predictor(dsg, params, b);
      eta.row(t) = e.transpose();
      double a = 0.0;
      Vector pr(T);
      for (Eigen::Index k = 0; k < T; ++k) {
        a += glmm::softplus(e[k]);
        pr[k] = glmm::logistic(e[k]);
      }
      log_norm[t] = a;
      Matrix M = glmm::augmented_design(dsg, b);
      mtp.row(t) = (M.transpose() * pr).transpose();
      design.middleRows(t * d, d) = M.transpose();
    }
  }

  std::size_t size() const { return static_cast<std::size_t>(eta.rows()); }

  /// Row t: grad rho(x_t, y).
  RowMatrix grads(const Vector& y) const {
    const Vector flat = design * y;
    return Eigen::Map<const RowMatrix>(flat.data(), mtp.rows(), mtp.cols()) - mtp;
  }
};

struct Marginal {
  double log_f = 0.0;
  Vector score;
  Matrix hessian;
};

/// f(y) = int f(y | b) phi(b) db by Gauss-Hermite quadrature centred at the
/// mode of the integrand and scaled by its curvature there. With
/// eta = X beta + c b (c = Z delta for the single effect), the logistic
/// poles sit at distance pi / |c| from the real axis, which makes the
/// unadapted rule converge slowly for large scale parameters.
class AdaptiveMarginal {
 public:
  AdaptiveMarginal(const glmm::GlmmDesign& dsg, const glmm::GlmmParams& params, const QuadratureRule& rule)
      : X_(dsg.X()), rule_(rule) {
    glmm::detail::check_params(dsg, params);
    fixed_ = dsg.X() * params.beta;
    z_ = dsg.Z().col(0);
    c_ = z_ * params.delta[static_cast<Eigen::Index>(dsg.delta_map()[0])];
    log_w_ = rule.weights.array().log();
    c_abs_sum_ = c_.cwiseAbs().sum();
  }

  Marginal operator()(const Vector& y, Derivatives der) const {
    const auto N = static_cast<Eigen::Index>(rule_.order);
    const auto T = fixed_.size();
    const double mode = find_mode(y);
    double curv = 1.0;
    for (Eigen::Index k = 0; k < T; ++k) {
      const double p = glmm::logistic(fixed_[k] + c_[k] * mode);
      curv += c_[k] * c_[k] * p * (1.0 - p);
    }
    const double sd = 1.0 / std::sqrt(curv);

    // One exp and one log1p per (node, position); P keeps the success
    // probabilities for the derivative passes.
    Vector a(N), b(N);
    RowMatrix P(N, T);
    for (Eigen::Index t = 0; t < N; ++t) {
      const double z = rule_.nodes[t];
      b[t] = mode + sd * z;
      double lc = 0.0;
      for (Eigen::Index k = 0; k < T; ++k) {
        const double eta = fixed_[k] + c_[k] * b[t];
        const double e = std::exp(-std::abs(eta));
        lc += y[k] * eta - (std::max(eta, 0.0) + std::log1p(e));
        P(t, k) = eta >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      }
      a[t] = log_w_[t] + 0.5 * (z * z - b[t] * b[t]) + lc;
    }
    const double top = a.maxCoeff();
    Vector u = (a.array() - top).exp();
    const double sum = u.sum();
    u /= sum;
    Marginal out;
    out.log_f = top + std::log(sum) + std::log(sd);
    if (der == Derivatives::none) return out;

    const Eigen::Index p = X_.cols();
    const Eigen::Index d = p + 1;
    RowMatrix S(N, d);
    Vector resid(T);
    for (Eigen::Index t = 0; t < N; ++t) {
      resid = y - P.row(t).transpose();
      S.row(t).head(p) = (X_.transpose() * resid).transpose();
      S(t, p) = b[t] * z_.dot(resid);
    }
    out.score = S.transpose() * u;
    if (der == Derivatives::gradient) return out;

    // sum_t u_t (H_t + c_t c_t^T), H_t = -M_t^T W_t M_t with M_t = [X | z b_t].
    out.hessian = Matrix::Zero(d, d);
    Vector uw = Vector::Zero(T);
    Vector uwb = Vector::Zero(T);
    Vector uwbb = Vector::Zero(T);
    for (Eigen::Index t = 0; t < N; ++t) {
      for (Eigen::Index k = 0; k < T; ++k) {
        const double w = u[t] * P(t, k) * (1.0 - P(t, k));
        uw[k] += w;
        uwb[k] += w * b[t];
        uwbb[k] += w * b[t] * b[t];
      }
      const Vector c = S.row(t).transpose() - out.score;
      out.hessian.noalias() += u[t] * (c * c.transpose());
    }
    out.hessian.topLeftCorner(p, p) -= X_.transpose() * uw.asDiagonal() * X_;
    const Vector cross = X_.transpose() * uwb.cwiseProduct(z_);
    out.hessian.topRightCorner(p, 1) -= cross;
    out.hessian.bottomLeftCorner(1, p) -= cross.transpose();
    out.hessian(p, p) -= z_.dot(uwbb.cwiseProduct(z_));
    return out;
  }

 private:
  // Root of g(b) = sum_k c_k (y_k - p_k(b)) - b, which is strictly
  // decreasing and bracketed by +-sum |c_k|. Newton with bisection fallback.
  double find_mode(const Vector& y) const {
    double lo = -c_abs_sum_ - 1e-300, hi = c_abs_sum_ + 1e-300;
    double b = 0.0;
    for (int it = 0; it < 200; ++it) {
      double g = -b, dg = -1.0;
      for (Eigen::Index k = 0; k < fixed_.size(); ++k) {
        const double p = glmm::logistic(fixed_[k] + c_[k] * b);
        g += c_[k] * (y[k] - p);
        dg -= c_[k] * c_[k] * p * (1.0 - p);
      }
      if (g == 0.0) return b;
      if (g > 0.0) lo = b; else hi = b;
      double next = b - g / dg;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - b) <= 1e-15 * std::max(1.0, std::abs(b))) return next;
      b = next;
    }
    return b;
  }

  Matrix X_;
  QuadratureRule rule_;
  Vector fixed_;
  Vector z_;
  Vector c_;
  Vector log_w_;
  double c_abs_sum_ = 0.0;
};

}  // namespace detail

struct ExactEvaluation {
  double loglik = 0.0;
  Vector score;
  Matrix hessian;
};

/// Exact observed-data log likelihood sum_j log f_theta(Y_j) by quadrature,
/// with optional analytic derivatives.
inline ExactEvaluation gh_evaluate(const glmm::GlmmDesign& design, const Vector& theta,
                                   const ObservedData<Vector>& data, const QuadratureRule& rule,
                                   Derivatives der = Derivatives::none) {
  detail::require_one_effect(design);
  const auto params = glmm::GlmmParams::from_theta(design, theta);
  const detail::AdaptiveMarginal marginal(design, params, rule);
  const auto d = static_cast<Eigen::Index>(design.theta_dim());
  ExactEvaluation out;
  if (der != Derivatives::none) out.score = Vector::Zero(d);
  if (der == Derivatives::hessian) out.hessian = Matrix::Zero(d, d);
  for (const auto& y : data) {
    glmm::detail::check_response(design, y);
    const auto mg = marginal(y, der);
    out.loglik += mg.log_f;
    if (der != Derivatives::none) out.score += mg.score;
    if (der == Derivatives::hessian) out.hessian += mg.hessian;
  }
  return out;
}

inline double gh_loglik(const glmm::GlmmDesign& design, const glmm::GlmmParams& params,
                        const ObservedData<Vector>& data, const QuadratureRule& rule) {
  return gh_evaluate(design, params.theta(), data, rule).loglik;
}

/// Exact MLE by maximizing the quadrature log likelihood.
inline OptResult gh_mle(const glmm::GlmmDesign& design, const ObservedData<Vector>& data, const QuadratureRule& rule,
                        const Vector& theta0, const OptOptions& opts = {}) {
  detail::require_one_effect(design);
  const Objective obj = [&](const Vector& theta) {
    auto ev = gh_evaluate(design, theta, data, rule, Derivatives::gradient);
    return ValueGrad{ev.loglik, std::move(ev.score)};
  };
  return maximize(obj, ParamVector(theta0, design.layout()), opts);
}

/// Success probability of each response position, integrated over b.
inline Vector marginal_success_probabilities(const glmm::GlmmDesign& design, const glmm::GlmmParams& params,
                                             const QuadratureRule& rule) {
  detail::require_one_effect(design);
  Vector out = Vector::Zero(static_cast<Eigen::Index>(design.T()));
  for (Eigen::Index t = 0; t < rule.nodes.size(); ++t) {
    Vector b(1);
    b[0] = rule.nodes[t];
    const Vector eta = glmm::linear_predictor(design, params, b);
    out += rule.weights[t] * eta.unaryExpr([](double e) { return glmm::logistic(e); });
  }
  return out;
}

struct ExactOptions {
  std::size_t inner_order = 64;
  std::size_t outer_order = 128;
  std::size_t max_T = 12;
  /// Recompute at doubled orders and fail if results differ by more than
  /// `refinement_tol` (relative Frobenius norm).
  bool check_refinement = true;
  double refinement_tol = 1e-6;
};

struct ExactInfo {
  Matrix J;
  Matrix V;
  Matrix W;
  double total_probability = 0.0;
};

namespace detail {

inline void require_enumerable(const glmm::GlmmDesign& design, const ExactOptions& opts) {
  require_one_effect(design);
  if (design.T() > opts.max_T || design.T() > 30)
    throw InvalidInput("response space 2^" + std::to_string(design.T()) + " is too large to enumerate (T cap " +
                       std::to_string(opts.max_T) + ")");
}

inline Vector bits_to_response(std::uint64_t bits, std::size_t T) {
  Vector y(static_cast<Eigen::Index>(T));
  for (std::size_t k = 0; k < T; ++k) y[static_cast<Eigen::Index>(k)] = static_cast<double>((bits >> k) & 1U);
  return y;
}

/// J, V, W at params with Q = f_params (correct specification).
inline ExactInfo compute_jvw(const glmm::GlmmDesign& design, const glmm::GlmmParams& params,
                             const QuadratureRule& inner, const QuadratureRule& outer) {
  const AdaptiveMarginal marginal_at(design, params, inner);
  const NodeTable out_nodes(design, params, outer);
  const auto d = static_cast<Eigen::Index>(design.theta_dim());
  const auto n_out = static_cast<Eigen::Index>(outer.order);
  const std::size_t T = design.T();

  ExactInfo info;
  info.J = Matrix::Zero(d, d);
  Matrix second = Matrix::Zero(d, d);
  Vector mean = Vector::Zero(d);
  // A(x_o) = sum_y f(y | x_o) (grad rho(x_o, y) - score(y)), one row per outer node.
  RowMatrix A = RowMatrix::Zero(n_out, d);

  const std::uint64_t count = std::uint64_t{1} << T;
  for (std::uint64_t bits = 0; bits < count; ++bits) {
    const Vector y = bits_to_response(bits, T);
    const Marginal mg = marginal_at(y, Derivatives::hessian);
    const double f = std::exp(mg.log_f);
    info.total_probability += f;
    info.J -= f * mg.hessian;
    second.noalias() += f * (mg.score * mg.score.transpose());
    mean += f * mg.score;

    const Vector cond = (out_nodes.eta * y - out_nodes.log_norm).array().exp();
    A.noalias() += cond.asDiagonal() * (out_nodes.grads(y).rowwise() - mg.score.transpose());
  }
  info.V = second - mean * mean.transpose();
  const Vector a_mean = A.transpose() * outer.weights;
  info.W = A.transpose() * outer.weights.asDiagonal() * A - a_mean * a_mean.transpose();
  info.J = 0.5 * (info.J + info.J.transpose()).eval();
  info.V = 0.5 * (info.V + info.V.transpose()).eval();
  info.W = 0.5 * (info.W + info.W.transpose()).eval();
  return info;
}

inline double rel_diff(const Matrix& a, const Matrix& b) {
  const double scale = std::max(b.norm(), std::numeric_limits<double>::min());
  return (a - b).norm() / scale;
}

}  // namespace detail

/// Exact J = -Q grad^2 log f(Y), V = var_Q grad log f(Y) and
/// W = var_P Q grad f(X|Y)/h(X) under correct specification, by enumerating
/// {0,1}^T and integrating over b with Gauss-Hermite rules.
inline ExactInfo exact_JVW(const glmm::GlmmDesign& design, const glmm::GlmmParams& params,
                           const ExactOptions& opts = {}) {
  detail::require_enumerable(design, opts);
  const ExactInfo info =
      detail::compute_jvw(design, params, gauss_hermite(opts.inner_order), gauss_hermite(opts.outer_order));
  if (opts.check_refinement) {
    const ExactInfo fine =
        detail::compute_jvw(design, params, gauss_hermite(2 * opts.inner_order), gauss_hermite(2 * opts.outer_order));
    const double worst = std::max({detail::rel_diff(info.J, fine.J), detail::rel_diff(info.V, fine.V),
                                   detail::rel_diff(info.W, fine.W)});
    if (!(worst <= opts.refinement_tol))
      throw Error("quadrature did not converge: order doubling changed J/V/W by " + std::to_string(worst));
  }
  return info;
}

/// K(theta) = sum_y f_true(y) [log f_true(y) - log f_theta(y)].
inline double kl_info(const glmm::GlmmDesign& design, const glmm::GlmmParams& params_true,
                      const glmm::GlmmParams& params, const ExactOptions& opts = {}) {
  detail::require_enumerable(design, opts);
  const QuadratureRule rule = gauss_hermite(opts.inner_order);
  const detail::AdaptiveMarginal truth(design, params_true, rule);
  const detail::AdaptiveMarginal model(design, params, rule);
  double k = 0.0;
  const std::uint64_t count = std::uint64_t{1} << design.T();
  for (std::uint64_t bits = 0; bits < count; ++bits) {
    const Vector y = detail::bits_to_response(bits, design.T());
    const double lf0 = truth(y, Derivatives::none).log_f;
    const double lf = model(y, Derivatives::none).log_f;
    k += std::exp(lf0) * (lf0 - lf);
  }
  return k;
}

}  // namespace mcmle::oracle
