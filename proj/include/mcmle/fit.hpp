#pragma once

// End-to-end Monte Carlo MLE: objective construction, maximization and
// plug-in inference at the maximizer.

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "mcmle/engine.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/infer.hpp"
#include "mcmle/optim.hpp"
#include "mcmle/types.hpp"

namespace mcmle {

/// theta -> (l_{m,n}(theta), score) for one fixed sample.
template <MissingDataModel M>
Objective mc_objective(const M& model, const ObservedData<typename M::Record>& data, const MonteCarloSample& sample,
                       EvalOptions eval = {}) {
  return [&model, &data, &sample, eval](const Vector& theta) {
    Evaluation ev = evaluate(model, theta, data, sample, Derivatives::gradient, eval);
    return ValueGrad{ev.loglik, std::move(ev.score)};
  };
}

/// Same for the fresh-sample scheme (one sample per record).
template <MissingDataModel M>
Objective mc_objective_fresh(const M& model, const ObservedData<typename M::Record>& data,
                             const std::vector<MonteCarloSample>& samples, EvalOptions eval = {}) {
  return [&model, &data, &samples, eval](const Vector& theta) {
    Evaluation ev = evaluate_fresh(model, theta, data, samples, Derivatives::gradient, eval);
    return ValueGrad{ev.loglik, std::move(ev.score)};
  };
}

struct FitOptions {
  OptOptions opt;
  EvalOptions eval;
  double cond_cap = kDefaultConditionCap;
};

struct FitResult {
  OptResult opt;
  InferenceReport inference;
};

/// Maximizes l_{m,n} over theta with the sample held fixed, then computes
/// J-hat, V-hat, W-hat and the sandwich covariance at the maximizer.
template <MissingDataModel M>
FitResult fit_mcmle(const M& model, const ObservedData<typename M::Record>& data, const MonteCarloSample& sample,
                    const ParamVector& start, const FitOptions& opts = {}) {
  FitResult res;
  res.opt = maximize(mc_objective(model, data, sample, opts.eval), start, opts.opt);
  res.inference = infer(model, res.opt.theta_hat, data, sample, opts.eval, opts.cond_cap);
  return res;
}

template <MissingDataModel M>
FitResult fit_mcmle_fresh(const M& model, const ObservedData<typename M::Record>& data,
                          const std::vector<MonteCarloSample>& samples, const ParamVector& start,
                          const FitOptions& opts = {}) {
  FitResult res;
  res.opt = maximize(mc_objective_fresh(model, data, samples, opts.eval), start, opts.opt);
  const PlugInEstimates est = plug_in_estimates_fresh(model, res.opt.theta_hat.values, data, samples);
  auto& inf = res.inference;
  inf.J_hat = est.J;
  inf.V_hat = est.V;
  inf.W_hat = est.W;
  inf.n = data.size();
  inf.m = samples.empty() ? 0 : samples.front().size();
  inf.theta_ref = res.opt.theta_hat;
  // Each record averages over its own m draws, so the Monte Carlo term of
  // the mean score has variance W-tilde / (n m).
  try {
    inf.vcov = sandwich_vcov(est.J, est.V, est.W, static_cast<double>(inf.n),
                             static_cast<double>(inf.n) * static_cast<double>(inf.m), opts.cond_cap);
    inf.se = inf.vcov->diagonal().cwiseMax(0.0).cwiseSqrt();
  } catch (const RidgeError& e) {
    inf.ridge_warning = e.what();
  }
  return res;
}

namespace glmm {

/// Replaces each delta by |delta| in a fit and transforms J, V, W and the
/// covariance by the matching sign flips.
inline void canonicalize(const GlmmDesign& design, FitResult& fit) {
  const auto d = static_cast<Eigen::Index>(design.theta_dim());
  Vector sign = Vector::Ones(d);
  auto& theta = fit.opt.theta_hat.values;
  for (Eigen::Index k = static_cast<Eigen::Index>(design.p()); k < d; ++k)
    if (theta[k] < 0.0) sign[k] = -1.0;
  if ((sign.array() > 0.0).all()) return;
  const auto D = sign.asDiagonal();
  theta = D * theta;
  fit.opt.gradient = D * fit.opt.gradient;
  // Inference may be absent (not computed); flip only what is there.
  auto& inf = fit.inference;
  auto flip = [&](Matrix& A) {
    if (A.rows() == d) A = D * A * D;
  };
  if (inf.theta_ref.values.size() == d) inf.theta_ref.values = D * inf.theta_ref.values;
  flip(inf.J_hat);
  flip(inf.V_hat);
  flip(inf.W_hat);
  if (inf.vcov) flip(*inf.vcov);
}

}  // namespace glmm

}  // namespace mcmle
