#pragma once

// Monte Carlo likelihood engine.
//
// Given a missing-data model with joint density f_theta(x, y), an importance
// density h, an i.i.d. sample X_1..X_m from h and observed records Y_1..Y_n,
// the engine evaluates
//
//   log f_{theta,m}(y) = log (1/m) sum_i f_theta(X_i, y) / h(X_i)
//   l_{m,n}(theta)     = sum_j log f_{theta,m}(Y_j)
//
// and the exact first and second theta-derivatives of l_{m,n} for the fixed
// sample. Everything is computed in the log domain from the log ratios
// rho_i = log f_theta(X_i, y) - log h(X_i) through normalized weights
// u_i = softmax(rho)_i.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcmle/errors.hpp"
#include "mcmle/parallel.hpp"
#include "mcmle/rng.hpp"
#include "mcmle/types.hpp"

namespace mcmle {

/// Capability bundle required from a missing-data model. `log_ratio` is
/// rho(theta, x, y) = log f_theta(x, y) - log h(x); its gradient and Hessian
/// are taken with respect to theta (h does not depend on theta).
template <class M>
concept MissingDataModel =
    requires(const M& model, const Vector& theta, std::span<const double> x,
             const typename M::Record& y, Xoshiro256ss& rng, std::span<double> out) {
      typename M::Record;
      { model.theta_dim() } -> std::convertible_to<std::size_t>;
      { model.missing_dim() } -> std::convertible_to<std::size_t>;
      { model.log_ratio(theta, x, y) } -> std::convertible_to<double>;
      { model.log_ratio_grad(theta, x, y) } -> std::convertible_to<Vector>;
      { model.log_ratio_hess(theta, x, y) } -> std::convertible_to<Matrix>;
      model.sample_importance(rng, out);
    };

/// Immutable Monte Carlo sample: m points of dimension `dim`, stored row-major.
class MonteCarloSample {
 public:
  MonteCarloSample(std::vector<double> points, std::size_t m, std::size_t dim, std::uint64_t seed,
                   std::string generator_id)
      : points_(std::move(points)), m_(m), dim_(dim), seed_(seed), generator_id_(std::move(generator_id)) {
    if (m_ == 0) throw InvalidInput("Monte Carlo sample size must be positive");
    if (points_.size() != m_ * dim_) throw InvalidInput("Monte Carlo sample storage does not match m * dim");
  }

  std::size_t size() const noexcept { return m_; }
  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& generator_id() const noexcept { return generator_id_; }

  std::span<const double> point(std::size_t i) const noexcept {
    return std::span<const double>(points_).subspan(i * dim_, dim_);
  }
  const std::vector<double>& data() const noexcept { return points_; }

  Eigen::Map<const RowMatrix> matrix() const noexcept {
    return Eigen::Map<const RowMatrix>(points_.data(), static_cast<Eigen::Index>(m_),
                                       static_cast<Eigen::Index>(dim_));
  }

 private:
  std::vector<double> points_;
  std::size_t m_;
  std::size_t dim_;
  std::uint64_t seed_;
  std::string generator_id_;
};

/// Observed records Y_1..Y_n.
template <class Record>
class ObservedData {
 public:
  explicit ObservedData(std::vector<Record> records) : records_(std::move(records)) {
    if (records_.empty()) throw InvalidInput("observed data must contain at least one record");
  }

  std::size_t size() const noexcept { return records_.size(); }
  const Record& operator[](std::size_t j) const noexcept { return records_[j]; }
  const std::vector<Record>& records() const noexcept { return records_; }
  auto begin() const noexcept { return records_.begin(); }
  auto end() const noexcept { return records_.end(); }

 private:
  std::vector<Record> records_;
};

/// A model bound to (theta, sample): evaluates log ratios, their gradients
/// and the weighted sum of their Hessians for all m sample points at once.
template <class E, class Record>
concept RatioEvaluator = requires(const E& e, const Record& y, std::span<double> rho, RowMatrix& scores,
                                  std::span<const double> u) {
  e.log_ratios(y, rho);
  e.scores(y, scores);
  { e.weighted_hessian(y, u) } -> std::convertible_to<Matrix>;
};

/// Fallback evaluator that calls the model's pointwise functions.
template <MissingDataModel M>
class PointwiseEvaluator {
 public:
  PointwiseEvaluator(const M& model, const Vector& theta, const MonteCarloSample& sample)
      : model_(&model), theta_(theta), sample_(&sample) {}

  void log_ratios(const typename M::Record& y, std::span<double> rho) const {
    for (std::size_t i = 0; i < sample_->size(); ++i) rho[i] = model_->log_ratio(theta_, sample_->point(i), y);
  }

  void scores(const typename M::Record& y, RowMatrix& out) const {
    out.resize(static_cast<Eigen::Index>(sample_->size()), theta_.size());
    for (std::size_t i = 0; i < sample_->size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = model_->log_ratio_grad(theta_, sample_->point(i), y).transpose();
  }

  Matrix weighted_hessian(const typename M::Record& y, std::span<const double> u) const {
    Matrix acc = Matrix::Zero(theta_.size(), theta_.size());
    for (std::size_t i = 0; i < sample_->size(); ++i)
      if (u[i] != 0.0) acc += u[i] * model_->log_ratio_hess(theta_, sample_->point(i), y);
    return acc;
  }

 private:
  const M* model_;
  Vector theta_;
  const MonteCarloSample* sample_;
};

/// Binds a model to (theta, sample), using the model's own batched
/// evaluator when it provides one.
template <MissingDataModel M>
auto bind_evaluator(const M& model, const Vector& theta, const MonteCarloSample& sample) {
  if constexpr (requires { model.bind(theta, sample); }) {
    return model.bind(theta, sample);
  } else {
    return PointwiseEvaluator<M>(model, theta, sample);
  }
}

template <MissingDataModel M>
void check_theta(const M& model, const Vector& theta) {
  if (static_cast<std::size_t>(theta.size()) != model.theta_dim())
    throw InvalidInput("theta has length " + std::to_string(theta.size()) + ", model expects " +
                       std::to_string(model.theta_dim()));
}

enum class Derivatives { none, gradient, hessian };

namespace detail {

/// log((1/m) sum exp(rho_i)) and the normalized weights u = softmax(rho).
/// Sequential summation in index order.
inline double log_mean_exp(std::span<const double> rho, std::span<double> u, std::optional<std::size_t> record) {
  double top = -std::numeric_limits<double>::infinity();
  for (double r : rho)
    if (r > top || std::isnan(r)) top = r;
  if (std::isnan(top)) {
    for (auto& w : u) w = std::numeric_limits<double>::quiet_NaN();
    return top;
  }
  if (top == -std::numeric_limits<double>::infinity()) throw AllImpossibleError(record);
  if (top == std::numeric_limits<double>::infinity()) {
    for (auto& w : u) w = std::numeric_limits<double>::quiet_NaN();
    return top;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < rho.size(); ++i) {
    u[i] = std::exp(rho[i] - top);
    sum += u[i];
  }
  const double inv = 1.0 / sum;
  for (auto& w : u) w *= inv;
  return top + std::log(sum) - std::log(static_cast<double>(rho.size()));
}

}  // namespace detail

/// Per-record contribution: log f_{theta,m}(y), its gradient and Hessian.
struct RecordTerms {
  double log_marginal = 0.0;
  Vector score;
  Matrix hessian;
};

/// Scratch buffers reused across records. After `record_terms` returns,
/// `u` holds the normalized weights and (when derivatives were requested)
/// `scores` holds the per-point gradients of rho for that record.
struct RecordWorkspace {
  std::vector<double> rho;
  std::vector<double> u;
  RowMatrix scores;
};

template <class Evaluator, class Record>
RecordTerms record_terms(const Evaluator& eval, const Record& y, std::size_t m, Derivatives der,
                         RecordWorkspace& ws, std::optional<std::size_t> record = std::nullopt) {
  ws.rho.resize(m);
  ws.u.resize(m);
  eval.log_ratios(y, ws.rho);
  RecordTerms out;
  out.log_marginal = detail::log_mean_exp(ws.rho, ws.u, record);
  if (der == Derivatives::none) return out;

  eval.scores(y, ws.scores);
  const Eigen::Map<const Vector> u(ws.u.data(), static_cast<Eigen::Index>(m));
  out.score = ws.scores.transpose() * u;
  if (der == Derivatives::gradient) return out;

  // sum_i u_i (H_i + s_i s_i^T) - g g^T, in centered form.
  const RowMatrix centered = ws.scores.rowwise() - out.score.transpose();
  out.hessian = eval.weighted_hessian(y, ws.u);
  out.hessian.noalias() += centered.transpose() * u.asDiagonal() * centered;
  out.hessian = 0.5 * (out.hessian + out.hessian.transpose()).eval();
  return out;
}

struct EvalOptions {
  std::size_t threads = 1;
};

/// Total Monte Carlo log likelihood with optional derivatives.
struct Evaluation {
  double loglik = 0.0;
  Vector score;
  Matrix hessian;
};

/// Draws m i.i.d. points from the model's importance density using
/// substream `stream` of `seed`.
template <MissingDataModel M>
MonteCarloSample draw_sample(const M& model, std::size_t m, std::uint64_t seed, std::uint64_t stream = 0) {
  if (m == 0) throw InvalidInput("Monte Carlo sample size m must be at least 1");
  const std::size_t dim = model.missing_dim();
  std::vector<double> points(m * dim);
  auto rng = make_stream(seed, stream);
  for (std::size_t i = 0; i < m; ++i)
    model.sample_importance(rng, std::span<double>(points).subspan(i * dim, dim));
  return MonteCarloSample(std::move(points), m, dim, seed, std::string(kGeneratorId));
}

template <MissingDataModel M>
double log_marginal_mc(const M& model, const Vector& theta, const typename M::Record& y,
                       const MonteCarloSample& sample) {
  check_theta(model, theta);
  const auto eval = bind_evaluator(model, theta, sample);
  RecordWorkspace ws;
  return record_terms(eval, y, sample.size(), Derivatives::none, ws).log_marginal;
}

/// Normalized importance weights u_i for one record.
template <MissingDataModel M>
Vector weights(const M& model, const Vector& theta, const typename M::Record& y, const MonteCarloSample& sample) {
  check_theta(model, theta);
  const auto eval = bind_evaluator(model, theta, sample);
  RecordWorkspace ws;
  record_terms(eval, y, sample.size(), Derivatives::none, ws);
  return Eigen::Map<const Vector>(ws.u.data(), static_cast<Eigen::Index>(ws.u.size()));
}

/// Per-record terms for every record, computed in parallel and returned in
/// record order.
template <MissingDataModel M>
std::vector<RecordTerms> all_record_terms(const M& model, const Vector& theta,
                                          const ObservedData<typename M::Record>& data,
                                          const MonteCarloSample& sample, Derivatives der, EvalOptions opts = {}) {
  check_theta(model, theta);
  const auto eval = bind_evaluator(model, theta, sample);
  std::vector<RecordTerms> terms(data.size());
  parallel_for(data.size(), opts.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    RecordWorkspace ws;
    for (std::size_t j = begin; j < end; ++j) terms[j] = record_terms(eval, data[j], sample.size(), der, ws, j);
  });
  return terms;
}

namespace detail {

inline Evaluation reduce_terms(const std::vector<RecordTerms>& terms, std::size_t d, Derivatives der) {
  Evaluation out;
  if (der != Derivatives::none) out.score = Vector::Zero(static_cast<Eigen::Index>(d));
  if (der == Derivatives::hessian) out.hessian = Matrix::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (const auto& t : terms) {
    out.loglik += t.log_marginal;
    if (der != Derivatives::none) out.score += t.score;
    if (der == Derivatives::hessian) out.hessian += t.hessian;
  }
  return out;
}

}  // namespace detail

template <MissingDataModel M>
Evaluation evaluate(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                    const MonteCarloSample& sample, Derivatives der, EvalOptions opts = {}) {
  return detail::reduce_terms(all_record_terms(model, theta, data, sample, der, opts), model.theta_dim(), der);
}

template <MissingDataModel M>
double mc_loglik(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                 const MonteCarloSample& sample, EvalOptions opts = {}) {
  return evaluate(model, theta, data, sample, Derivatives::none, opts).loglik;
}

template <MissingDataModel M>
Vector mc_score(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                const MonteCarloSample& sample, EvalOptions opts = {}) {
  return evaluate(model, theta, data, sample, Derivatives::gradient, opts).score;
}

template <MissingDataModel M>
Matrix mc_hessian(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                  const MonteCarloSample& sample, EvalOptions opts = {}) {
  return evaluate(model, theta, data, sample, Derivatives::hessian, opts).hessian;
}

// Fresh-sample scheme: record j gets its own independent block of draws from
// substream j. With one record this coincides with draw_sample(seed).

template <MissingDataModel M>
std::vector<MonteCarloSample> draw_fresh_samples(const M& model, std::size_t n, std::size_t m_per_obs,
                                                 std::uint64_t seed) {
  if (m_per_obs == 0) throw InvalidInput("m_per_obs must be at least 1");
  std::vector<MonteCarloSample> out;
  out.reserve(n);
  for (std::size_t j = 0; j < n; ++j) out.push_back(draw_sample(model, m_per_obs, seed, j));
  return out;
}

template <MissingDataModel M>
std::vector<RecordTerms> all_record_terms_fresh(const M& model, const Vector& theta,
                                                const ObservedData<typename M::Record>& data,
                                                const std::vector<MonteCarloSample>& samples, Derivatives der,
                                                EvalOptions opts = {}) {
  check_theta(model, theta);
  if (samples.size() != data.size()) throw InvalidInput("fresh scheme needs one sample per record");
  std::vector<RecordTerms> terms(data.size());
  parallel_for(data.size(), opts.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    RecordWorkspace ws;
    for (std::size_t j = begin; j < end; ++j) {
      const auto eval = bind_evaluator(model, theta, samples[j]);
      terms[j] = record_terms(eval, data[j], samples[j].size(), der, ws, j);
    }
  });
  return terms;
}

template <MissingDataModel M>
Evaluation evaluate_fresh(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                          const std::vector<MonteCarloSample>& samples, Derivatives der, EvalOptions opts = {}) {
  return detail::reduce_terms(all_record_terms_fresh(model, theta, data, samples, der, opts), model.theta_dim(),
                              der);
}

template <MissingDataModel M>
double mc_loglik_fresh(const M& model, const Vector& theta, const ObservedData<typename M::Record>& data,
                       std::size_t m_per_obs, std::uint64_t seed, EvalOptions opts = {}) {
  const auto samples = draw_fresh_samples(model, data.size(), m_per_obs, seed);
  return evaluate_fresh(model, theta, data, samples, Derivatives::none, opts).loglik;
}

}  // namespace mcmle
