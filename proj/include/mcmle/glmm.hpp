#pragma once

// Logit-Normal generalized linear mixed model.
//
// Each record is a binary T-vector y whose components are independent
// Bernoulli(logistic(eta_k)) given a standard normal random-effect vector b,
// with linear predictor
//
//   eta = X beta + Z Delta b,   Delta = diag(delta[delta_map[s]]).
//
// The importance density is the standard normal law of b, so the log ratio
// rho(theta, b, y) = log f_theta(b, y) - log h(b) is the conditional
// Bernoulli log likelihood log f_theta(y | b). theta = (beta, delta).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mcmle/engine.hpp"
#include "mcmle/errors.hpp"
#include "mcmle/rng.hpp"
#include "mcmle/types.hpp"

namespace mcmle::glmm {

/// log(1 + exp(eta)) without overflow.
inline double softplus(double eta) noexcept { return std::max(eta, 0.0) + std::log1p(std::exp(-std::abs(eta))); }

inline double logistic(double eta) noexcept {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

class GlmmDesign {
 public:
  GlmmDesign() = default;

  /// `delta_map[s]` is the 0-based index of the delta parameter scaling
  /// random effect s. Every index in 0..r-1 must be used.
  GlmmDesign(Matrix X, Matrix Z, std::vector<std::size_t> delta_map, std::string name = {})
      : X_(std::move(X)), Z_(std::move(Z)), delta_map_(std::move(delta_map)), name_(std::move(name)) {
    if (X_.rows() == 0) throw InvalidInput("X: design must have at least one row");
    if (Z_.cols() > 0 && Z_.rows() != X_.rows())
      throw InvalidInput("Z: has " + std::to_string(Z_.rows()) + " rows, X has " + std::to_string(X_.rows()));
    if (Z_.cols() == 0) Z_.resize(X_.rows(), 0);
    if (delta_map_.size() != static_cast<std::size_t>(Z_.cols()))
      throw InvalidInput("delta_map: length " + std::to_string(delta_map_.size()) + " does not match the " +
                         std::to_string(Z_.cols()) + " columns of Z");
    r_ = 0;
    for (auto l : delta_map_) r_ = std::max(r_, l + 1);
    std::vector<bool> used(r_, false);
    for (auto l : delta_map_) used[l] = true;
    if (std::find(used.begin(), used.end(), false) != used.end())
      throw InvalidInput("delta_map: indices must cover 1.." + std::to_string(r_) + " without gaps");
    if (theta_dim() == 0) throw InvalidInput("X: model has no parameters");
    if (!X_.allFinite()) throw InvalidInput("X: entries must be finite");
    if (!Z_.allFinite()) throw InvalidInput("Z: entries must be finite");

    aggregate_ = Matrix::Zero(Z_.cols(), static_cast<Eigen::Index>(r_));
    for (std::size_t s = 0; s < delta_map_.size(); ++s)
      aggregate_(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(delta_map_[s])) = 1.0;
    layout_ = std::make_shared<const ParamLayout>(
        ParamLayout({{"beta", 0, p()}, {"delta", p(), r_}}));
  }

  /// Same as the constructor but with 1-based delta indices.
  static GlmmDesign one_based(Matrix X, Matrix Z, const std::vector<long long>& delta_map, std::string name = {}) {
    std::vector<std::size_t> zero_based;
    zero_based.reserve(delta_map.size());
    for (auto v : delta_map) {
      if (v < 1) throw InvalidInput("delta_map: indices are 1-based and must be >= 1");
      zero_based.push_back(static_cast<std::size_t>(v - 1));
    }
    return GlmmDesign(std::move(X), std::move(Z), std::move(zero_based), std::move(name));
  }

  const Matrix& X() const noexcept { return X_; }
  const Matrix& Z() const noexcept { return Z_; }
  const std::vector<std::size_t>& delta_map() const noexcept { return delta_map_; }
  const std::string& name() const noexcept { return name_; }
  /// q x r indicator: entry (s, l) is 1 when random effect s uses delta l.
  const Matrix& aggregate() const noexcept { return aggregate_; }
  const std::shared_ptr<const ParamLayout>& layout() const noexcept { return layout_; }

  std::size_t T() const noexcept { return static_cast<std::size_t>(X_.rows()); }
  std::size_t p() const noexcept { return static_cast<std::size_t>(X_.cols()); }
  std::size_t q() const noexcept { return static_cast<std::size_t>(Z_.cols()); }
  std::size_t r() const noexcept { return r_; }
  std::size_t theta_dim() const noexcept { return p() + r_; }

 private:
  Matrix X_;
  Matrix Z_;
  std::vector<std::size_t> delta_map_;
  std::string name_;
  std::size_t r_ = 0;
  Matrix aggregate_;
  std::shared_ptr<const ParamLayout> layout_;
};

struct GlmmParams {
  Vector beta;
  Vector delta;

  static GlmmParams from_theta(const GlmmDesign& design, const Vector& theta) {
    if (static_cast<std::size_t>(theta.size()) != design.theta_dim())
      throw InvalidInput("theta has length " + std::to_string(theta.size()) + ", design expects " +
                         std::to_string(design.theta_dim()));
    const auto p = static_cast<Eigen::Index>(design.p());
    return {theta.head(p), theta.tail(static_cast<Eigen::Index>(design.r()))};
  }

  Vector theta() const {
    Vector out(beta.size() + delta.size());
    out << beta, delta;
    return out;
  }

  /// delta <- |delta|; the observed-data likelihood is even in each delta.
  GlmmParams canonical() const { return {beta, delta.cwiseAbs()}; }
};

namespace detail {

inline void check_params(const GlmmDesign& design, const GlmmParams& params) {
  if (static_cast<std::size_t>(params.beta.size()) != design.p())
    throw InvalidInput("beta has length " + std::to_string(params.beta.size()) + ", expected " +
                       std::to_string(design.p()));
  if (static_cast<std::size_t>(params.delta.size()) != design.r())
    throw InvalidInput("delta has length " + std::to_string(params.delta.size()) + ", expected " +
                       std::to_string(design.r()));
}

template <class B>
void check_effects(const GlmmDesign& design, const B& b) {
  if (static_cast<std::size_t>(b.size()) != design.q())
    throw InvalidInput("random effect vector has length " + std::to_string(b.size()) + ", expected " +
                       std::to_string(design.q()));
}

inline void check_response(const GlmmDesign& design, const Vector& y) {
  if (static_cast<std::size_t>(y.size()) != design.T())
    throw InvalidInput("response has length " + std::to_string(y.size()) + ", expected " + std::to_string(design.T()));
  for (Eigen::Index k = 0; k < y.size(); ++k)
    if (y[k] != 0.0 && y[k] != 1.0) throw InvalidInput("response entry " + std::to_string(k) + " is not 0 or 1");
}

/// Z Delta: column s of Z scaled by delta[delta_map[s]].
inline Matrix scaled_z(const GlmmDesign& design, const Vector& delta) {
  Matrix out = design.Z();
  for (std::size_t s = 0; s < design.q(); ++s)
    out.col(static_cast<Eigen::Index>(s)) *= delta[static_cast<Eigen::Index>(design.delta_map()[s])];
  return out;
}

}  // namespace detail

/// eta = X beta + Z Delta b.
template <class B>
Vector linear_predictor(const GlmmDesign& design, const GlmmParams& params, const B& b) {
  detail::check_params(design, params);
  detail::check_effects(design, b);
  Vector eta = design.X() * params.beta;
  for (std::size_t s = 0; s < design.q(); ++s) {
    const double scale = params.delta[static_cast<Eigen::Index>(design.delta_map()[s])] * b[static_cast<Eigen::Index>(s)];
    eta += scale * design.Z().col(static_cast<Eigen::Index>(s));
  }
  return eta;
}

/// Augmented design M(b) = [X | C(b)] with C(b)_{kl} = sum_{s in l} Z_{ks} b_s,
/// so that eta = M(b) theta.
template <class B>
Matrix augmented_design(const GlmmDesign& design, const B& b) {
  detail::check_effects(design, b);
  Matrix M(design.T(), design.theta_dim());
  M.leftCols(static_cast<Eigen::Index>(design.p())) = design.X();
  M.rightCols(static_cast<Eigen::Index>(design.r())).setZero();
  for (std::size_t s = 0; s < design.q(); ++s)
    M.col(static_cast<Eigen::Index>(design.p() + design.delta_map()[s])) +=
        b[static_cast<Eigen::Index>(s)] * design.Z().col(static_cast<Eigen::Index>(s));
  return M;
}

/// log f_theta(y | b) = sum_k [y_k eta_k - softplus(eta_k)].
template <class B>
double log_ratio(const GlmmDesign& design, const GlmmParams& params, const B& b, const Vector& y) {
  detail::check_response(design, y);
  const Vector eta = linear_predictor(design, params, b);
  double acc = 0.0;
  for (Eigen::Index k = 0; k < eta.size(); ++k) acc += y[k] * eta[k] - softplus(eta[k]);
  return acc;
}

/// M(b)^T (y - p).
template <class B>
Vector log_ratio_grad(const GlmmDesign& design, const GlmmParams& params, const B& b, const Vector& y) {
  detail::check_response(design, y);
  const Vector eta = linear_predictor(design, params, b);
  const Vector resid = y - eta.unaryExpr([](double e) { return logistic(e); });
  return augmented_design(design, b).transpose() * resid;
}

/// -M(b)^T diag(p (1 - p)) M(b).
template <class B>
Matrix log_ratio_hess(const GlmmDesign& design, const GlmmParams& params, const B& b, const Vector& y) {
  detail::check_response(design, y);
  const Vector eta = linear_predictor(design, params, b);
  const Vector w = eta.unaryExpr([](double e) {
    const double pr = logistic(e);
    return pr * (1.0 - pr);
  });
  const Matrix M = augmented_design(design, b);
  return -(M.transpose() * w.asDiagonal() * M);
}

/// Simulates n records: b ~ N(0, I_q), then y_k ~ Bernoulli(logistic(eta_k)).
inline ObservedData<Vector> simulate_y(const GlmmDesign& design, const GlmmParams& params, std::size_t n,
                                       std::uint64_t seed) {
  detail::check_params(design, params);
  if (n == 0) throw InvalidInput("number of records n must be at least 1");
  auto rng = make_stream(seed, 0);
  std::vector<Vector> records;
  records.reserve(n);
  Vector b(static_cast<Eigen::Index>(design.q()));
  for (std::size_t j = 0; j < n; ++j) {
    for (Eigen::Index s = 0; s < b.size(); ++s) b[s] = standard_normal(rng);
    const Vector eta = linear_predictor(design, params, b);
    Vector y(eta.size());
    for (Eigen::Index k = 0; k < eta.size(); ++k) y[k] = rng.uniform() < logistic(eta[k]) ? 1.0 : 0.0;
    records.push_back(std::move(y));
  }
  return ObservedData<Vector>(std::move(records));
}

/// Batched evaluator for a GLMM bound to (theta, sample). For moderate m*T
/// the linear predictors and probabilities of all sample points are cached,
/// so that per record only y-dependent products remain; otherwise each call
/// recomputes them point by point.
class GlmmEvaluator {
 public:
  static constexpr std::size_t kCacheLimit = std::size_t{1} << 24;

  GlmmEvaluator(const GlmmDesign& design, const Vector& theta, const MonteCarloSample& sample,
                std::size_t cache_limit = kCacheLimit)
      : design_(&design), params_(GlmmParams::from_theta(design, theta)), sample_(&sample) {
    if (sample.dim() != design.q()) throw InvalidInput("sample dimension does not match the number of random effects");
    zdelta_ = detail::scaled_z(design, params_.delta);
    xbeta_ = design.X() * params_.beta;
    cached_ = sample.size() * design.T() <= cache_limit;
    if (!cached_) return;

    const auto B = sample.matrix();
    const auto m = static_cast<Eigen::Index>(sample.size());
    eta_ = B * zdelta_.transpose();
    eta_.rowwise() += xbeta_.transpose();
    prob_ = eta_.unaryExpr([](double e) { return logistic(e); });
    log_norm_ = eta_.unaryExpr([](double e) { return softplus(e); }).rowwise().sum();
    mtp_.resize(m, static_cast<Eigen::Index>(design.theta_dim()));
    mtp_.leftCols(static_cast<Eigen::Index>(design.p())) = prob_ * design.X();
    mtp_.rightCols(static_cast<Eigen::Index>(design.r())) =
        (prob_ * design.Z()).cwiseProduct(B) * design.aggregate();
  }

  std::size_t size() const noexcept { return sample_->size(); }

  void log_ratios(const Vector& y, std::span<double> rho) const {
    detail::check_response(*design_, y);
    Eigen::Map<Vector> out(rho.data(), static_cast<Eigen::Index>(rho.size()));
    if (cached_) {
      out.noalias() = eta_ * y;
      out -= log_norm_;
      return;
    }
    Vector eta;
    for (std::size_t i = 0; i < size(); ++i) {
      point_eta(i, eta);
      double acc = 0.0;
      for (Eigen::Index k = 0; k < eta.size(); ++k) acc += y[k] * eta[k] - softplus(eta[k]);
      out[static_cast<Eigen::Index>(i)] = acc;
    }
  }

  void scores(const Vector& y, RowMatrix& out) const {
    detail::check_response(*design_, y);
    const auto m = static_cast<Eigen::Index>(size());
    const auto p = static_cast<Eigen::Index>(design_->p());
    const auto r = static_cast<Eigen::Index>(design_->r());
    out.resize(m, p + r);
    const Vector xty = design_->X().transpose() * y;
    // C(b_i)^T y for all i at once: (B .* (Z^T y)^T) aggregated by delta.
    const Vector zty = design_->Z().transpose() * y;
    Matrix weights = design_->aggregate();
    for (Eigen::Index s = 0; s < zty.size(); ++s) weights.row(s) *= zty[s];
    const auto B = sample_->matrix();
    out.leftCols(p).rowwise() = xty.transpose();
    out.rightCols(r).noalias() = B * weights;
    if (cached_) {
      out -= mtp_;
      return;
    }
    Vector eta;
    for (std::size_t i = 0; i < size(); ++i) {
      point_eta(i, eta);
      const Vector pr = eta.unaryExpr([](double e) { return logistic(e); });
      const auto b = B.row(static_cast<Eigen::Index>(i));
      out.row(static_cast<Eigen::Index>(i)).head(p) -= (design_->X().transpose() * pr).transpose();
      const Vector ztp = design_->Z().transpose() * pr;
      out.row(static_cast<Eigen::Index>(i)).tail(r) -=
          (ztp.cwiseProduct(b.transpose())).transpose() * design_->aggregate();
    }
  }

  /// sum_i u_i * Hessian of rho at point i (independent of y for this model).
  Matrix weighted_hessian(const Vector& y, std::span<const double> u) const {
    detail::check_response(*design_, y);
    const auto d = static_cast<Eigen::Index>(design_->theta_dim());
    Matrix acc = Matrix::Zero(d, d);
    const auto B = sample_->matrix();
    Vector eta;
    Vector w;
    for (std::size_t i = 0; i < size(); ++i) {
      if (u[i] == 0.0) continue;
      const auto row = static_cast<Eigen::Index>(i);
      if (cached_) {
        w = prob_.row(row).transpose().cwiseProduct((1.0 - prob_.row(row).array()).matrix().transpose());
      } else {
        point_eta(i, eta);
        w = eta.unaryExpr([](double e) {
          const double pr = logistic(e);
          return pr * (1.0 - pr);
        });
      }
      const Matrix M = augmented_design(*design_, B.row(row).transpose());
      acc.noalias() -= u[i] * (M.transpose() * w.asDiagonal() * M);
    }
    return acc;
  }

 private:
  void point_eta(std::size_t i, Vector& eta) const {
    const auto b = sample_->matrix().row(static_cast<Eigen::Index>(i));
    eta = xbeta_;
    eta.noalias() += zdelta_ * b.transpose();
  }

  const GlmmDesign* design_;
  GlmmParams params_;
  const MonteCarloSample* sample_;
  Matrix zdelta_;
  Vector xbeta_;
  bool cached_ = false;
  RowMatrix eta_;
  RowMatrix prob_;
  Vector log_norm_;
  RowMatrix mtp_;
};

/// The GLMM as a MissingDataModel with standard normal importance density.
class GlmmModel {
 public:
  using Record = Vector;

  explicit GlmmModel(GlmmDesign design) : design_(std::make_shared<const GlmmDesign>(std::move(design))) {}

  const GlmmDesign& design() const noexcept { return *design_; }
  std::shared_ptr<const ParamLayout> layout() const { return design_->layout(); }

  std::size_t theta_dim() const noexcept { return design_->theta_dim(); }
  std::size_t missing_dim() const noexcept { return design_->q(); }

  double log_ratio(const Vector& theta, std::span<const double> b, const Vector& y) const {
    return glmm::log_ratio(*design_, GlmmParams::from_theta(*design_, theta), as_vector(b), y);
  }
  Vector log_ratio_grad(const Vector& theta, std::span<const double> b, const Vector& y) const {
    return glmm::log_ratio_grad(*design_, GlmmParams::from_theta(*design_, theta), as_vector(b), y);
  }
  Matrix log_ratio_hess(const Vector& theta, std::span<const double> b, const Vector& y) const {
    return glmm::log_ratio_hess(*design_, GlmmParams::from_theta(*design_, theta), as_vector(b), y);
  }

  void sample_importance(Xoshiro256ss& rng, std::span<double> out) const {
    for (auto& v : out) v = standard_normal(rng);
  }

  GlmmEvaluator bind(const Vector& theta, const MonteCarloSample& sample) const {
    return GlmmEvaluator(*design_, theta, sample);
  }

  /// Starting point: beta = 0, delta = 0.1 (delta = 0 is a stationary point
  /// of the sign symmetry).
  Vector default_start() const {
    Vector theta = Vector::Zero(static_cast<Eigen::Index>(theta_dim()));
    theta.tail(static_cast<Eigen::Index>(design_->r())).setConstant(0.1);
    return theta;
  }

  /// Data validation against the design.
  void validate(const ObservedData<Vector>& data) const {
    for (std::size_t j = 0; j < data.size(); ++j) {
      try {
        detail::check_response(*design_, data[j]);
      } catch (const InvalidInput& e) {
        throw InvalidInput("record " + std::to_string(j + 1) + ": " + e.what());
      }
    }
  }

 private:
  static Eigen::Map<const Vector> as_vector(std::span<const double> b) {
    return Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
  }

  std::shared_ptr<const GlmmDesign> design_;
};

static_assert(MissingDataModel<GlmmModel>);

// Shipped designs.

/// One fixed effect with covariate x_k = k/T and one random intercept.
inline GlmmDesign mcculloch_design(std::size_t T) {
  if (T == 0) throw InvalidInput("T must be positive");
  Matrix X(T, 1);
  for (std::size_t k = 0; k < T; ++k) X(static_cast<Eigen::Index>(k), 0) = static_cast<double>(k + 1) / static_cast<double>(T);
  return GlmmDesign(std::move(X), Matrix::Ones(static_cast<Eigen::Index>(T), 1), {0},
                    "mcculloch-T" + std::to_string(T));
}

/// Four outbreaks, identity fixed-effect design, six random effects sharing
/// three scale parameters (delta1, delta2, delta3 x4).
inline GlmmDesign influenza_design() {
  Matrix Z(4, 6);
  Z << 1, 1, 1, 0, 0, 0,
       1, 1, 0, 1, 0, 0,
       1, 1, 0, 0, 1, 0,
       1, -1, 0, 0, 0, 1;
  return GlmmDesign(Matrix::Identity(4, 4), std::move(Z), {0, 1, 2, 2, 2, 2}, "influenza");
}

/// Common variance and the two correlations implied by the influenza design:
/// var(Z Delta b) has diagonal d1^2 + d2^2 + d3^2, within-block covariance
/// d1^2 + d2^2 and cross-block covariance d1^2 - d2^2.
struct InfluenzaCorrelation {
  double sigma;
  double rho1;
  double rho2;
};

inline InfluenzaCorrelation influenza_correlation(const Vector& delta) {
  if (delta.size() != 3) throw InvalidInput("influenza model has three delta parameters");
  const double a = delta[0] * delta[0];
  const double b = delta[1] * delta[1];
  const double c = delta[2] * delta[2];
  const double var = a + b + c;
  if (var <= 0.0) return {0.0, 0.0, 0.0};
  return {std::sqrt(var), (a + b) / var, (a - b) / var};
}

}  // namespace mcmle::glmm
