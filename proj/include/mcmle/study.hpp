#pragma once

// Simulation experiments on GLMMs: repeated-sampling coverage of confidence
// ellipsoids, the Monte Carlo convergence rate of the marginal estimate and
// the variance comparison of the shared- and fresh-sample schemes.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mcmle/engine.hpp"
#include "mcmle/fit.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/infer.hpp"
#include "mcmle/oracle.hpp"
#include "mcmle/optim.hpp"
#include "mcmle/parallel.hpp"
#include "mcmle/rng.hpp"

namespace mcmle::study {

inline ObservedData<Vector> generate_dataset(const glmm::GlmmDesign& design, const glmm::GlmmParams& truth,
                                             std::size_t n, std::uint64_t seed) {
  return glmm::simulate_y(design, truth, n, seed);
}

enum class EllipseMode {
  exact_theory,  // oracle J (= V) and W at the truth
  plug_in,       // J-hat, V-hat, W-hat at each replicate's MCMLE
};

inline const char* to_string(EllipseMode mode) {
  return mode == EllipseMode::exact_theory ? "exact-theory" : "plug-in";
}

struct CoverageOptions {
  EllipseMode mode = EllipseMode::exact_theory;
  std::size_t threads = 1;
  OptOptions opt;
  oracle::ExactOptions exact;
  double max_invalid_fraction = 0.05;
};

struct ReplicateOutcome {
  std::uint64_t data_seed = 0;
  std::uint64_t mc_seed = 0;
  Vector estimate;  // canonical (delta >= 0)
  bool valid = false;
  bool covered = false;
  double quadratic_form = 0.0;
  std::string failure;
};

struct CoverageResult {
  std::size_t replicates = 0;
  std::size_t covered = 0;
  std::size_t invalid = 0;
  EllipseMode mode = EllipseMode::exact_theory;
  double level = 0.0;
  double chi2 = 0.0;
  std::size_t n = 0;
  std::size_t m = 0;
  std::uint64_t seed = 0;
  Vector truth;
  std::optional<Matrix> exact_vcov;
  std::vector<ReplicateOutcome> outcomes;

  std::vector<Vector> estimates() const {
    std::vector<Vector> out;
    out.reserve(outcomes.size());
    for (const auto& o : outcomes) out.push_back(o.estimate);
    return out;
  }
};

class StudyError : public Error {
 public:
  using Error::Error;
};

/// For each replicate: simulate data at the truth, draw a fresh Monte Carlo
/// sample, fit the MCMLE and test whether the truth lies in the level
/// ellipsoid centered at the estimate. Replicate r uses substreams 2r (data)
/// and 2r+1 (Monte Carlo) of `seed`.
inline CoverageResult coverage_study(const glmm::GlmmDesign& design, const glmm::GlmmParams& truth, std::size_t n,
                                     std::size_t m, std::size_t replicates, double level, std::uint64_t seed,
                                     const CoverageOptions& opts = {}) {
  if (replicates == 0) throw InvalidInput("replicates must be at least 1");
  const glmm::GlmmModel model(design);
  const glmm::GlmmParams truth_c = truth.canonical();
  const Vector truth_theta = truth_c.theta();
  const auto d = static_cast<std::size_t>(truth_theta.size());

  CoverageResult res;
  res.replicates = replicates;
  res.mode = opts.mode;
  res.level = level;
  res.chi2 = chi_square_quantile(level, d);
  res.n = n;
  res.m = m;
  res.seed = seed;
  res.truth = truth_theta;
  if (opts.mode == EllipseMode::exact_theory) {
    const auto info = oracle::exact_JVW(design, truth_c, opts.exact);
    res.exact_vcov = sandwich_vcov(info.J, info.J, info.W, static_cast<double>(n), static_cast<double>(m));
  }

  res.outcomes.resize(replicates);
  parallel_for(replicates, opts.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t r = begin; r < end; ++r) {
      auto& out = res.outcomes[r];
      out.data_seed = substream_seed(seed, 2 * r);
      out.mc_seed = substream_seed(seed, 2 * r + 1);
      out.estimate = Vector::Constant(static_cast<Eigen::Index>(d), std::numeric_limits<double>::quiet_NaN());
      try {
        const auto data = generate_dataset(design, truth, n, out.data_seed);
        const auto sample = draw_sample(model, m, out.mc_seed);
        const ParamVector start(model.default_start(), design.layout());
        FitResult fit;
        fit.opt = maximize(mc_objective(model, data, sample), start, opts.opt);
        if (opts.mode == EllipseMode::plug_in)
          fit.inference = infer(model, fit.opt.theta_hat, data, sample);
        glmm::canonicalize(design, fit);
        out.estimate = fit.opt.theta_hat.values;
        if (!fit.opt.converged) {
          out.failure = "optimizer did not converge";
          continue;
        }
        Matrix vcov;
        if (opts.mode == EllipseMode::exact_theory) {
          vcov = *res.exact_vcov;
        } else {
          if (!fit.inference.vcov) {
            out.failure = fit.inference.ridge_warning.value_or("no covariance");
            continue;
          }
          vcov = *fit.inference.vcov;
        }
        const Ellipsoid region = confidence_ellipsoid(vcov, out.estimate, level);
        out.quadratic_form = quadratic_form(region, truth_theta);
        out.covered = out.quadratic_form <= region.chi2;
        out.valid = true;
      } catch (const std::exception& e) {
        out.failure = e.what();
      }
    }
  });

  for (const auto& o : res.outcomes) {
    if (!o.valid) ++res.invalid;
    if (o.valid && o.covered) ++res.covered;
  }
  if (static_cast<double>(res.invalid) > opts.max_invalid_fraction * static_cast<double>(replicates))
    throw StudyError("coverage study: " + std::to_string(res.invalid) + " of " + std::to_string(replicates) +
                     " replicates failed");
  return res;
}

struct ConvergenceRow {
  std::size_t m = 0;
  double rmse = 0.0;
  double bias = 0.0;
};

struct ConvergenceResult {
  std::vector<ConvergenceRow> rows;
  double exact = 0.0;
  std::optional<double> slope;  // least-squares slope of log RMSE on log m
};

/// RMSE of the Monte Carlo log marginal of one record against the
/// quadrature value, over `seeds_per_m` independent samples at each m.
inline ConvergenceResult convergence_experiment(const glmm::GlmmDesign& design, const glmm::GlmmParams& params,
                                                const Vector& y, const std::vector<std::size_t>& m_grid,
                                                std::size_t seeds_per_m, std::uint64_t seed,
                                                std::size_t quadrature_order = 64, std::size_t threads = 1) {
  if (m_grid.empty() || seeds_per_m == 0) throw InvalidInput("convergence experiment needs m values and seeds");
  const glmm::GlmmModel model(design);
  const Vector theta = params.theta();
  ConvergenceResult res;
  res.exact = oracle::gh_loglik(design, params, ObservedData<Vector>({y}), oracle::gauss_hermite(quadrature_order));

  for (std::size_t g = 0; g < m_grid.size(); ++g) {
    std::vector<double> errors(seeds_per_m);
    parallel_for(seeds_per_m, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
      for (std::size_t s = begin; s < end; ++s) {
        const auto sample = draw_sample(model, m_grid[g], substream_seed(seed, g * seeds_per_m + s));
        errors[s] = log_marginal_mc(model, theta, y, sample) - res.exact;
      }
    });
    double sq = 0.0;
    double sum = 0.0;
    for (double e : errors) {
      sq += e * e;
      sum += e;
    }
    res.rows.push_back({m_grid[g], std::sqrt(sq / static_cast<double>(seeds_per_m)),
                        sum / static_cast<double>(seeds_per_m)});
  }

  bool positive = res.rows.size() >= 2;
  for (const auto& r : res.rows) positive = positive && r.rmse > 0.0;
  if (positive) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double k = static_cast<double>(res.rows.size());
    for (const auto& r : res.rows) {
      const double lx = std::log(static_cast<double>(r.m));
      const double ly = std::log(r.rmse);
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
    }
    res.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }
  return res;
}

struct SchemeComparison {
  /// Replicate variance of the mean Monte Carlo score, scaled by the number
  /// of draws each scheme spends (m shared, n*m fresh); these estimate
  /// trace W and trace W-tilde respectively.
  double trace_shared = 0.0;
  double trace_fresh = 0.0;
  /// Jackknife standard errors over replicates.
  double se_shared = 0.0;
  double se_fresh = 0.0;
  double se_difference = 0.0;
  std::size_t replicates = 0;
};

namespace detail {

/// Trace of the sample covariance of the rows of X.
inline double trace_cov(const RowMatrix& X) {
  const double R = static_cast<double>(X.rows());
  const Vector mean = X.colwise().mean().transpose();
  return ((X.rowwise() - mean.transpose()).squaredNorm()) / (R - 1.0);
}

/// Leave-one-out trace covariances, computed from running sums.
inline std::vector<double> jackknife_trace(const RowMatrix& X) {
  const auto R = X.rows();
  const Vector total = X.colwise().sum().transpose();
  const double total_sq = X.squaredNorm();
  std::vector<double> out(static_cast<std::size_t>(R));
  for (Eigen::Index r = 0; r < R; ++r) {
    const Vector s = total - X.row(r).transpose();
    const double sq = total_sq - X.row(r).squaredNorm();
    const double k = static_cast<double>(R - 1);
    out[static_cast<std::size_t>(r)] = (sq - s.squaredNorm() / k) / (k - 1.0);
  }
  return out;
}

inline double jackknife_se(const std::vector<double>& loo) {
  const double R = static_cast<double>(loo.size());
  double mean = 0.0;
  for (double v : loo) mean += v;
  mean /= R;
  double acc = 0.0;
  for (double v : loo) acc += (v - mean) * (v - mean);
  return std::sqrt((R - 1.0) / R * acc);
}

}  // namespace detail

/// Score variability at fixed theta under the shared-sample scheme (one
/// sample of m points for all records) and the fresh-sample scheme (m new
/// points per record). Replicate r uses substreams 2r and 2r+1 of `seed`.
inline SchemeComparison scheme_variance_compare(const glmm::GlmmDesign& design, const glmm::GlmmParams& params,
                                                const ObservedData<Vector>& data, std::size_t m,
                                                std::size_t replicates, std::uint64_t seed, std::size_t threads = 1) {
  if (replicates < 100) throw InvalidInput("scheme comparison needs at least 100 replicates");
  const glmm::GlmmModel model(design);
  const Vector theta = params.theta();
  const auto d = static_cast<Eigen::Index>(design.theta_dim());
  const double n = static_cast<double>(data.size());
  const double md = static_cast<double>(m);

  RowMatrix shared(static_cast<Eigen::Index>(replicates), d);
  RowMatrix fresh(static_cast<Eigen::Index>(replicates), d);
  parallel_for(replicates, threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t r = begin; r < end; ++r) {
      const auto sample = draw_sample(model, m, substream_seed(seed, 2 * r));
      const Vector gs = evaluate(model, theta, data, sample, Derivatives::gradient).score;
      const auto samples = draw_fresh_samples(model, data.size(), m, substream_seed(seed, 2 * r + 1));
      const Vector gf = evaluate_fresh(model, theta, data, samples, Derivatives::gradient).score;
      shared.row(static_cast<Eigen::Index>(r)) = (gs / n * std::sqrt(md)).transpose();
      fresh.row(static_cast<Eigen::Index>(r)) = (gf / n * std::sqrt(n * md)).transpose();
    }
  });

  SchemeComparison out;
  out.replicates = replicates;
  out.trace_shared = detail::trace_cov(shared);
  out.trace_fresh = detail::trace_cov(fresh);
  const auto loo_s = detail::jackknife_trace(shared);
  const auto loo_f = detail::jackknife_trace(fresh);
  std::vector<double> loo_d(loo_s.size());
  for (std::size_t r = 0; r < loo_s.size(); ++r) loo_d[r] = loo_f[r] - loo_s[r];
  out.se_shared = detail::jackknife_se(loo_s);
  out.se_fresh = detail::jackknife_se(loo_f);
  out.se_difference = detail::jackknife_se(loo_d);
  return out;
}

}  // namespace mcmle::study
