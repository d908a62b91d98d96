// mcmle: command-line front end for Monte Carlo maximum likelihood on
// logit-normal GLMMs.
//
// Exit codes: 0 success, 1 input error, 3 non-convergence.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcmle/engine.hpp"
#include "mcmle/errors.hpp"
#include "mcmle/fit.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/infer.hpp"
#include "mcmle/io.hpp"
#include "mcmle/optim.hpp"
#include "mcmle/oracle.hpp"
#include "mcmle/rng.hpp"
#include "mcmle/study.hpp"

namespace fs = std::filesystem;
using namespace mcmle;

namespace {

constexpr int kOk = 0;
constexpr int kInputError = 1;
constexpr int kNotConverged = 3;

/// Failure that maps to exit code 3.
class ConvergenceFailure : public Error {
 public:
  using Error::Error;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string model_name(const glmm::GlmmDesign& design, const fs::path& spec_path) {
  return design.name().empty() ? spec_path.stem().string() : design.name();
}

Vector theta_from_list(const std::string& text, const glmm::GlmmDesign& design, const char* what) {
  const auto values = io::parse_number_list(text);
  if (values.size() != design.theta_dim())
    throw InvalidInput(std::string(what) + ": expected " + std::to_string(design.theta_dim()) + " values (" +
                       std::to_string(design.p()) + " beta, " + std::to_string(design.r()) + " delta), got " +
                       std::to_string(values.size()));
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

struct Loaded {
  io::ModelSpec spec;
  io::DataFile data;
};

Loaded load(const fs::path& model_path, const fs::path& data_path) {
  auto spec = io::read_model_spec(model_path);
  auto data = io::read_binary_csv(data_path, spec.design.T());
  return {std::move(spec), std::move(data)};
}

void fill_optimizer(io::FitReport& r, const OptResult& opt) {
  r.optimizer = {opt.converged, opt.iterations, opt.grad_norm, opt.gtol};
}

// ---------------------------------------------------------------- fit

struct FitArgs {
  std::string model, data, out, start;
  std::size_t m = 0;
  std::uint64_t seed = 0;
  bool fresh = false;
  int max_iter = 500;
  std::size_t threads = 1;
};

int cmd_fit(const FitArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto [spec, file] = load(a.model, a.data);
  const auto& design = spec.design;
  const glmm::GlmmModel model(design);
  const Vector start_values = a.start.empty() ? model.default_start() : theta_from_list(a.start, design, "--start");
  const ParamVector start(start_values, design.layout());

  FitOptions opts;
  opts.opt.max_iter = a.max_iter;
  opts.opt.keep_trace = false;
  opts.eval.threads = a.threads;

  io::FitReport r;
  r.method = "monte-carlo";
  FitResult fit;
  if (a.fresh) {
    const auto samples = draw_fresh_samples(model, file.data.size(), a.m, a.seed);
    fit = fit_mcmle_fresh(model, file.data, samples, start, opts);
    r.scheme = "fresh";
    r.generator_id = samples.front().generator_id();
  } else {
    const auto sample = draw_sample(model, a.m, a.seed);
    fit = fit_mcmle(model, file.data, sample, start, opts);
    r.scheme = "shared";
    r.generator_id = sample.generator_id();
  }
  glmm::canonicalize(design, fit);

  r.model_name = model_name(design, a.model);
  r.labels = design.layout()->labels();
  r.theta_hat = fit.opt.theta_hat.values;
  r.loglik = fit.opt.objective;
  if (fit.inference.vcov) {
    r.vcov = fit.inference.vcov;
    r.se = fit.inference.se;
  } else {
    r.warning = "ridge: " + fit.inference.ridge_warning.value_or("covariance unavailable");
  }
  r.J_hat = fit.inference.J_hat;
  r.V_hat = fit.inference.V_hat;
  r.W_hat = fit.inference.W_hat;
  r.m = a.m;
  r.n = file.data.size();
  r.seed = a.seed;
  r.spec_hash = spec.hash;
  r.data_hash = file.hash;
  fill_optimizer(r, fit.opt);
  r.wall_time = seconds_since(t0);
  io::atomic_write(a.out, io::dump(io::to_json(r)));
  if (r.warning) std::cerr << "warning: " << *r.warning << "\n";
  if (!fit.opt.converged) {
    std::cerr << "optimizer did not converge after " << fit.opt.iterations << " iterations (gradient norm "
              << fit.opt.grad_norm << ")\n";
    return kNotConverged;
  }
  return kOk;
}

// ---------------------------------------------------------------- profile

struct ProfileArgs {
  std::string model, data, out, param, grid;
  std::size_t m = 0;
  std::uint64_t seed = 0;
  int max_iter = 500;
  std::size_t threads = 1;
};

/// Unit vector on the sphere in R^r from r - 1 angles, and its Jacobian:
/// u_k = sin(phi_0) ... sin(phi_{k-1}) cos(phi_k), the last entry without
/// the cosine.
void spherical(const Vector& phi, Vector& u, Matrix& du) {
  const auto r = phi.size() + 1;
  u.resize(r);
  du = Matrix::Zero(r, r - 1);
  for (Eigen::Index k = 0; k < r; ++k) {
    const Eigen::Index nf = std::min<Eigen::Index>(k + 1, r - 1);
    auto factor = [&](Eigen::Index i, bool diff) {
      if (i < k) return diff ? std::cos(phi[i]) : std::sin(phi[i]);
      return diff ? -std::sin(phi[i]) : std::cos(phi[i]);
    };
    u[k] = 1.0;
    for (Eigen::Index i = 0; i < nf; ++i) u[k] *= factor(i, false);
    for (Eigen::Index j = 0; j < nf; ++j) {
      double v = 1.0;
      for (Eigen::Index i = 0; i < nf; ++i) v *= factor(i, i == j);
      du(k, j) = v;
    }
  }
}

/// Angles of a unit vector (inverse of `spherical`).
Vector angles_of(const Vector& u) {
  const auto r = u.size();
  Vector phi(r - 1);
  for (Eigen::Index k = 0; k < r - 1; ++k) {
    const double tail = u.tail(r - k - 1).norm();
    phi[k] = std::atan2(tail, u[k]);
  }
  if (r >= 2 && u[r - 1] < 0.0) phi[r - 2] = -phi[r - 2];
  return phi;
}

int cmd_profile(const ProfileArgs& a) {
  const auto [spec, file] = load(a.model, a.data);
  const auto& design = spec.design;
  const glmm::GlmmModel model(design);
  const auto grid = io::parse_grid(a.grid);
  const auto labels = design.layout()->labels();
  const auto sample = draw_sample(model, a.m, a.seed);

  OptOptions opts;
  opts.max_iter = a.max_iter;
  opts.keep_trace = false;
  EvalOptions eval;
  eval.threads = a.threads;
  const Objective obj = mc_objective(model, file.data, sample, eval);

  const auto p = static_cast<Eigen::Index>(design.p());
  const auto r = static_cast<Eigen::Index>(design.r());
  const bool sigma = a.param == "sigma";
  std::optional<std::size_t> coord;
  if (!sigma) {
    coord = design.layout()->index_of(a.param);
    if (!coord) {
      std::string known = "sigma";
      for (const auto& l : labels) known += ", " + l;
      throw InvalidInput("--param: unknown parameter '" + a.param + "' (known: " + known + ")");
    }
  } else if (r == 0) {
    throw InvalidInput("--param sigma: the model has no variance components");
  }

  io::Table table;
  table.columns = {"grid_value", "profile_loglik"};
  std::vector<ProfilePoint> points;

  if (!sigma || r == 1) {
    // Plain coordinate profile; "sigma" with one component is |delta1|.
    const std::size_t c = coord.value_or(static_cast<std::size_t>(p));
    for (std::size_t k = 0; k < labels.size(); ++k)
      if (k != c) table.columns.push_back(labels[k]);
    // Warm start from the unconstrained maximizer.
    const auto full = maximize(obj, ParamVector(model.default_start(), design.layout()), opts);
    Vector warm = full.theta_hat.values;
    for (Eigen::Index k = p; k < warm.size(); ++k) warm[k] = std::abs(warm[k]);
    points = profile(obj, ParamVector(warm, design.layout()), c, grid, opts);
    for (const auto& pt : points) {
      std::vector<double> row{pt.grid_value, pt.profile_max};
      for (std::size_t k = 0; k < labels.size(); ++k)
        if (k != c) row.push_back(pt.theta[static_cast<Eigen::Index>(k)]);
      table.rows.push_back(std::move(row));
    }
  } else {
    // sigma = |delta|, delta = sigma * u(phi): profile over (sigma, beta, phi).
    for (const auto& l : labels) table.columns.push_back(l);
    auto to_theta = [p, r](const Vector& z, Matrix* jac) {
      Vector u;
      Matrix du;
      spherical(z.tail(r - 1), u, du);
      Vector theta(p + r);
      theta.head(p) = z.segment(1, p);
      theta.tail(r) = z[0] * u;
      if (jac) {
        *jac = Matrix::Zero(p + r, z.size());
        jac->block(p, 0, r, 1) = u;
        jac->block(0, 1, p, p).setIdentity();
        jac->block(p, 1 + p, r, r - 1) = z[0] * du;
      }
      return theta;
    };
    const Objective zobj = [&](const Vector& z) {
      Matrix jac;
      const Vector theta = to_theta(z, &jac);
      ValueGrad vg = obj(theta);
      return ValueGrad{vg.value, jac.transpose() * vg.grad};
    };
    const auto full = maximize(obj, ParamVector(model.default_start(), design.layout()), opts);
    const Vector delta = full.theta_hat.values.tail(r);
    const double norm = delta.norm();
    const Vector dir = norm > 0.0 ? Vector(delta.cwiseAbs() / norm) : Vector(Vector::Ones(r) / std::sqrt(double(r)));
    Vector z(1 + p + r - 1);
    z[0] = norm;
    z.segment(1, p) = full.theta_hat.values.head(p);
    z.tail(r - 1) = angles_of(dir);
    points = profile(zobj, ParamVector(z), 0, grid, opts);
    for (const auto& pt : points) {
      Vector theta = to_theta(pt.theta, nullptr);
      for (Eigen::Index k = p; k < theta.size(); ++k) theta[k] = std::abs(theta[k]);
      std::vector<double> row{pt.grid_value, pt.profile_max};
      for (Eigen::Index k = 0; k < theta.size(); ++k) row.push_back(theta[k]);
      table.rows.push_back(std::move(row));
    }
  }

  io::atomic_write(a.out, io::format_table_csv(table));
  std::size_t failed = 0;
  for (const auto& pt : points)
    if (!pt.converged) ++failed;
  if (failed > 0) {
    std::cerr << failed << " of " << points.size() << " profile points did not converge\n";
    return kNotConverged;
  }
  return kOk;
}

// ---------------------------------------------------------------- coverage

struct CoverageArgs {
  std::string model, truth, out, cloud, ellipse = "exact";
  std::size_t n = 0, m = 0, reps = 0;
  double level = 0.95;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

int cmd_coverage(const CoverageArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = io::read_model_spec(a.model);
  const auto& design = spec.design;
  const auto truth = glmm::GlmmParams::from_theta(design, theta_from_list(a.truth, design, "--truth"));
  if (!(a.level > 0.0 && a.level < 1.0)) throw InvalidInput("--level must lie strictly between 0 and 1");

  study::CoverageOptions opts;
  opts.mode = a.ellipse == "exact" ? study::EllipseMode::exact_theory : study::EllipseMode::plug_in;
  opts.threads = a.threads;
  opts.opt.keep_trace = false;
  opts.exact.max_T = 20;
  study::CoverageResult res;
  try {
    res = study::coverage_study(design, truth, a.n, a.m, a.reps, a.level, a.seed, opts);
  } catch (const study::StudyError& e) {
    throw ConvergenceFailure(e.what());
  }

  const auto labels = design.layout()->labels();
  io::Json j;
  j["study"] = "coverage";
  j["model_name"] = model_name(design, a.model);
  j["mode"] = study::to_string(res.mode);
  j["level"] = res.level;
  j["chi2"] = res.chi2;
  j["n"] = res.n;
  j["m"] = res.m;
  j["replicates"] = res.replicates;
  j["covered"] = res.covered;
  j["invalid"] = res.invalid;
  const std::size_t valid = res.replicates - res.invalid;
  j["coverage"] = valid ? static_cast<double>(res.covered) / static_cast<double>(valid) : 0.0;
  io::Json truth_json = io::Json::object();
  for (std::size_t k = 0; k < labels.size(); ++k) truth_json[labels[k]] = res.truth[static_cast<Eigen::Index>(k)];
  j["truth"] = truth_json;
  if (res.exact_vcov) j["exact_vcov"] = io::matrix_json(*res.exact_vcov);
  j["seed"] = res.seed;
  j["generator_id"] = std::string(kGeneratorId);
  j["spec_hash"] = spec.hash;
  io::Json outcomes = io::Json::array();
  for (const auto& o : res.outcomes) {
    io::Json oj;
    oj["data_seed"] = o.data_seed;
    oj["mc_seed"] = o.mc_seed;
    oj["valid"] = o.valid;
    oj["covered"] = o.covered;
    oj["quadratic_form"] = o.quadratic_form;
    if (!o.failure.empty()) oj["failure"] = o.failure;
    outcomes.push_back(std::move(oj));
  }
  j["outcomes"] = outcomes;
  j["wall_time"] = seconds_since(t0);

  io::Table cloud;
  cloud.columns = {"replicate", "valid", "covered", "quadratic_form"};
  for (const auto& l : labels) cloud.columns.push_back(l);
  for (std::size_t k = 0; k < res.outcomes.size(); ++k) {
    const auto& o = res.outcomes[k];
    std::vector<double> row{static_cast<double>(k + 1), o.valid ? 1.0 : 0.0, o.covered ? 1.0 : 0.0, o.quadratic_form};
    for (Eigen::Index c = 0; c < o.estimate.size(); ++c) row.push_back(o.estimate[c]);
    cloud.rows.push_back(std::move(row));
  }
  const std::string cloud_path = a.cloud.empty() ? a.out + ".cloud.csv" : a.cloud;
  j["cloud"] = cloud_path;
  io::atomic_write(cloud_path, io::format_table_csv(cloud));
  io::atomic_write(a.out, io::dump(j));
  std::cout << res.covered << " of " << valid << " valid replicates covered (" << res.invalid << " invalid)\n";
  return kOk;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string model, truth, out;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

int cmd_simulate(const SimulateArgs& a) {
  const auto spec = io::read_model_spec(a.model);
  const auto truth = glmm::GlmmParams::from_theta(spec.design, theta_from_list(a.truth, spec.design, "--truth"));
  const auto data = study::generate_dataset(spec.design, truth, a.n, a.seed);
  io::atomic_write(a.out, io::format_binary_csv(data));
  return kOk;
}

// ---------------------------------------------------------------- exact

struct ExactArgs {
  std::string model, data, out, start;
  std::size_t order = 64;
  int max_iter = 500;
};

int cmd_exact(const ExactArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = io::read_model_spec(a.model);
  const auto& design = spec.design;
  if (design.q() != 1)
    throw InvalidInput("exact: quadrature supports models with exactly one random effect (q = 1); this model has q = " +
                       std::to_string(design.q()) + ". Use 'fit' for Monte Carlo maximum likelihood instead.");
  const auto file = io::read_binary_csv(a.data, design.T());
  const glmm::GlmmModel model(design);
  const Vector start = a.start.empty() ? model.default_start() : theta_from_list(a.start, design, "--start");
  const auto rule = oracle::gauss_hermite(a.order);
  OptOptions opts;
  opts.max_iter = a.max_iter;
  opts.keep_trace = false;
  OptResult opt = oracle::gh_mle(design, file.data, rule, start, opts);
  Vector theta = opt.theta_hat.values;
  for (Eigen::Index k = static_cast<Eigen::Index>(design.p()); k < theta.size(); ++k) theta[k] = std::abs(theta[k]);

  const auto d = static_cast<Eigen::Index>(design.theta_dim());
  const double n = static_cast<double>(file.data.size());
  Matrix hess = Matrix::Zero(d, d);
  Matrix outer = Matrix::Zero(d, d);
  double loglik = 0.0;
  for (const auto& y : file.data) {
    const auto ev = oracle::gh_evaluate(design, theta, ObservedData<Vector>({y}), rule, Derivatives::hessian);
    loglik += ev.loglik;
    hess += ev.hessian;
    outer += ev.score * ev.score.transpose();
  }

  io::FitReport r;
  r.method = "quadrature";
  r.model_name = model_name(design, a.model);
  r.labels = design.layout()->labels();
  r.theta_hat = theta;
  r.loglik = loglik;
  r.J_hat = -hess / n;
  r.V_hat = outer / n;
  try {
    r.vcov = sandwich_vcov(r.J_hat, r.V_hat, n);
    r.se = r.vcov->diagonal().cwiseMax(0.0).cwiseSqrt();
  } catch (const RidgeError& e) {
    r.warning = std::string("ridge: ") + e.what();
  }
  r.n = file.data.size();
  r.spec_hash = spec.hash;
  r.data_hash = file.hash;
  fill_optimizer(r, opt);
  r.wall_time = seconds_since(t0);
  io::atomic_write(a.out, io::dump(io::to_json(r)));
  if (r.warning) std::cerr << "warning: " << *r.warning << "\n";
  if (!opt.converged) {
    std::cerr << "optimizer did not converge after " << opt.iterations << " iterations\n";
    return kNotConverged;
  }
  return kOk;
}

std::size_t env_threads() {
  if (const char* env = std::getenv("MCMLE_THREADS")) {
    const auto v = io::parse_double(env);
    if (v && *v >= 1 && *v == std::floor(*v)) return static_cast<std::size_t>(*v);
    std::cerr << "ignoring MCMLE_THREADS='" << env << "'\n";
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monte Carlo maximum likelihood for logit-normal GLMMs"};
  app.require_subcommand(1);
  const std::size_t threads = env_threads();

  FitArgs fa;
  fa.threads = threads;
  auto* fit = app.add_subcommand("fit", "Monte Carlo MLE with sandwich standard errors");
  fit->add_option("--model", fa.model, "model spec JSON")->required()->check(CLI::ExistingFile);
  fit->add_option("--data", fa.data, "0/1 response CSV")->required()->check(CLI::ExistingFile);
  fit->add_option("--m", fa.m, "Monte Carlo sample size (per record with --fresh)")->required()->check(CLI::PositiveNumber);
  fit->add_option("--seed", fa.seed, "random seed")->required();
  fit->add_option("--start", fa.start, "starting values, comma separated (beta then delta)");
  fit->add_flag("--fresh", fa.fresh, "independent Monte Carlo sample per record");
  fit->add_option("--out", fa.out, "report JSON")->required();
  fit->add_option("--max-iter", fa.max_iter, "optimizer iteration cap")->check(CLI::PositiveNumber);
  fit->add_option("--threads", fa.threads, "worker threads (default MCMLE_THREADS or 1)")->check(CLI::PositiveNumber);

  ProfileArgs pa;
  pa.threads = threads;
  auto* prof = app.add_subcommand("profile", "profile Monte Carlo log likelihood over a grid");
  prof->add_option("--model", pa.model, "model spec JSON")->required()->check(CLI::ExistingFile);
  prof->add_option("--data", pa.data, "0/1 response CSV")->required()->check(CLI::ExistingFile);
  prof->add_option("--m", pa.m, "Monte Carlo sample size")->required()->check(CLI::PositiveNumber);
  prof->add_option("--seed", pa.seed, "random seed")->required();
  prof->add_option("--param", pa.param, "parameter label (beta1, delta1, ...) or sigma = |delta|")->required();
  prof->add_option("--grid", pa.grid, "grid lo:hi:k")->required();
  prof->add_option("--out", pa.out, "profile CSV")->required();
  prof->add_option("--max-iter", pa.max_iter, "optimizer iteration cap")->check(CLI::PositiveNumber);
  prof->add_option("--threads", pa.threads, "worker threads")->check(CLI::PositiveNumber);

  CoverageArgs ca;
  ca.threads = threads;
  auto* cov = app.add_subcommand("coverage", "repeated-sampling coverage of confidence ellipsoids");
  cov->add_option("--model", ca.model, "model spec JSON")->required()->check(CLI::ExistingFile);
  cov->add_option("--truth", ca.truth, "true parameter, comma separated")->required();
  cov->add_option("--n", ca.n, "records per replicate")->required()->check(CLI::PositiveNumber);
  cov->add_option("--m", ca.m, "Monte Carlo sample size")->required()->check(CLI::PositiveNumber);
  cov->add_option("--reps", ca.reps, "replicates")->required()->check(CLI::PositiveNumber);
  cov->add_option("--level", ca.level, "confidence level");
  cov->add_option("--seed", ca.seed, "random seed")->required();
  cov->add_option("--ellipse", ca.ellipse, "exact (oracle J and W at the truth) or plug-in")
      ->check(CLI::IsMember({"exact", "plug-in"}));
  cov->add_option("--out", ca.out, "study JSON")->required();
  cov->add_option("--cloud", ca.cloud, "estimate cloud CSV (default <out>.cloud.csv)");
  cov->add_option("--threads", ca.threads, "worker threads")->check(CLI::PositiveNumber);

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "simulate 0/1 responses from the model");
  sim->add_option("--model", sa.model, "model spec JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--truth", sa.truth, "parameter, comma separated")->required();
  sim->add_option("--n", sa.n, "records")->required()->check(CLI::PositiveNumber);
  sim->add_option("--seed", sa.seed, "random seed")->required();
  sim->add_option("--out", sa.out, "output CSV")->required();

  ExactArgs ea;
  auto* exact = app.add_subcommand("exact", "MLE by adaptive Gauss-Hermite quadrature (one random effect)");
  exact->add_option("--model", ea.model, "model spec JSON")->required()->check(CLI::ExistingFile);
  exact->add_option("--data", ea.data, "0/1 response CSV")->required()->check(CLI::ExistingFile);
  exact->add_option("--out", ea.out, "report JSON")->required();
  exact->add_option("--start", ea.start, "starting values, comma separated");
  exact->add_option("--order", ea.order, "quadrature order")->check(CLI::Range(1, 512));
  exact->add_option("--max-iter", ea.max_iter, "optimizer iteration cap")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (*fit) return cmd_fit(fa);
    if (*prof) return cmd_profile(pa);
    if (*cov) return cmd_coverage(ca);
    if (*sim) return cmd_simulate(sa);
    if (*exact) return cmd_exact(ea);
  } catch (const ConvergenceFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNotConverged;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNotConverged;
  } catch (const ProfileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNotConverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  }
  return kInputError;
}
