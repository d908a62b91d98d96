#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "mcmle/engine.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/oracle.hpp"
#include "test_support.hpp"

using namespace mcmle;
using namespace mcmle::testing;

namespace {

ObservedData<Vector> all_ones(std::size_t n, std::size_t T) {
  return ObservedData<Vector>(std::vector<Vector>(n, Vector::Ones(static_cast<Eigen::Index>(T))));
}

MonteCarloSample permuted(const MonteCarloSample& s, std::uint64_t seed) {
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), std::mt19937_64(seed));
  std::vector<double> pts;
  for (auto i : idx)
    for (double v : s.point(i)) pts.push_back(v);
  return MonteCarloSample(std::move(pts), s.size(), s.dim(), s.seed(), s.generator_id());
}

}  // namespace

TEST_CASE("constant-ratio model gives the exact marginal", "[engine]") {
  // beta = 0, delta = 0: every Bernoulli probability is 1/2 regardless of b.
  const glmm::GlmmModel model(glmm::mcculloch_design(15));
  const Vector theta = Vector::Zero(2);
  const double expected = -15.0 * std::numbers::ln2;
  REQUIRE(expected == Catch::Approx(-10.397207708399179).epsilon(1e-15));
  for (std::size_t m : {1, 7, 1000}) {
    const auto sample = draw_sample(model, m, 11);
    const auto data = glmm::simulate_y(model.design(), params({0.3}, {0.5}), 10, 5);
    for (const auto& y : data) CHECK(log_marginal_mc(model, theta, y, sample) == Catch::Approx(expected).epsilon(1e-14));
    CHECK(mc_loglik(model, theta, data, sample) == Catch::Approx(-150.0 * std::numbers::ln2).epsilon(1e-14));
    const Vector u = weights(model, theta, data[0], sample);
    for (Eigen::Index i = 0; i < u.size(); ++i) CHECK(u[i] == Catch::Approx(1.0 / static_cast<double>(m)).epsilon(1e-14));
  }
}

TEST_CASE("single-point sample returns the log ratio itself", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(5));
  const auto sample = draw_sample(model, 1, 3);
  const Vector theta = vec({1.2, 0.8});
  const Vector y = vec({1, 0, 1, 1, 0});
  const double rho = model.log_ratio(theta, sample.point(0), y);
  CHECK(log_marginal_mc(model, theta, y, sample) == Catch::Approx(rho).epsilon(1e-14));
  const Vector u = weights(model, theta, y, sample);
  REQUIRE(u.size() == 1);
  CHECK(u[0] == 1.0);
}

TEST_CASE("weights lie on the simplex", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(15));
  const auto sample = draw_sample(model, 500, 21);
  std::mt19937_64 gen(4);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector theta = vec({nd(gen), nd(gen)});
    const auto data = glmm::simulate_y(model.design(), glmm::GlmmParams::from_theta(model.design(), theta), 1, trial);
    const Vector u = weights(model, theta, data[0], sample);
    CHECK(u.minCoeff() >= 0.0);
    CHECK(std::abs(u.sum() - 1.0) <= 1e-12);
  }
}

TEST_CASE("log marginal agrees with Gauss-Hermite quadrature", "[engine][oracle]") {
  // SE of log(mean) by the delta method: sd(ratio) / (sqrt(m) * mean(ratio)).
  const auto design = glmm::mcculloch_design(5);
  const glmm::GlmmModel model(design);
  const auto truth = desk_truth();
  const Vector y = Vector::Ones(5);
  const auto sample = draw_sample(model, 100000, 1);
  const double mc = log_marginal_mc(model, truth.theta(), y, sample);
  const double exact = oracle::gh_loglik(design, truth, ObservedData<Vector>({y}), oracle::gauss_hermite(64));

  Vector ratios(static_cast<Eigen::Index>(sample.size()));
  for (std::size_t i = 0; i < sample.size(); ++i)
    ratios[static_cast<Eigen::Index>(i)] = std::exp(model.log_ratio(truth.theta(), sample.point(i), y));
  const double mean = ratios.mean();
  const double sd = std::sqrt((ratios.array() - mean).square().sum() / static_cast<double>(ratios.size() - 1));
  const double se = sd / (std::sqrt(static_cast<double>(ratios.size())) * mean);
  CHECK(std::abs(mc - exact) <= 3.0 * se);
}

TEST_CASE("mc_loglik over one record equals log_marginal_mc", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(5));
  const auto sample = draw_sample(model, 200, 8);
  const auto data = glmm::simulate_y(model.design(), desk_truth(), 1, 9);
  const Vector theta = vec({4.0, 1.1});
  CHECK(mc_loglik(model, theta, data, sample) == log_marginal_mc(model, theta, data[0], sample));
}

TEST_CASE("all-impossible records raise a tagged error", "[engine]") {
  const ThresholdModel model;
  const auto sample = draw_sample(model, 50, 2);
  const Vector theta = Vector::Constant(1, 0.5);
  CHECK_THROWS_AS(log_marginal_mc(model, theta, 100.0, sample), AllImpossibleError);
  const ObservedData<double> data({-10.0, -5.0, 100.0});
  try {
    mc_loglik(model, theta, data, sample);
    FAIL("expected AllImpossibleError");
  } catch (const AllImpossibleError& e) {
    REQUIRE(e.record().has_value());
    CHECK(*e.record() == 2u);
  }
  // Partially impossible records are fine: only the finite ratios count.
  CHECK(std::isfinite(log_marginal_mc(model, theta, 0.0, sample)));
}

TEST_CASE("score matches finite differences of the log likelihood", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(8));
  const auto data = glmm::simulate_y(model.design(), desk_truth(), 30, 77);
  const auto sample = draw_sample(model, 300, 78);
  std::mt19937_64 gen(13);
  std::uniform_real_distribution<double> beta(-2.0, 7.0), delta(-2.5, 2.5);
  for (int k = 0; k < 20; ++k) {
    const Vector theta = vec({beta(gen), delta(gen)});
    const Vector score = mc_score(model, theta, data, sample);
    const Vector fd = fd_gradient([&](const Vector& t) { return mc_loglik(model, t, data, sample); }, theta, 1e-5);
    CHECK(rel_err(score, fd) < 1e-5);

    const Matrix hess = mc_hessian(model, theta, data, sample);
    CHECK((hess - hess.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    const Matrix fdh = fd_jacobian([&](const Vector& t) { return mc_score(model, t, data, sample); }, theta, 1e-5);
    CHECK(rel_err(hess, fdh) < 1e-4);
  }
}

TEST_CASE("score and Hessian of a generic model match finite differences", "[engine]") {
  const QuadraticToyModel model;
  const ObservedData<double> data({-1.0, 0.2, 0.7, 1.5});
  const auto sample = draw_sample(model, 400, 5);
  const Vector theta = vec({0.8, 0.3});
  const Vector score = mc_score(model, theta, data, sample);
  const Vector fd = fd_gradient([&](const Vector& t) { return mc_loglik(model, t, data, sample); }, theta);
  CHECK(rel_err(score, fd) < 1e-6);
  const Matrix fdh = fd_jacobian([&](const Vector& t) { return mc_score(model, t, data, sample); }, theta);
  CHECK(rel_err(mc_hessian(model, theta, data, sample), fdh) < 1e-5);
}

TEST_CASE("uniform-weights score is forced analytically", "[engine]") {
  // beta = 0, delta = 0, T = 3, x_k = k/3, y = (1,1,1): sum_k (1 - 1/2) k/3 = 1.
  const glmm::GlmmModel model(glmm::mcculloch_design(3));
  const auto sample = draw_sample(model, 64, 1);
  const ObservedData<Vector> data({Vector::Ones(3)});
  const Vector score = mc_score(model, Vector::Zero(2), data, sample);
  CHECK(score[0] == Catch::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("evaluations are invariant under permutation of points and records", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(6));
  const auto data = glmm::simulate_y(model.design(), desk_truth(), 40, 31);
  const auto sample = draw_sample(model, 250, 32);
  const auto sample_p = permuted(sample, 9);
  auto records = data.records();
  std::shuffle(records.begin(), records.end(), std::mt19937_64(10));
  const ObservedData<Vector> data_p(records);
  const Vector theta = vec({4.5, 0.9});

  const auto a = evaluate(model, theta, data, sample, Derivatives::hessian);
  const auto b = evaluate(model, theta, data_p, sample_p, Derivatives::hessian);
  CHECK(b.loglik == Catch::Approx(a.loglik).epsilon(1e-10));
  CHECK(rel_err(b.score, a.score) < 1e-10);
  CHECK(rel_err(b.hessian, a.hessian) < 1e-10);
}

TEST_CASE("batched GLMM evaluator agrees with the pointwise evaluator", "[engine][glmm]") {
  const auto design = glmm::influenza_design();
  const glmm::GlmmModel model(design);
  const auto truth = params({-1.0, -1.5, -2.0, -1.2}, {0.8, 1.4, 1.9});
  const auto data = glmm::simulate_y(design, truth, 25, 3);
  const auto sample = draw_sample(model, 400, 4);
  const Vector theta = truth.theta();

  const PointwiseEvaluator<glmm::GlmmModel> slow(model, theta, sample);
  const glmm::GlmmEvaluator cached(design, theta, sample);
  const glmm::GlmmEvaluator streaming(design, theta, sample, 0);
  for (std::size_t j = 0; j < 5; ++j) {
    RecordWorkspace w1, w2, w3;
    const auto a = record_terms(slow, data[j], sample.size(), Derivatives::hessian, w1);
    const auto b = record_terms(cached, data[j], sample.size(), Derivatives::hessian, w2);
    const auto c = record_terms(streaming, data[j], sample.size(), Derivatives::hessian, w3);
    CHECK(b.log_marginal == Catch::Approx(a.log_marginal).epsilon(1e-12));
    CHECK(c.log_marginal == Catch::Approx(a.log_marginal).epsilon(1e-12));
    CHECK(rel_err(b.score, a.score) < 1e-11);
    CHECK(rel_err(c.score, a.score) < 1e-11);
    CHECK(rel_err(b.hessian, a.hessian) < 1e-11);
    CHECK(rel_err(c.hessian, a.hessian) < 1e-11);
  }
}

TEST_CASE("evaluation is bitwise identical across thread counts", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(10));
  const auto data = glmm::simulate_y(model.design(), desk_truth(), 101, 1);
  const auto sample = draw_sample(model, 300, 2);
  const Vector theta = vec({5.2, 0.6});
  const auto one = evaluate(model, theta, data, sample, Derivatives::hessian, {1});
  const auto four = evaluate(model, theta, data, sample, Derivatives::hessian, {4});
  CHECK(one.loglik == four.loglik);
  CHECK(one.score == four.score);
  CHECK(one.hessian == four.hessian);
}

TEST_CASE("fresh-sample scheme", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(5));

  SECTION("one record reproduces the shared scheme with the same seed") {
    const auto data = glmm::simulate_y(model.design(), desk_truth(), 1, 4);
    const Vector theta = vec({4.0, 1.0});
    const auto shared = draw_sample(model, 500, 123);
    CHECK(mc_loglik_fresh(model, theta, data, 500, 123) == mc_loglik(model, theta, data, shared));
  }

  SECTION("constant-ratio case is exact") {
    const auto data = glmm::simulate_y(model.design(), desk_truth(), 12, 4);
    CHECK(mc_loglik_fresh(model, Vector::Zero(2), data, 50, 9) ==
          Catch::Approx(-12.0 * 5.0 * std::numbers::ln2).epsilon(1e-14));
  }

  SECTION("deterministic given the seed, and records use independent draws") {
    const auto data = all_ones(3, 5);
    const Vector theta = vec({3.0, 1.5});
    CHECK(mc_loglik_fresh(model, theta, data, 100, 5) == mc_loglik_fresh(model, theta, data, 100, 5));
    const auto samples = draw_fresh_samples(model, 3, 100, 5);
    CHECK(samples[0].data() != samples[1].data());
    const auto terms = all_record_terms_fresh(model, theta, data, samples, Derivatives::none);
    CHECK(terms[0].log_marginal != terms[1].log_marginal);
  }

  SECTION("rejects m_per_obs = 0") {
    CHECK_THROWS_AS(mc_loglik_fresh(model, Vector::Zero(2), all_ones(2, 5), 0, 1), InvalidInput);
  }
}

TEST_CASE("theta of the wrong length is rejected", "[engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(5));
  const auto sample = draw_sample(model, 10, 1);
  CHECK_THROWS_AS(log_marginal_mc(model, Vector::Zero(3), Vector::Ones(5), sample), InvalidInput);
}
