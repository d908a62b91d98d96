#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "mcmle/oracle.hpp"
#include "test_support.hpp"

using namespace mcmle;
using namespace mcmle::testing;

namespace {

// Frozen values for T = 5, beta = 5, delta = sqrt(1/2). Computed with an
// independent adaptive-quadrature implementation and confirmed by the
// Gauss-Hermite oracle at orders 64/128 and 128/256.
constexpr double kJ[3] = {0.05789198309249568, -0.05539475503328321, 0.12013808619908901};
constexpr double kW[3] = {0.007496181632479344, -0.008872183992607021, 0.011790883147297041};
constexpr double kLogF11111 = -0.5450742333948037;
constexpr double kLogF01011 = -4.139757951232066;

Matrix sym2(const double (&v)[3]) {
  Matrix A(2, 2);
  A << v[0], v[1], v[1], v[2];
  return A;
}

}  // namespace

TEST_CASE("Gauss-Hermite rule integrates polynomials against the normal density", "[oracle]") {
  for (std::size_t order : {1, 2, 5, 16, 64, 128}) {
    const auto rule = oracle::gauss_hermite(order);
    CHECK(std::abs(rule.weights.sum() - 1.0) <= 1e-12);
    CHECK(rule.weights.minCoeff() >= 0.0);
    CHECK(std::abs(rule.weights.dot(rule.nodes)) <= 1e-12);
    if (order >= 2) CHECK(std::abs(rule.weights.dot(rule.nodes.cwiseAbs2()) - 1.0) <= 1e-10);
    if (order >= 3) {
      CHECK(std::abs(rule.weights.dot(rule.nodes.array().pow(3).matrix())) <= 1e-10);
      CHECK(std::abs(rule.weights.dot(rule.nodes.array().pow(4).matrix()) - 3.0) <= 1e-10);
    }
    if (order >= 4) CHECK(std::abs(rule.weights.dot(rule.nodes.array().pow(6).matrix()) - 15.0) <= 1e-9);
  }
  CHECK_THROWS_AS(oracle::gauss_hermite(0), InvalidInput);
}

TEST_CASE("quadrature log likelihood", "[oracle]") {
  const auto design = glmm::mcculloch_design(5);
  const auto r64 = oracle::gauss_hermite(64);

  SECTION("frozen reference values") {
    CHECK(oracle::gh_loglik(design, desk_truth(), ObservedData<Vector>({Vector::Ones(5)}), r64) ==
          Catch::Approx(kLogF11111).epsilon(1e-12));
    CHECK(oracle::gh_loglik(design, desk_truth(), ObservedData<Vector>({vec({0, 1, 0, 1, 1})}), r64) ==
          Catch::Approx(kLogF01011).epsilon(1e-12));
  }

  SECTION("orders 64 and 128 agree") {
    const auto r128 = oracle::gauss_hermite(128);
    const auto data = glmm::simulate_y(design, desk_truth(), 30, 2);
    for (double sigma : {0.1, 1.0, 2.0, 3.0}) {
      const auto p = params({2.0}, {sigma});
      const double a = oracle::gh_loglik(design, p, data, r64);
      const double b = oracle::gh_loglik(design, p, data, r128);
      CHECK(std::abs(a - b) <= 1e-10 * std::abs(b));
    }
  }

  SECTION("delta = 0 is an ordinary Bernoulli likelihood") {
    const auto data = glmm::simulate_y(design, desk_truth(), 20, 3);
    const double beta = 1.3;
    double ref = 0.0;
    for (const auto& y : data)
      for (Eigen::Index k = 0; k < 5; ++k) {
        const double eta = beta * design.X()(k, 0);
        ref += y[k] * eta - std::log1p(std::exp(eta));
      }
    CHECK(oracle::gh_loglik(design, params({beta}, {0.0}), data, r64) == Catch::Approx(ref).epsilon(1e-13));
  }

  SECTION("symmetric in the sign of delta") {
    const auto data = glmm::simulate_y(design, desk_truth(), 20, 4);
    for (double d : {0.3, 1.0, 2.5}) {
      const double a = oracle::gh_loglik(design, params({4.0}, {d}), data, r64);
      const double b = oracle::gh_loglik(design, params({4.0}, {-d}), data, r64);
      CHECK(std::abs(a - b) <= 1e-10 * std::abs(a));
    }
  }

  SECTION("analytic derivatives match finite differences") {
    const auto data = glmm::simulate_y(design, desk_truth(), 25, 5);
    const Vector theta = vec({4.2, 0.9});
    const auto ev = oracle::gh_evaluate(design, theta, data, r64, Derivatives::hessian);
    auto f = [&](const Vector& t) { return oracle::gh_evaluate(design, t, data, r64).loglik; };
    auto g = [&](const Vector& t) { return oracle::gh_evaluate(design, t, data, r64, Derivatives::gradient).score; };
    CHECK(rel_err(ev.score, fd_gradient(f, theta)) < 1e-7);
    CHECK(rel_err(ev.hessian, fd_jacobian(g, theta)) < 1e-7);
  }

  SECTION("multiple random effects are rejected") {
    CHECK_THROWS_AS(oracle::gh_loglik(glmm::influenza_design(), params({0, 0, 0, 0}, {1, 1, 1}),
                                      ObservedData<Vector>({Vector::Ones(4)}), r64),
                    InvalidInput);
  }
}

TEST_CASE("exact J, V and W by enumeration", "[oracle]") {
  SECTION("frozen T = 5 values") {
    const auto info = oracle::exact_JVW(glmm::mcculloch_design(5), desk_truth());
    CHECK(rel_err(info.J, sym2(kJ)) < 1e-6);
    CHECK(rel_err(info.W, sym2(kW)) < 1e-6);
    CHECK(std::abs(info.total_probability - 1.0) < 1e-12);
  }

  SECTION("V equals J under correct specification") {
    for (const auto& p : {desk_truth(), params({-1.0}, {2.0}), params({0.5}, {0.2})}) {
      const auto info = oracle::exact_JVW(glmm::mcculloch_design(6), p);
      CHECK(rel_err(info.V, info.J) < 1e-6);
      const Eigen::SelfAdjointEigenSolver<Matrix> eig(info.W);
      CHECK(eig.eigenvalues().minCoeff() >= -1e-14);
    }
  }

  SECTION("single position has J = 1/4 at the origin") {
    const auto info = oracle::exact_JVW(glmm::mcculloch_design(1), params({0.0}, {0.0}));
    CHECK(info.J(0, 0) == Catch::Approx(0.25).epsilon(1e-12));
  }

  SECTION("caps") {
    oracle::ExactOptions opts;
    opts.max_T = 4;
    CHECK_THROWS_AS(oracle::exact_JVW(glmm::mcculloch_design(5), desk_truth(), opts), InvalidInput);
    CHECK_THROWS_AS(oracle::exact_JVW(glmm::influenza_design(), params({0, 0, 0, 0}, {1, 1, 1})), InvalidInput);
  }
}

TEST_CASE("Kullback-Leibler information", "[oracle]") {
  const auto design = glmm::mcculloch_design(5);
  const auto truth = desk_truth();
  CHECK(std::abs(oracle::kl_info(design, truth, truth)) < 1e-15);
  for (double b : {3.0, 4.5, 5.0, 5.5, 7.0})
    for (double d : {0.1, 0.5, 1.0, 2.0}) CHECK(oracle::kl_info(design, truth, params({b}, {d})) >= -1e-15);

  auto K = [&](const Vector& t) { return oracle::kl_info(design, truth, glmm::GlmmParams::from_theta(design, t)); };
  const Vector grad = fd_gradient(K, truth.theta(), 1e-4);
  CHECK(grad.cwiseAbs().maxCoeff() < 1e-6);
  // Hessian of K at the truth is J.
  const Matrix hess = fd_jacobian([&](const Vector& t) { return fd_gradient(K, t, 1e-4); }, truth.theta(), 1e-3);
  CHECK(rel_err(0.5 * (hess + hess.transpose()), sym2(kJ)) < 1e-4);
}

TEST_CASE("marginal success probabilities", "[oracle]") {
  const auto design = glmm::mcculloch_design(3);
  const auto p0 = oracle::marginal_success_probabilities(design, params({0.0}, {1.7}), oracle::gauss_hermite(64));
  for (Eigen::Index k = 0; k < 3; ++k) CHECK(p0[k] == Catch::Approx(0.5).epsilon(1e-14));
  const auto p = oracle::marginal_success_probabilities(design, params({3.0}, {0.0}), oracle::gauss_hermite(64));
  CHECK(p[2] == Catch::Approx(glmm::logistic(3.0)).epsilon(1e-14));
}
