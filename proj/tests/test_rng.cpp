#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <set>

#include "mcmle/engine.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/rng.hpp"

using namespace mcmle;

TEST_CASE("xoshiro streams are reproducible and distinct", "[rng]") {
  auto a = make_stream(42, 0);
  auto b = make_stream(42, 0);
  auto c = make_stream(42, 1);
  auto d = make_stream(43, 0);
  bool differs_c = false, differs_d = false;
  for (int i = 0; i < 100; ++i) {
    const auto va = a();
    REQUIRE(va == b());
    differs_c = differs_c || va != c();
    differs_d = differs_d || va != d();
  }
  CHECK(differs_c);
  CHECK(differs_d);
}

TEST_CASE("substream seeds do not collide over a modest range", "[rng]") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 50; ++s)
    for (std::uint64_t k = 0; k < 200; ++k) seen.insert(substream_seed(s, k));
  CHECK(seen.size() == 50u * 200u);
}

TEST_CASE("uniform stays in the open unit interval", "[rng]") {
  auto rng = make_stream(1, 0);
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("normal quantile matches reference values", "[rng]") {
  CHECK(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-15));
  CHECK(normal_quantile(0.975) == Catch::Approx(1.959963984540054).epsilon(1e-14));
  CHECK(normal_quantile(0.025) == Catch::Approx(-1.959963984540054).epsilon(1e-14));
  CHECK(normal_quantile(1e-10) == Catch::Approx(-6.361340902404056).epsilon(1e-12));
  CHECK(std::isinf(normal_quantile(0.0)));
  CHECK(std::isinf(normal_quantile(1.0)));
}

TEST_CASE("normal quantile inverts the normal CDF across the range", "[rng]") {
  for (double p : {1e-12, 1e-8, 1e-4, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0 - 1e-4, 1.0 - 1e-8}) {
    const double x = normal_quantile(p);
    const double lower = 0.5 * std::erfc(-x / std::numbers::sqrt2);
    const double upper = 0.5 * std::erfc(x / std::numbers::sqrt2);
    if (p <= 0.5)
      CHECK(lower == Catch::Approx(p).epsilon(1e-13));
    else
      CHECK(upper == Catch::Approx(1.0 - p).epsilon(1e-7));
  }
}

TEST_CASE("draw_sample is deterministic and prefix-stable", "[rng][engine]") {
  const glmm::GlmmModel model(glmm::mcculloch_design(5));
  const auto s1 = draw_sample(model, 3, 42);
  const auto s2 = draw_sample(model, 3, 42);
  REQUIRE(s1.size() == 3);
  REQUIRE(s1.dim() == 1);
  CHECK(s1.data() == s2.data());
  CHECK(s1.generator_id() == kGeneratorId);
  CHECK(s1.seed() == 42u);

  const auto one = draw_sample(model, 1, 99);
  const auto two = draw_sample(model, 2, 99);
  CHECK(one.point(0)[0] == two.point(0)[0]);

  CHECK_THROWS_AS(draw_sample(model, 0, 1), InvalidInput);
}

TEST_CASE("standard normal draws have mean 0 and variance 1", "[rng][engine]") {
  // Monte Carlo error of the mean and variance at m = 1e5 is about 0.003 and
  // 0.0045, so a 0.02 band is beyond 4 standard errors.
  const glmm::GlmmModel model(glmm::mcculloch_design(5));
  const auto sample = draw_sample(model, 100000, 7);
  const auto x = sample.matrix().col(0);
  const double mean = x.mean();
  const double var = (x.array() - mean).square().sum() / static_cast<double>(x.size() - 1);
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.02);
}
