#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "mcmle/study.hpp"
#include "test_support.hpp"

using namespace mcmle;
using namespace mcmle::testing;

TEST_CASE("convergence experiment", "[study]") {
  const auto design = glmm::mcculloch_design(5);

  SECTION("RMSE decays at the square-root rate") {
    const auto res =
        study::convergence_experiment(design, desk_truth(), Vector::Ones(5), {100, 1000, 10000}, 50, 11, 64, 2);
    REQUIRE(res.slope.has_value());
    CHECK(*res.slope >= -0.65);
    CHECK(*res.slope <= -0.35);
    REQUIRE(res.rows.size() == 3);
    for (std::size_t k = 1; k < res.rows.size(); ++k) CHECK(res.rows[k].rmse < res.rows[k - 1].rmse);
  }

  SECTION("constant-ratio model is exact for every m") {
    const auto res = study::convergence_experiment(design, params({0.0}, {0.0}), vec({1, 0, 1, 1, 0}), {1, 10, 100}, 5, 3);
    for (const auto& r : res.rows) CHECK(r.rmse <= 1e-14);
    CHECK(res.exact == Catch::Approx(-5.0 * std::numbers::ln2).epsilon(1e-14));
    CHECK_FALSE(res.slope.has_value());
  }

  SECTION("rejects empty configurations") {
    CHECK_THROWS_AS(study::convergence_experiment(design, desk_truth(), Vector::Ones(5), {}, 5, 1), InvalidInput);
    CHECK_THROWS_AS(study::convergence_experiment(design, desk_truth(), Vector::Ones(5), {10}, 0, 1), InvalidInput);
  }
}

TEST_CASE("scheme variance comparison", "[study]") {
  const auto design = glmm::mcculloch_design(5);
  const auto truth = desk_truth();

  SECTION("fresh samples are at least as noisy as a shared sample") {
    const auto data = study::generate_dataset(design, truth, 20, 4);
    const auto cmp = study::scheme_variance_compare(design, truth, data, 50, 200, 5, 2);
    CHECK(cmp.replicates == 200);
    CHECK(cmp.trace_fresh >= cmp.trace_shared - 2.0 * cmp.se_difference);
    CHECK(cmp.se_shared > 0.0);
    CHECK(cmp.se_fresh > 0.0);
  }

  SECTION("a single record makes the schemes coincide") {
    const auto data = study::generate_dataset(design, truth, 1, 6);
    const auto cmp = study::scheme_variance_compare(design, truth, data, 50, 300, 7, 2);
    const double combined = std::sqrt(cmp.se_shared * cmp.se_shared + cmp.se_fresh * cmp.se_fresh);
    CHECK(std::abs(cmp.trace_fresh - cmp.trace_shared) <= 3.0 * combined);
  }

  SECTION("ratio free of the missing data has no Monte Carlo variability") {
    // Without random effects the log ratio does not depend on x.
    const glmm::GlmmDesign fixed_only(design.X(), Matrix(5, 0), {});
    const auto data = study::generate_dataset(fixed_only, params({1.0}, {}), 10, 8);
    const auto cmp = study::scheme_variance_compare(fixed_only, params({0.5}, {}), data, 20, 100, 9);
    CHECK(cmp.trace_shared == Catch::Approx(0.0).margin(1e-20));
    CHECK(cmp.trace_fresh == Catch::Approx(0.0).margin(1e-20));
  }

  SECTION("needs at least 100 replicates") {
    const auto data = study::generate_dataset(design, truth, 5, 1);
    CHECK_THROWS_AS(study::scheme_variance_compare(design, truth, data, 10, 99, 1), InvalidInput);
  }
}

TEST_CASE("jackknife helpers", "[study]") {
  RowMatrix X(4, 1);
  X << 1, 2, 4, 7;
  // Sample variance of {1, 2, 4, 7} is 7.
  CHECK(study::detail::trace_cov(X) == Catch::Approx(7.0));
  const auto loo = study::detail::jackknife_trace(X);
  RowMatrix drop(3, 1);
  drop << 1, 2, 4;
  CHECK(loo[3] == Catch::Approx(study::detail::trace_cov(drop)));
}

TEST_CASE("coverage study", "[study]") {
  const auto design = glmm::mcculloch_design(5);
  const auto truth = desk_truth();

  SECTION("single replicate is structurally consistent") {
    const auto res = study::coverage_study(design, truth, 2000, 2000, 1, 0.999, 1);
    REQUIRE(res.outcomes.size() == 1);
    const auto& o = res.outcomes[0];
    REQUIRE(o.valid);
    CHECK(res.covered <= 1);
    CHECK(res.invalid == 0);
    REQUIRE(res.exact_vcov.has_value());
    const auto region = confidence_ellipse(*res.exact_vcov, o.estimate, 0.999);
    CHECK(ellipse_contains(region, res.truth) == o.covered);
    CHECK(o.estimate[1] >= 0.0);
    CHECK(res.estimates().size() == 1);
  }

  SECTION("deterministic and independent of the thread count") {
    study::CoverageOptions opts;
    opts.mode = study::EllipseMode::plug_in;
    opts.threads = 1;
    const auto a = study::coverage_study(design, truth, 100, 100, 6, 0.95, 42, opts);
    opts.threads = 3;
    const auto b = study::coverage_study(design, truth, 100, 100, 6, 0.95, 42, opts);
    CHECK(a.covered == b.covered);
    CHECK(a.invalid == b.invalid);
    for (std::size_t r = 0; r < 6; ++r) {
      CHECK(a.outcomes[r].estimate == b.outcomes[r].estimate);
      CHECK(a.outcomes[r].quadratic_form == b.outcomes[r].quadratic_form);
      CHECK(a.outcomes[r].data_seed == b.outcomes[r].data_seed);
    }
    CHECK(a.outcomes[0].data_seed != a.outcomes[1].data_seed);
  }

  SECTION("too many failed replicates abort the study") {
    study::CoverageOptions opts;
    opts.opt.max_iter = 1;
    CHECK_THROWS_AS(study::coverage_study(design, truth, 50, 50, 4, 0.95, 1, opts), study::StudyError);
  }

  SECTION("rejects zero replicates") {
    CHECK_THROWS_AS(study::coverage_study(design, truth, 10, 10, 0, 0.95, 1), InvalidInput);
  }
}
