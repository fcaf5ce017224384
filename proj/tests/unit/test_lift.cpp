#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "regmarket/lift.hpp"

using namespace regmarket;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

struct Fixture {
  ModelConfig config;
  FeatureModel fm;
  PosteriorState posterior;
};

// Four features (one central) with a dense covariance and an arbitrary posterior.
Fixture dense_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Fixture f;
  f.config.include_intercept = true;
  Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(4, 4, [&] { return n01(rng); });
  f.fm.covariance = a * a.transpose() + 0.3 * Eigen::MatrixXd::Identity(4, 4);
  f.fm.mean = Eigen::VectorXd::NullaryExpr(4, [&] { return n01(rng); });
  Eigen::MatrixXd l = f.fm.covariance.llt().matrixL();
  f.fm.background.resize(4000, 4);
  for (Eigen::Index i = 0; i < f.fm.background.rows(); ++i)
    f.fm.background.row(i) = (f.fm.mean + l * Eigen::VectorXd::NullaryExpr(4, [&] { return n01(rng); })).transpose();
  f.posterior.mean = Eigen::VectorXd::NullaryExpr(5, [&] { return n01(rng); });
  f.posterior.precision = 50.0 * Eigen::MatrixXd::Identity(5, 5);
  return f;
}

LiftSpec spec_of(Conditioning c, Backend b, std::size_t samples = 1000, ScoringRule rule = ScoringRule::squared_error) {
  LiftSpec s;
  s.conditioning = c;
  s.backend = b;
  s.mc_samples = samples;
  s.rule = rule;
  return s;
}

}  // namespace

TEST_CASE("coalition bit operations") {
  const auto c = Coalition::of({0, 3});
  CHECK(c.bits() == 9);
  CHECK(c.contains(3));
  CHECK_FALSE(c.contains(1));
  CHECK(c.with(1).size() == 3);
  CHECK(c.without(0) == Coalition::of({3}));
  CHECK(c.members() == std::vector<std::size_t>{0, 3});
  CHECK(Coalition::grand(3).bits() == 7);
  CHECK_THROWS_AS(Coalition::grand(65), Error);
}

TEST_CASE("fit_feature_model uses the 1/n covariance and subsamples the background") {
  MarketData data;
  data.features = Eigen::MatrixXd{{1, 2}, {3, 2}, {5, 8}, {7, 4}};
  data.target = Eigen::VectorXd::Zero(4);
  data.columns = {"a", "b"};
  data.central_count = 2;
  const auto fm = fit_feature_model(data, {0, 4});
  CHECK(fm.mean == Eigen::Vector2d(4.0, 4.0));
  CHECK_THAT(fm.covariance(0, 0), WithinAbs(5.0, 1e-12));
  CHECK_THAT(fm.covariance(0, 1), WithinAbs(3.0, 1e-12));
  CHECK(fm.background.rows() == 4);
  const auto small = fit_feature_model(data, {0, 4}, 2, 7);
  CHECK(small.background.rows() == 2);
  CHECK(fit_feature_model(data, {0, 4}, 2, 7).background == small.background);
  CHECK_THROWS_AS(fit_feature_model(data, {0, 5}), Error);
}

TEST_CASE("observational conditioning matches the Gaussian conditional law") {
  FeatureModel fm;
  fm.mean = Eigen::Vector2d(1.0, -1.0);
  fm.covariance = Eigen::Matrix2d{{2.0, 1.2}, {1.2, 1.0}};
  const auto b = condition_gaussian(fm, {0}, {1});
  const Eigen::Vector2d x(3.0, 0.0);
  CHECK_THAT(b.conditional_mean(x)[0], WithinAbs(-1.0 + 0.6 * 2.0, 1e-6));
  CHECK_THAT(b.covariance(0, 0), WithinAbs(1.0 - 1.44 / 2.0, 1e-6));

  const auto m = marginal_gaussian(fm, {0}, {1});
  CHECK(m.conditional_mean(x)[0] == -1.0);
  CHECK(m.covariance(0, 0) == 1.0);
}

TEST_CASE("closed-form lift agrees with the Monte-Carlo estimator") {
  const auto f = dense_fixture(11);
  const Eigen::Vector4d x(0.3, -1.2, 0.8, 2.0);
  const double y = 0.7;
  for (auto cond : {Conditioning::observational, Conditioning::interventional}) {
    LiftEvaluator exact(f.fm, 1, spec_of(cond, Backend::closed_form), f.config);
    LiftEvaluator mc(f.fm, 1, spec_of(cond, Backend::monte_carlo, 100000), f.config);
    for (std::uint64_t bits = 0; bits < 8; ++bits) {
      const Coalition c(bits);
      const auto e = mc.estimate(f.posterior, c, x, y, 5);
      const double cf = exact(f.posterior, c, x, y);
      INFO(to_string(cond) << " coalition " << bits << ": closed form " << cf << ", MC " << e.value << " +- " << e.std_error);
      if (cond == Conditioning::observational) {
        CHECK(std::abs(cf - e.value) < 5.0 * e.std_error + 1e-9);
      } else {
        // The background is an empirical sample of the law, so allow for its own error too.
        CHECK(std::abs(cf - e.value) < 5.0 * e.std_error + 0.05 * cf + 1e-9);
      }
    }
  }
}

TEST_CASE("grand coalition equals the plain predictive score") {
  const auto f = dense_fixture(12);
  const Eigen::Vector4d x(1.0, 0.0, -1.0, 0.5);
  for (auto rule : {ScoringRule::squared_error, ScoringRule::nlpd}) {
    LiftEvaluator lift(f.fm, 1, spec_of(Conditioning::observational, Backend::monte_carlo, 10, rule), f.config);
    const double plain = score(predict(f.posterior, design_row(f.config, x), f.config), 2.0, rule);
    CHECK(lift(f.posterior, Coalition::grand(3), x, 2.0) == plain);
  }
}

TEST_CASE("coalition values ignore the coordinates they do not reveal") {
  const auto f = dense_fixture(13);
  for (auto cond : {Conditioning::observational, Conditioning::interventional}) {
    LiftEvaluator lift(f.fm, 1, spec_of(cond, Backend::closed_form), f.config);
    const Eigen::Vector4d x(0.2, 1.0, 2.0, 3.0);
    const Eigen::Vector4d moved(0.2, 1.0, -5.0, 9.0);
    CHECK(lift(f.posterior, Coalition::of({0}), x, 1.0) == lift(f.posterior, Coalition::of({0}), moved, 1.0));
  }
}

TEST_CASE("interventional values do not depend on revealed correlates") {
  // The unknown block keeps its marginal law whatever the known coordinates are.
  const auto f = dense_fixture(14);
  LiftEvaluator lift(f.fm, 1, spec_of(Conditioning::interventional, Backend::closed_form), f.config);
  const auto& b = lift.block(Coalition::of({1}));
  CHECK(b.gain.cwiseAbs().maxCoeff() == 0.0);
  CHECK(b.offset == detail::sub(f.fm.mean, b.unknown));
}

TEST_CASE("independent features make both conditionings coincide") {
  auto f = dense_fixture(15);
  f.fm.covariance = Eigen::Vector4d(1.0, 2.0, 0.5, 3.0).asDiagonal();
  LiftEvaluator obs(f.fm, 1, spec_of(Conditioning::observational, Backend::closed_form), f.config);
  LiftEvaluator itv(f.fm, 1, spec_of(Conditioning::interventional, Backend::closed_form), f.config);
  const Eigen::Vector4d x(0.5, -0.5, 1.5, 0.0);
  for (std::uint64_t bits = 0; bits < 8; ++bits)
    CHECK_THAT(obs(f.posterior, Coalition(bits), x, 0.3), WithinRel(itv(f.posterior, Coalition(bits), x, 0.3), 1e-9));
}

TEST_CASE("population expectation matches a long-run sample average") {
  SyntheticSpec spec;
  spec.central_count = 1;
  spec.support_count = 2;
  spec.confounder_strength = 1.0;
  spec.feature_noise_std = 0.5;
  spec.length = 200000;
  const auto data = generate_confounded(spec, 3);
  const auto pm = population_moments(spec, data);
  FeatureModel fm{pm.mean, pm.covariance, {}};
  ModelConfig config;
  PosteriorState post{Eigen::Vector4d(0.1, 0.9, 0.6, 1.3), Eigen::Matrix4d::Identity()};
  for (auto cond : {Conditioning::observational, Conditioning::interventional}) {
    LiftEvaluator lift(fm, 1, spec_of(cond, Backend::closed_form), config);
    for (std::uint64_t bits = 0; bits < 4; ++bits) {
      double sum = 0.0;
      for (Eigen::Index t = 0; t < data.features.rows(); ++t)
        sum += lift(post, Coalition(bits), data.features.row(t).transpose(), data.target[t]);
      const double avg = sum / double(data.rows());
      INFO(to_string(cond) << " coalition " << bits);
      CHECK_THAT(lift.expected(post, Coalition(bits), pm), WithinRel(avg, 0.02));
    }
  }
  LiftEvaluator mc(fm, 1, spec_of(Conditioning::observational, Backend::monte_carlo), config);
  CHECK_THROWS_AS(mc.expected(post, Coalition(), pm), Error);
}

TEST_CASE("lift evaluator validates its inputs") {
  const auto f = dense_fixture(16);
  LiftEvaluator lift(f.fm, 1, spec_of(Conditioning::observational, Backend::closed_form), f.config);
  CHECK_THROWS_AS(lift(f.posterior, Coalition(8), Eigen::Vector4d::Zero(), 0.0), Error);
  CHECK_THROWS_AS(lift(f.posterior, Coalition(), Eigen::Vector3d::Zero(), 0.0), Error);
  auto no_background = f.fm;
  no_background.background.resize(0, 4);
  CHECK_THROWS_AS(LiftEvaluator(no_background, 1, spec_of(Conditioning::interventional, Backend::monte_carlo), f.config),
                  Error);
  LiftSpec retrain = spec_of(Conditioning::observational, Backend::closed_form);
  retrain.evaluation = Evaluation::retrain;
  CHECK_THROWS_AS(eval_lift(retrain, f.posterior, f.fm, 1, f.config, Coalition(), Eigen::Vector4d::Zero(), 0.0), Error);
}

TEST_CASE("Monte-Carlo lift is reproducible for a fixed seed") {
  const auto f = dense_fixture(17);
  LiftEvaluator lift(f.fm, 1, spec_of(Conditioning::observational, Backend::monte_carlo, 500), f.config);
  const Eigen::Vector4d x(1.0, 2.0, 3.0, 4.0);
  CHECK(lift(f.posterior, Coalition(2), x, 0.0, 9) == lift(f.posterior, Coalition(2), x, 0.0, 9));
  CHECK(lift(f.posterior, Coalition(2), x, 0.0, 9) != lift(f.posterior, Coalition(2), x, 0.0, 10));
}

TEST_CASE("per-coalition retraining fits one model per subset") {
  ModelConfig config;
  config.forgetting = 1.0;
  config.prior_precision = 1e-6;
  CoalitionModels models(1, 2, config);
  CHECK(models.posterior(Coalition()).dimension() == 2);
  CHECK(models.posterior(Coalition::grand(2)).dimension() == 4);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int t = 0; t < 2000; ++t) {
    const Eigen::Vector3d x(n01(rng), n01(rng), n01(rng));
    models.update(x, 1.0 + 2.0 * x[0] - x[2]);
  }
  const auto& full = models.posterior(Coalition::grand(2)).mean;
  CHECK((full - Eigen::Vector4d(1.0, 2.0, 0.0, -1.0)).norm() < 1e-4);
  // Dropping the informative column leaves its variance as irreducible error.
  const Eigen::Vector3d probe(0.0, 0.0, 1.0);
  CHECK(models.value(Coalition::of({1}), probe, 0.0, ScoringRule::squared_error) ==
        score(predict(models.posterior(Coalition::of({1})), models.design(Coalition::of({1}), probe), config), 0.0,
              ScoringRule::squared_error));
  CHECK_THROWS_AS(CoalitionModels(1, 17, config), Error);
}
