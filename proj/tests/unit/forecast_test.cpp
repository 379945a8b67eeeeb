#include <cmath>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "picl/error.hpp"
#include "picl/forecast.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"

namespace fc = picl::forecast;

namespace {

std::vector<double> random_vector(picl::Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * rng.uniform(0.01, 100.0);
  return v;
}

}  // namespace

TEST(BoundedError, ReferenceValues) {
  const std::vector<double> z{1.0, -2.0, 0.5}, zero{0.0, 0.0, 0.0};
  std::vector<double> neg(3), twice(3);
  for (int i = 0; i < 3; ++i) {
    neg[i] = -z[i];
    twice[i] = 2.0 * z[i];
  }
  EXPECT_EQ(fc::bounded_relative_error(z, z), 0.0);
  EXPECT_DOUBLE_EQ(fc::bounded_relative_error(neg, z), 1.0);
  EXPECT_NEAR(fc::bounded_relative_error(twice, z), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(fc::bounded_relative_error(zero, z), 1.0);
  bool both = false;
  EXPECT_EQ(fc::bounded_relative_error(zero, zero, &both), 0.0);
  EXPECT_TRUE(both);
  fc::bounded_relative_error(z, z, &both);
  EXPECT_FALSE(both);
  EXPECT_THROW(fc::bounded_relative_error(z, std::vector<double>{1.0}), picl::Error);
}

TEST(BoundedError, RangeSymmetryAndScaleInvariance) {
  picl::Rng rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto n = 1 + static_cast<std::size_t>(rng.uniform(0.0, 12.0));
    const auto p = random_vector(rng, n), t = random_vector(rng, n);
    const double e = fc::bounded_relative_error(p, t);
    ASSERT_GE(e, 0.0);
    ASSERT_LE(e, 1.0);
    EXPECT_NEAR(e, oracle::bounded_error(p, t), 1e-12);
    EXPECT_EQ(e, fc::bounded_relative_error(t, p));
    const double c = rng.uniform(0.001, 1000.0);
    std::vector<double> ps(n), ts(n);
    for (std::size_t k = 0; k < n; ++k) {
      ps[k] = c * p[k];
      ts[k] = c * t[k];
    }
    EXPECT_NEAR(fc::bounded_relative_error(ps, ts), e, 1e-12);
  }
}

TEST(Median, EvenRuleAndInvalidSamples) {
  EXPECT_EQ(fc::median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(fc::median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_EQ(fc::median({7.0}), 7.0);
  EXPECT_THROW(fc::median({}), picl::Error);
  const std::vector<std::optional<double>> s{1.0, std::nullopt, 5.0, 2.0, std::nullopt};
  EXPECT_EQ(fc::median_aggregate(s), 2.0);
  const std::vector<std::optional<double>> none{std::nullopt, std::nullopt};
  EXPECT_FALSE(fc::median_aggregate(none).has_value());
}

TEST(History, SharedPredictionWindow) {
  EXPECT_EQ(fc::history_start(1024, 1024), 0u);
  EXPECT_EQ(fc::history_start(64, 1024), 960u);
  for (std::uint32_t L : {64u, 128u, 256u}) EXPECT_EQ(fc::history_start(L, 256) + L, 256u);
  EXPECT_THROW(fc::history_start(512, 256), picl::Error);
}

TEST(ChannelSeed, DependsOnKeyOnly) {
  const auto a = fc::channel_seed(1, "traj0", "x1");
  EXPECT_EQ(a, fc::channel_seed(1, "traj0", "x1"));
  EXPECT_NE(a, fc::channel_seed(2, "traj0", "x1"));
  EXPECT_NE(a, fc::channel_seed(1, "traj1", "x1"));
  EXPECT_NE(a, fc::channel_seed(1, "traj0", "x2"));
}

TEST(Summarize, MeanAndStandardError) {
  fc::ErrorReport r;
  r.horizon = 2;
  r.per_trajectory = {{0.1, 0.2}, {0.3, 0.6}};
  fc::summarize(r);
  EXPECT_DOUBLE_EQ(r.mean[0], 0.2);
  EXPECT_DOUBLE_EQ(r.mean[1], 0.4);
  // sample sd of {0.1, 0.3} is sqrt(0.02); divided by sqrt(2).
  EXPECT_NEAR(r.std_error[0], 0.1, 1e-15);
  r.per_trajectory.resize(1);
  fc::summarize(r);
  EXPECT_EQ(r.std_error[1], 0.0);
  r.per_trajectory.clear();
  fc::summarize(r);
  EXPECT_TRUE(std::isnan(r.mean[0]));
  EXPECT_EQ(fc::ErrorReport::from_json(r.to_json()).horizon, 2u);
}

TEST(ForecastState, ScoresEveryStepAgainstTruth) {
  oracle::TempDir dir;
  const auto refs = fixture::trajectories(dir, 1, 80);
  auto model = picl::mock::MockModel::create({});
  auto s = fixture::session(model);
  fc::ForecastRequest req;
  req.history_start = 8;
  req.history_length = 64;
  req.horizon = 8;
  req.n_samples = 5;
  req.seed = 3;
  const auto f = fc::forecast_state(*s, refs[0], req);
  ASSERT_EQ(f.errors.size(), 8u);
  ASSERT_EQ(f.predicted.size(), 8u);
  EXPECT_EQ(f.total_samples, 5u * 6 * 8);  // samples x channels x steps
  EXPECT_EQ(f.missing_steps, 0u);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& truth = refs[0].trajectory.states[72 + i].flatten();
    EXPECT_NEAR(f.errors[i], oracle::bounded_error(f.predicted[i], truth), 1e-12);
    EXPECT_LT(f.errors[i], 0.5);
  }
  EXPECT_EQ(fc::forecast_state(*s, refs[0], req).errors, f.errors);
  req.history_start = 40;
  EXPECT_THROW(fc::forecast_state(*s, refs[0], req), picl::Error);
}

TEST(ForecastState, InvalidSamplesAreDroppedAndCounted) {
  oracle::TempDir dir;
  const auto refs = fixture::trajectories(dir, 1, 50);
  picl::mock::MockConfig cfg;
  cfg.invalid_sample_rate = 1.0;
  auto s = fixture::session(picl::mock::MockModel::create(cfg));
  fc::ForecastRequest req;
  req.history_length = 32;
  req.horizon = 4;
  req.n_samples = 3;
  const auto f = fc::forecast_state(*s, refs[0], req);
  EXPECT_EQ(f.invalid_samples, f.total_samples);
  EXPECT_EQ(f.missing_steps, 4u);
  for (double e : f.errors) EXPECT_EQ(e, 1.0);
}

TEST(Sweep, ErrorFallsWithContextAndTablesAreWritten) {
  oracle::TempDir dir;
  const auto refs = fixture::trajectories(dir, 3, 264);
  auto s = fixture::session(picl::mock::MockModel::create({}));
  fc::SweepOptions opt;
  opt.context_lengths = {16, 64, 256};
  opt.horizon = 8;
  opt.n_samples = 5;
  const auto reports = fc::sweep(*s, {{"mass_spring_1d", refs}}, opt);
  ASSERT_EQ(reports.size(), 3u);
  for (const auto& r : reports) {
    EXPECT_FALSE(r.incomplete());
    EXPECT_EQ(r.n_completed(), 3u);
  }
  EXPECT_GT(reports[0].first_step_mean(), reports[1].first_step_mean());
  EXPECT_GT(reports[1].first_step_mean(), reports[2].first_step_mean());

  fc::write_error_tables(reports, dir.path());
  const auto first = picl::read_text_file(dir / "first_step_error.csv");
  EXPECT_EQ(std::count(first.begin(), first.end(), '\n'), 4);
  const auto steps = picl::read_text_file(dir / "per_step_error.csv");
  EXPECT_EQ(std::count(steps.begin(), steps.end(), '\n'), 1 + 3 * 8);
}

TEST(Sweep, AdapterFailureMarksCellIncomplete) {
  oracle::TempDir dir;
  auto refs = fixture::trajectories(dir, 2, 40);
  refs[1].path = dir / "missing.csv";
  auto s = fixture::session(picl::mock::MockModel::create({}));
  fc::SweepOptions opt;
  opt.context_lengths = {16, 32};
  opt.horizon = 4;
  opt.n_samples = 2;
  const auto reports = fc::sweep(*s, {{"mass_spring_1d", refs}}, opt);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.incomplete());
    EXPECT_EQ(r.n_completed(), 1u);
    EXPECT_EQ(r.failures.size(), 1u);
  }
}
