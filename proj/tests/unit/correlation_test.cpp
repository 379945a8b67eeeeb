#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "picl/correlation.hpp"
#include "picl/error.hpp"
#include "picl/random.hpp"

namespace corr = picl::correlation;
using picl::QuantityKind;

namespace {

std::pair<std::vector<double>, std::vector<double>> correlated_pair(std::uint64_t seed, std::size_t n) {
  picl::Rng rng(seed);
  const double a = rng.uniform(-2.0, 2.0);
  const double offset = rng.uniform(-1e3, 1e3);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = offset + rng.normal() * rng.uniform(0.1, 10.0);
    y[i] = a * x[i] + rng.normal();
  }
  return {x, y};
}

corr::CorrelationMatrix matrix_from(const std::vector<std::vector<double>>& e_by_block) {
  std::vector<std::uint32_t> blocks;
  std::vector<std::size_t> units;
  for (std::size_t b = 0; b < e_by_block.size(); ++b) {
    blocks.push_back(static_cast<std::uint32_t>(b * 4));
    units.push_back(e_by_block[b].size());
  }
  corr::CorrelationMatrix m(256, blocks, units);
  for (std::size_t b = 0; b < e_by_block.size(); ++b)
    for (std::size_t u = 0; u < e_by_block[b].size(); ++u) {
      const double r = e_by_block[b][u];
      m.set(b, u, QuantityKind::TotalEnergy, std::isnan(r) ? std::nullopt : std::optional<double>(r));
    }
  return m;
}

}  // namespace

TEST(Pearson, StreamingAgreesWithTwoPass) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [x, y] = correlated_pair(seed, 50 + seed * 7);
    corr::StreamingPearson s;
    for (std::size_t i = 0; i < x.size(); ++i) s.add(x[i], y[i]);
    const double expected = oracle::pearson_two_pass(x, y);
    ASSERT_TRUE(s.correlation().has_value());
    EXPECT_NEAR(*s.correlation(), expected, 1e-10);
    EXPECT_NEAR(*corr::pearson(x, y), expected, 1e-10);
  }
}

TEST(Pearson, ExactLinearRelations) {
  std::vector<double> x(20), up(20), down(20);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<double>(i) * 0.37 - 2.0;
    up[i] = 3.0 * x[i] + 1.0;
    down[i] = -0.5 * x[i] + 4.0;
  }
  EXPECT_EQ(*corr::pearson(x, up), 1.0);
  EXPECT_EQ(*corr::pearson(x, down), -1.0);
  EXPECT_EQ(*corr::pearson(x, x), 1.0);
}

TEST(Pearson, AffineInvarianceAndSymmetry) {
  const auto [x, y] = correlated_pair(42, 300);
  std::vector<double> xt(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xt[i] = 2.5 * x[i] - 7.0;
  EXPECT_NEAR(*corr::pearson(xt, y), *corr::pearson(x, y), 1e-12);
  for (auto& v : xt) v = -v;
  EXPECT_NEAR(*corr::pearson(xt, y), -*corr::pearson(x, y), 1e-12);
  EXPECT_NEAR(*corr::pearson(y, x), *corr::pearson(x, y), 1e-15);
}

TEST(Pearson, UndefinedAndInvalid) {
  const std::vector<double> c{1.0, 1.0, 1.0}, v{1.0, 2.0, 3.0};
  EXPECT_FALSE(corr::pearson(c, v).has_value());
  EXPECT_FALSE(corr::pearson(v, c).has_value());
  corr::StreamingPearson s;
  s.add(1.0, 2.0);
  EXPECT_FALSE(s.correlation().has_value());
  EXPECT_THROW(corr::pearson(std::vector<double>{1.0}, std::vector<double>{1.0}), picl::Error);
  EXPECT_THROW(corr::pearson(v, std::vector<double>{1.0, 2.0}), picl::Error);
}

TEST(Pearson, ClampAndRange) {
  EXPECT_EQ(corr::clamp_correlation(1.0000001), 1.0);
  EXPECT_EQ(corr::clamp_correlation(-1.5), -1.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto [x, y] = correlated_pair(seed, 5);
    const double r = *corr::pearson(x, y);
    EXPECT_LE(std::fabs(r), 1.0);
  }
}

TEST(SelectionCount, CeilingWithFloor) {
  EXPECT_EQ(corr::selection_count(0.01, 1000), 10u);
  EXPECT_EQ(corr::selection_count(0.01, 1001), 11u);
  EXPECT_EQ(corr::selection_count(0.01, 50), 1u);
  EXPECT_EQ(corr::selection_count(0.07, 100), 7u);
  EXPECT_EQ(corr::selection_count(1.0, 3), 3u);
  EXPECT_EQ(corr::selection_count(0.5, 0), 0u);
  EXPECT_THROW(corr::selection_count(0.0, 10), picl::Error);
}

TEST(CorrelateAll, MatchesOraclePerUnit) {
  picl::Rng rng(5);
  const std::size_t n = 200, C = 6;
  std::vector<corr::LabelRow> labels(n);
  std::vector<float> codes(n * C);
  for (std::size_t s = 0; s < n; ++s) {
    labels[s] = {rng.normal(), rng.normal(), rng.normal(), 3.0};
    for (std::size_t u = 0; u < C; ++u)
      codes[s * C + u] = u == 5 ? 0.0f : static_cast<float>(labels[s][u % 3] + rng.normal());
  }
  const corr::BlockCodes block{8, C, codes};
  const auto m = corr::correlate_all(std::span(&block, 1), labels, 128);
  EXPECT_EQ(m.context_length(), 128u);
  for (std::size_t u = 0; u < 5; ++u) {
    std::vector<double> c(n), e(n);
    for (std::size_t s = 0; s < n; ++s) {
      c[s] = codes[s * C + u];
      e[s] = labels[s][0];
    }
    EXPECT_NEAR(*m.at(0, u, QuantityKind::TotalEnergy), oracle::pearson_two_pass(c, e), 1e-10);
    EXPECT_FALSE(m.at(0, u, QuantityKind::RandomBaseline).has_value());
  }
  EXPECT_FALSE(m.at(0, 5, QuantityKind::TotalEnergy).has_value());
  EXPECT_EQ(m.undefined_count(QuantityKind::TotalEnergy), 1u);
  EXPECT_EQ(m.defined_count(QuantityKind::RandomBaseline), 0u);
}

TEST(CorrelateAll, RejectsMisalignedCodes) {
  std::vector<corr::LabelRow> labels(3);
  std::vector<float> codes(5);
  const corr::BlockCodes block{0, 2, codes};
  EXPECT_THROW(corr::correlate_all(std::span(&block, 1), labels, 1), picl::Error);
}

TEST(TopK, OrderTiesAndTruncation) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto m = matrix_from({{0.5, -0.9, nan}, {0.9, 0.1, -0.5}});
  const auto top = corr::top_k(m, QuantityKind::TotalEnergy, 4);
  ASSERT_EQ(top.entries.size(), 4u);
  EXPECT_FALSE(top.truncated);
  // |rho| 0.9 ties resolve by block then unit.
  EXPECT_EQ(top.entries[0].block, 0u);
  EXPECT_EQ(top.entries[0].unit, 1u);
  EXPECT_EQ(top.entries[0].rho, -0.9);
  EXPECT_EQ(top.entries[1].block, 4u);
  EXPECT_EQ(top.entries[1].unit, 0u);
  EXPECT_EQ(top.entries[2].block, 0u);
  EXPECT_EQ(top.entries[3].unit, 2u);
  const auto all = corr::top_k(m, QuantityKind::TotalEnergy, 10);
  EXPECT_TRUE(all.truncated);
  EXPECT_EQ(all.entries.size(), 5u);
  EXPECT_THROW(corr::top_k(m, QuantityKind::TotalEnergy, 0), picl::Error);
}

TEST(BlockTop, MaxAndMeanOfTopAbs) {
  const auto m = matrix_from({{0.2, -0.8, 0.4}, {0.1}});
  const auto top = corr::blockwise_top(m, QuantityKind::TotalEnergy, 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].max_abs(), 0.8);
  EXPECT_DOUBLE_EQ(top[0].mean_abs(), 0.6);
  EXPECT_EQ(top[1].top_abs.size(), 1u);
  EXPECT_EQ(corr::blockwise_max(m, QuantityKind::TotalEnergy)[0].top_abs.size(), 1u);
}

TEST(Sync, CorrelatesSelectedPairsOnly) {
  // 100 pairs; the top 10% by signed rho(E) carry KE = 0.5 * E and the rest noise.
  std::vector<double> e(100);
  picl::Rng rng(3);
  for (auto& v : e) v = rng.uniform(-1.0, 1.0);
  auto m = matrix_from({e});
  std::vector<std::size_t> order(100);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return e[a] > e[b]; });
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto u = order[i];
    const double ke = i < 10 ? 0.5 * e[u] + 0.01 * rng.normal() : rng.uniform(-1.0, 1.0);
    m.set(0, u, QuantityKind::KineticEnergy, ke);
    if (i < 10) {
      xs.push_back(e[u]);
      ys.push_back(ke);
    }
  }
  corr::SyncOptions opt;
  opt.fraction = 0.1;
  const auto r = corr::sync_strength(m, QuantityKind::KineticEnergy, opt);
  ASSERT_EQ(r.selected.size(), 10u);
  EXPECT_EQ(r.selected[0].unit, order[0]);
  EXPECT_NEAR(*r.strength, oracle::pearson_two_pass(xs, ys), 1e-12);
  EXPECT_EQ(*corr::sync_strength(m, QuantityKind::TotalEnergy, opt).strength, 1.0);
  const auto report = corr::sync_report(m, opt);
  EXPECT_EQ(report.selected, r.selected);
  EXPECT_FALSE(report.strength[picl::index_of(QuantityKind::RandomBaseline)].has_value());
}

TEST(Sync, AbsSelectionPicksNegativeExtremes) {
  auto m = matrix_from({{0.3, -0.95, 0.5, 0.1}});
  corr::SyncOptions opt;
  opt.fraction = 0.25;
  EXPECT_EQ(corr::sync_strength(m, QuantityKind::TotalEnergy, opt).selected[0].unit, 2u);
  opt.select_by_abs = true;
  EXPECT_EQ(corr::sync_strength(m, QuantityKind::TotalEnergy, opt).selected[0].unit, 1u);
}

TEST(MatrixFile, RoundTripKeepsUndefined) {
  oracle::TempDir dir;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto m = matrix_from({{0.123456789012345, nan}, {-1.0}});
  m.set(1, 0, QuantityKind::PotentialEnergy, 0.25);
  corr::write_matrix(m, dir / "m.csv");
  const auto back = corr::read_matrix(dir / "m.csv");
  EXPECT_EQ(back.context_length(), 256u);
  EXPECT_EQ(back.blocks(), m.blocks());
  for (std::size_t b = 0; b < m.n_blocks(); ++b)
    for (std::size_t u = 0; u < m.n_units(b); ++u)
      for (auto q : picl::kAllQuantities) EXPECT_EQ(back.at(b, u, q), m.at(b, u, q));
  EXPECT_EQ(m.block_position(4), 1u);
  EXPECT_THROW(m.block_position(5), picl::Error);
}
