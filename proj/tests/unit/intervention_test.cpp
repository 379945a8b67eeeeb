#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "picl/error.hpp"
#include "picl/intervention.hpp"
#include "picl/random.hpp"

namespace iv = picl::intervention;
namespace corr = picl::correlation;
using picl::QuantityKind;
using picl::protocol::AblationMode;

namespace {

// Blocks 0, 4, 8 with 100 units each. Block 4 has strong negative units that
// cancel a signed mean; block 8 is weakly positive throughout.
corr::CorrelationMatrix mixed_sign_matrix() {
  corr::CorrelationMatrix m(64, {0, 4, 8}, {100, 100, 100});
  for (std::size_t u = 0; u < 100; ++u) {
    m.set(0, u, QuantityKind::TotalEnergy, 0.01 * static_cast<double>(u % 5));
    m.set(1, u, QuantityKind::TotalEnergy, u % 2 == 0 ? 0.9 : -0.9 + 0.001 * static_cast<double>(u));
    m.set(2, u, QuantityKind::TotalEnergy, 0.2);
  }
  return m;
}

// An SAE whose unit `unit` reads and writes along `direction`; every other
// unit is dead.
picl::sae::SaeParams single_direction_sae(const std::vector<double>& direction, std::uint32_t unit) {
  const auto H = direction.size();
  auto p = picl::sae::SaeParams::zeros(H, 2 * H);
  for (std::size_t k = 0; k < H; ++k) {
    p.encoder_weight(unit, k) = static_cast<float>(direction[k]);
    p.decoder_weight(k, unit) = static_cast<float>(direction[k]);
  }
  for (auto& b : p.encoder_bias) b = -1e3f;
  p.encoder_bias[unit] = 0.0f;
  return p;
}

}  // namespace

TEST(SelectTargets, AbsoluteRankingBeatsSignedCancellation) {
  const auto m = mixed_sign_matrix();
  iv::SelectionOptions opt;
  opt.n_blocks = 2;
  const auto by_abs = iv::select_targets(m, {}, opt);
  EXPECT_EQ(by_abs.blocks, (std::vector<std::uint32_t>{4, 8}));
  EXPECT_EQ(by_abs.context_length, 64u);
  opt.by_abs = false;
  const auto signed_sel = iv::select_targets(m, {}, opt);
  EXPECT_EQ(signed_sel.blocks, (std::vector<std::uint32_t>{8, 4}));
}

TEST(SelectTargets, UnitsTopFractionWithinBlock) {
  const auto m = mixed_sign_matrix();
  iv::SelectionOptions opt;
  opt.n_blocks = 1;
  opt.unit_fraction = 0.05;
  const auto s = iv::select_targets(m, {}, opt);
  ASSERT_EQ(s.units.at(4).size(), 5u);
  // |rho| 0.9 for even units ties; lower unit index first.
  EXPECT_EQ(s.units.at(4), (std::vector<std::uint32_t>{0, 2, 4, 6, 8}));
  opt.by_abs = false;
  EXPECT_EQ(iv::select_targets(m, {}, opt).units.at(8), (std::vector<std::uint32_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(iv::select_targets(m, {}, opt).total_units(), 5u);
}

TEST(SelectTargets, TiesFewerBlocksAndCodeDims) {
  corr::CorrelationMatrix m(32, {12, 3, 7}, {2, 2, 2});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t u = 0; u < 2; ++u) m.set(b, u, QuantityKind::TotalEnergy, 0.5);
  iv::SelectionOptions opt;
  opt.n_blocks = 4;
  const auto s = iv::select_targets(m, {}, opt);
  EXPECT_EQ(s.blocks, (std::vector<std::uint32_t>{3, 12}));
  EXPECT_TRUE(s.fewer_blocks);
  try {
    iv::select_targets(m, {{3, 4}}, opt);
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::MissingAlignment);
  }
  EXPECT_NO_THROW(iv::select_targets(m, {{3, 4}, {12, 4}}, opt));
  opt.unit_fraction = 1.0;
  EXPECT_THROW(iv::select_targets(m, {{3, 1}, {12, 4}}, opt), picl::Error);
}

TEST(RandomControl, DisjointSameShapeDeterministic) {
  const auto m = mixed_sign_matrix();
  const auto planted = iv::select_targets(m);
  const std::map<std::uint32_t, std::size_t> dims{{0, 100}, {4, 100}, {8, 100}};
  std::set<std::vector<std::uint32_t>> draws;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto c = iv::random_control(planted, dims, seed);
    EXPECT_EQ(c.blocks, planted.blocks);
    for (auto b : planted.blocks) {
      const auto& pu = planted.units.at(b);
      const auto& cu = c.units.at(b);
      ASSERT_EQ(cu.size(), pu.size());
      for (auto u : cu) {
        EXPECT_LT(u, 100u);
        EXPECT_EQ(std::count(pu.begin(), pu.end(), u), 0);
      }
      EXPECT_EQ(std::set<std::uint32_t>(cu.begin(), cu.end()).size(), cu.size());
    }
    EXPECT_EQ(c.units, iv::random_control(planted, dims, seed).units);
    draws.insert(c.units.at(planted.blocks[0]));
  }
  EXPECT_GT(draws.size(), 5u);
  EXPECT_THROW(iv::random_control(planted, {{4, 100}}, 0), picl::Error);
}

TEST(Ablate, DeltaPatchSubtractsDecoderColumns) {
  const auto p = picl::sae::SaeParams::initialize(4, 8, 5);
  picl::Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> x(4);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    const std::vector<std::uint32_t> units{1, 6};
    const auto out = iv::ablate_residual(x, p, units, AblationMode::DeltaPatch);
    // Oracle: explicit code of each listed unit times its decoder column.
    for (std::size_t k = 0; k < 4; ++k) {
      double expected = x[k];
      for (auto u : units) {
        double z = p.encoder_bias[u];
        for (std::size_t j = 0; j < 4; ++j) z += p.encoder_weight(u, j) * x[j];
        expected -= std::max(0.0, z) * p.decoder_weight(k, u);
      }
      EXPECT_NEAR(out[k], expected, 1e-6);
    }
    EXPECT_EQ(iv::ablate_residual(x, p, {}, AblationMode::DeltaPatch), x);
  }
}

TEST(Ablate, FullReplaceDecodesZeroedCode) {
  const auto p = picl::sae::SaeParams::initialize(3, 6, 1);
  const std::vector<float> x{0.5f, -1.0f, 2.0f};
  auto code = picl::sae::encode<float>(p, x);
  code[2] = 0.0f;
  const auto expected = picl::sae::decode<float>(p, code);
  const std::vector<std::uint32_t> units{2};
  EXPECT_EQ(iv::ablate_residual(x, p, units, AblationMode::FullReplace), expected);
}

TEST(Ablate, ZeroDecoderLeavesResidual) {
  auto p = picl::sae::SaeParams::initialize(3, 6, 1);
  std::fill(p.decoder_weights.begin(), p.decoder_weights.end(), 0.0f);
  const std::vector<float> x{0.5f, -1.0f, 2.0f};
  const std::vector<std::uint32_t> all{0, 1, 2, 3, 4, 5};
  EXPECT_EQ(iv::ablate_residual(x, p, all, AblationMode::DeltaPatch), x);
  const std::vector<std::uint32_t> bad{6};
  EXPECT_THROW(iv::ablate_residual(x, p, bad, AblationMode::DeltaPatch), picl::Error);
  EXPECT_THROW(iv::ablate_residual(std::vector<float>{1.0f}, p, {}, AblationMode::DeltaPatch), picl::Error);
}

TEST(Spec, JsonRoundTrip) {
  iv::InterventionSpec s;
  s.context_length = 256;
  s.blocks = {24, 8};
  s.units = {{24, {1, 5}}, {8, {0}}};
  s.mode = AblationMode::FullReplace;
  s.seed = 9;
  const auto back = iv::InterventionSpec::from_json(s.to_json());
  EXPECT_EQ(back.blocks, s.blocks);
  EXPECT_EQ(back.units, s.units);
  EXPECT_EQ(back.mode, s.mode);
  auto j = s.to_json();
  j["units"].erase("8");
  EXPECT_THROW(iv::InterventionSpec::from_json(j), picl::Error);
}

TEST(RunIntervention, PlantedDirectionRaisesErrorOrthogonalDoesNot) {
  oracle::TempDir dir;
  const auto refs = fixture::trajectories(dir, 2, 80);
  auto model = picl::mock::MockModel::create({});
  auto session = fixture::session(model);

  iv::InterventionSpec spec;
  spec.context_length = 64;
  std::map<std::uint32_t, std::string> planted_paths, orthogonal_paths;
  for (std::uint32_t b : {24u, 32u, 40u}) {
    const auto& d = model->planted(b)->features[0].direction;
    std::vector<double> orth(d.size(), 0.0);
    // Any unit vector orthogonal to d.
    orth[0] = d[1];
    orth[1] = -d[0];
    const double n = std::hypot(orth[0], orth[1]);
    orth[0] /= n;
    orth[1] /= n;
    const auto p = (dir / ("p" + std::to_string(b) + ".psae")).string();
    const auto o = (dir / ("o" + std::to_string(b) + ".psae")).string();
    picl::sae::write_checkpoint(single_direction_sae(d, 3), p);
    picl::sae::write_checkpoint(single_direction_sae(orth, 3), o);
    planted_paths[b] = p;
    orthogonal_paths[b] = o;
    spec.blocks.push_back(b);
    spec.units[b] = {3};
  }
  iv::RunOptions opt;
  opt.window = 8;
  opt.n_samples = 5;
  opt.max_context = 64;
  const auto hit = iv::run_intervention(*session, spec, planted_paths, refs, opt);
  EXPECT_GT(hit.epsilon, 0.5);
  EXPECT_EQ(hit.per_trajectory_epsilon.size(), 2u);
  EXPECT_EQ(hit.baseline_per_step.size(), 8u);
  const auto miss = iv::run_intervention(*session, spec, orthogonal_paths, refs, opt);
  EXPECT_NEAR(miss.epsilon, 0.0, 1e-12);
  EXPECT_EQ(miss.baseline_error, hit.baseline_error);

  const auto back = iv::InterventionResult::from_json(hit.to_json());
  EXPECT_EQ(back.epsilon, hit.epsilon);
  EXPECT_EQ(back.intervened_per_step, hit.intervened_per_step);
}
