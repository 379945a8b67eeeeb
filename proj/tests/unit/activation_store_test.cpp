#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "picl/activation_store.hpp"
#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"

namespace act = picl::activations;
namespace ph = picl::physics;

namespace {

act::ActivationTensor random_tensor(std::uint32_t L, std::uint32_t H, std::uint64_t seed) {
  act::ActivationTensor t;
  t.block_index = 12;
  t.context_length = L;
  t.seq_len = L;
  t.hidden_dim = H;
  picl::Rng rng(seed);
  t.data.resize(static_cast<std::size_t>(L) * H);
  for (auto& x : t.data) x = static_cast<float>(rng.normal());
  return t;
}

std::map<std::string, ph::Trajectory> trajectories(std::size_t n, std::size_t steps) {
  std::map<std::string, ph::Trajectory> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [spec, init] = ph::sample_system(100 + i, ph::SystemKind::MassSpring1D, {});
    out["traj" + std::to_string(i)] = ph::integrate(spec, init, 0.1, steps);
  }
  return out;
}

act::PromptAlignment per_step_alignment(const std::string& id, const std::string& ch,
                                        std::size_t start, std::size_t n) {
  act::PromptAlignment a;
  a.trajectory_id = id;
  a.channel = ch;
  a.history_start = start;
  for (std::size_t s = 0; s < n; ++s) a.tokens.push_back({2 * s, 2 * s + 1, 2 * s + 1});
  return a;
}

std::vector<double> project(const act::ActivationTensor& t, const std::vector<double>& d) {
  std::vector<double> out(t.seq_len);
  for (std::size_t s = 0; s < t.seq_len; ++s) {
    const auto row = t.row(s);
    for (std::size_t k = 0; k < t.hidden_dim; ++k) out[s] += row[k] * d[k];
  }
  return out;
}

}  // namespace

TEST(TensorFile, HeaderLayoutIsExact) {
  auto t = random_tensor(3, 2, 1);
  const auto bytes = act::encode_tensor(t);
  ASSERT_EQ(bytes.size(), 24u + 3 * 2 * 4);
  EXPECT_EQ(std::memcmp(bytes.data(), "PICL", 4), 0);
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | std::to_integer<std::uint32_t>(bytes[off + b]);
    return v;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), 12u);
  EXPECT_EQ(u32(12), 3u);
  EXPECT_EQ(u32(16), 3u);
  EXPECT_EQ(u32(20), 2u);
  EXPECT_EQ(u32(24), std::bit_cast<std::uint32_t>(t.data[0]));
}

TEST(TensorFile, RoundTripsBitwise) {
  oracle::TempDir dir;
  for (auto [L, H] : {std::pair{1u, 1u}, std::pair{64u, 8u}}) {
    auto t = random_tensor(L, H, L * 31 + H);
    if (L == 1) t.data = {0.0f};
    t.provenance = {"traj0", "x1", "mock"};
    const auto path = dir / ("t" + std::to_string(L) + ".picl");
    act::write_tensor(t, path);
    const auto back = act::read_tensor(path);
    EXPECT_EQ(back, t);
    EXPECT_EQ(act::encode_tensor(back), act::encode_tensor(t));
    const auto raw = picl::read_binary_file(path);
    EXPECT_EQ(raw, act::encode_tensor(t));
  }
}

TEST(TensorFile, DistinctErrorCodes) {
  const auto good = act::encode_tensor(random_tensor(4, 3, 2));
  auto expect_code = [](std::vector<std::byte> bytes, picl::ErrorCode code) {
    try {
      act::decode_tensor(bytes);
      FAIL() << "no error";
    } catch (const picl::Error& e) {
      EXPECT_EQ(e.code(), code) << e.what();
    }
  };
  auto truncated = good;
  truncated.pop_back();
  expect_code(truncated, picl::ErrorCode::Truncated);
  expect_code(std::vector<std::byte>(good.begin(), good.begin() + 10), picl::ErrorCode::Truncated);
  auto magic = good;
  magic[0] = std::byte{'X'};
  expect_code(magic, picl::ErrorCode::BadMagic);
  auto version = good;
  version[4] = std::byte{9};
  expect_code(version, picl::ErrorCode::UnsupportedVersion);
  auto huge = good;
  for (int i = 16; i < 24; ++i) huge[i] = std::byte{0xff};
  expect_code(huge, picl::ErrorCode::DimensionOverflow);
  auto zero = good;
  for (int i = 20; i < 24; ++i) zero[i] = std::byte{0};
  EXPECT_THROW(act::decode_tensor(zero), picl::Error);
}

TEST(Dataset, OneSamplePerHistoryStep) {
  const auto trajs = trajectories(1, 80);
  auto t = random_tensor(128, 4, 3);
  t.context_length = 64;
  t.provenance = {"traj0", "x1", "m"};
  std::map<std::pair<std::string, std::string>, act::PromptAlignment> al;
  al[{"traj0", "x1"}] = per_step_alignment("traj0", "x1", 10, 64);
  const auto ds = act::build_dataset(std::vector{t}, trajs, al, 5);
  ASSERT_EQ(ds.size(), 64u);
  EXPECT_EQ(ds.representative_rule, "last_token_of_number");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    EXPECT_EQ(s.energy.total, s.energy.kinetic + s.energy.potential);
    const auto& state = trajs.at("traj0").states[10 + s.step];
    EXPECT_EQ(s.energy.total, ph::energy(trajs.at("traj0").spec, state).total);
    const auto row = t.row(2 * s.step + 1);
    EXPECT_TRUE(std::equal(row.begin(), row.end(), ds.residual(i).begin()));
    EXPECT_EQ(s.random_baseline, act::random_baseline(5, "traj0", "x1", s.step));
  }
}

TEST(Dataset, OrderIndependentContent) {
  const auto trajs = trajectories(3, 40);
  std::vector<act::ActivationTensor> tensors;
  std::map<std::pair<std::string, std::string>, act::PromptAlignment> al;
  for (int i = 0; i < 3; ++i) {
    auto t = random_tensor(32, 3, 10 + i);
    t.context_length = 16;
    t.provenance = {"traj" + std::to_string(i), "v2", "m"};
    tensors.push_back(t);
    al[{t.provenance.trajectory_id, "v2"}] = per_step_alignment(t.provenance.trajectory_id, "v2", 0, 16);
  }
  auto rows = [](const act::ActivationDataset& ds) {
    std::vector<std::tuple<std::vector<float>, double, double>> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto r = ds.residual(i);
      out.emplace_back(std::vector<float>(r.begin(), r.end()), ds.samples[i].energy.total,
                       ds.samples[i].random_baseline);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto a = act::build_dataset(tensors, trajs, al, 1);
  std::reverse(tensors.begin(), tensors.end());
  const auto b = act::build_dataset(tensors, trajs, al, 1);
  EXPECT_EQ(rows(a), rows(b));
}

TEST(Dataset, MissingAlignmentAndRangeErrors) {
  const auto trajs = trajectories(1, 20);
  auto t = random_tensor(8, 2, 1);
  t.provenance = {"traj0", "x1", "m"};
  std::map<std::pair<std::string, std::string>, act::PromptAlignment> al;
  try {
    act::build_dataset(std::vector{t}, trajs, al, 0);
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::MissingAlignment);
  }
  t.context_length = 4;
  t.seq_len = 8;
  al[{"traj0", "x1"}] = per_step_alignment("traj0", "x1", 18, 4);
  try {
    act::build_dataset(std::vector{t}, trajs, al, 0);
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::OutOfRange);
  }
}

TEST(Planted, NoiselessSingleFeatureIsRankOne) {
  const auto trajs = trajectories(2, 100);
  const auto spec = act::PlantedSpec::random(8, {picl::QuantityKind::TotalEnergy}, 0.0, 4);
  const auto out = act::generate_planted(spec, trajs);
  const auto& d = spec.features[0].direction;
  for (const auto& t : out.tensors) {
    for (std::size_t s = 0; s < t.seq_len; ++s) {
      const auto row = t.row(s);
      double dot = 0.0;
      for (std::size_t k = 0; k < 8; ++k) dot += row[k] * d[k];
      for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(row[k], dot * d[k], 1e-5);
    }
  }
}

TEST(Planted, ProjectionTracksSourceAndOrthogonalDoesNot) {
  const auto trajs = trajectories(6, 200);
  const std::vector<picl::QuantityKind> sources{picl::QuantityKind::KineticEnergy,
                                                picl::QuantityKind::PotentialEnergy};
  for (double noise : {0.0, 0.1}) {
    const auto spec = act::PlantedSpec::random(12, sources, noise, 9);
    const auto out = act::generate_planted(spec, trajs);
    std::vector<double> proj_ke, proj_orth, ke;
    // A unit vector orthogonal to both planted directions.
    std::vector<double> orth(12);
    picl::Rng rng(77);
    for (auto& x : orth) x = rng.normal();
    for (const auto& f : spec.features) {
      double dot = 0.0;
      for (std::size_t k = 0; k < 12; ++k) dot += orth[k] * f.direction[k];
      for (std::size_t k = 0; k < 12; ++k) orth[k] -= dot * f.direction[k];
    }
    for (const auto& t : out.tensors) {
      const auto& traj = trajs.at(t.provenance.trajectory_id);
      const auto p = project(t, spec.features[0].direction);
      const auto o = project(t, orth);
      proj_ke.insert(proj_ke.end(), p.begin(), p.end());
      proj_orth.insert(proj_orth.end(), o.begin(), o.end());
      for (const auto& s : traj.states) ke.push_back(ph::energy(traj.spec, s).kinetic);
    }
    const double rho = oracle::pearson_two_pass(proj_ke, ke);
    EXPECT_GE(rho, noise == 0.0 ? 0.999 : 0.95);
    if (noise > 0.0) {
      EXPECT_LT(std::fabs(oracle::pearson_two_pass(proj_orth, ke)),
                3.0 / std::sqrt(static_cast<double>(ke.size())));
    }
  }
}

TEST(Planted, DeterministicAndValidated) {
  const auto trajs = trajectories(2, 30);
  const auto spec = act::PlantedSpec::random(6, {picl::QuantityKind::TotalEnergy}, 0.1, 3);
  EXPECT_EQ(act::generate_planted(spec, trajs).tensors, act::generate_planted(spec, trajs).tensors);
  auto bad = spec;
  bad.features.push_back(bad.features[0]);
  EXPECT_THROW(act::generate_planted(bad, trajs), picl::Error);
  auto rand = spec;
  rand.features[0].source = picl::QuantityKind::RandomBaseline;
  EXPECT_THROW(rand.validate(), picl::Error);
}
