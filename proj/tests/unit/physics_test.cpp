#include <cmath>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "picl/error.hpp"
#include "picl/physics.hpp"

namespace ph = picl::physics;

namespace {

ph::SystemSpec two_mass(const oracle::TwoMassSho& s) {
  ph::SystemSpec spec;
  spec.kind = ph::SystemKind::MassSpring1D;
  spec.masses = {s.m, s.m};
  spec.spring_constants = {s.k};
  spec.natural_lengths = {s.l};
  return spec;
}

ph::PhaseState sho_start(const oracle::TwoMassSho& s) {
  return {{s.x1(0.0), s.x2(0.0)}, {0.0, 0.0}, 0.0};
}

ph::PhaseState at_rest_1d() { return {{0.0, 1.0, 2.5}, {0.0, 0.0, 0.0}, 0.0}; }

ph::SystemSpec soft_chain() { return ph::SystemSpec::mass_spring({1, 1, 1}, {0.5, 0.5}, {1, 1.5}); }

double relative_state_distance(const ph::PhaseState& a, const ph::PhaseState& b) {
  const auto za = a.flatten(), zb = b.flatten();
  double d = 0.0, n = 0.0;
  for (std::size_t i = 0; i < za.size(); ++i) {
    d += (za[i] - zb[i]) * (za[i] - zb[i]);
    n += zb[i] * zb[i];
  }
  return std::sqrt(d / n);
}

}  // namespace

TEST(Energy, EquilibriumAtRestIsZero) {
  const auto e = ph::energy(ph::SystemSpec::mass_spring({1, 2, 3}, {1, 1}, {1, 1.5}), at_rest_1d());
  EXPECT_EQ(e.total, 0.0);
  EXPECT_EQ(e.kinetic, 0.0);
}

TEST(Energy, SingleMovingMass) {
  auto s = at_rest_1d();
  s.velocities = {0.0, 3.0, 0.0};
  const auto e = ph::energy(ph::SystemSpec::mass_spring({1, 2, 1}, {1, 1}, {1, 1.5}), s);
  EXPECT_DOUBLE_EQ(e.kinetic, 9.0);
  EXPECT_DOUBLE_EQ(e.potential, 0.0);
}

TEST(Energy, PendulumGravityTerm) {
  const auto spec = ph::SystemSpec::pendulum({1, 1, 1}, {1, 1}, {1, 1}, 9.8);
  ph::PhaseState s;
  // Mass 1 raised to z = 0.5 with both springs still at natural length.
  const double x2 = std::sqrt(0.75);
  s.positions = {0, 0, 0.5, x2, 0, 0, x2 + 1.0, 0, 0};
  s.velocities.assign(9, 0.0);
  const auto e = ph::energy(spec, s);
  EXPECT_NEAR(e.potential, 4.9, 1e-12);
}

TEST(Energy, TotalIsSumBitwise) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (auto kind : {ph::SystemKind::MassSpring1D, ph::SystemKind::Pendulum3D}) {
      const auto [spec, init] = ph::sample_system(seed, kind, {});
      const auto e = ph::energy(spec, init);
      EXPECT_EQ(e.total, e.kinetic + e.potential);
      EXPECT_GE(e.kinetic, 0.0);
    }
  }
}

TEST(Energy, DimensionMismatchRejected) {
  auto s = at_rest_1d();
  s.positions.pop_back();
  try {
    ph::energy(soft_chain(), s);
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::InvalidInput);
  }
}

TEST(EquationsOfMotion, EquilibriumIsFixedPoint) {
  const auto d = ph::equations_of_motion(soft_chain(), {{0.0, 1.0, 2.5}, {0, 0, 0}, 0});
  for (double x : d.dpositions) EXPECT_EQ(x, 0.0);
  for (double x : d.dvelocities) EXPECT_EQ(x, 0.0);
}

TEST(EquationsOfMotion, ForceMatchesFiniteDifferenceOfPotential) {
  for (auto kind : {ph::SystemKind::MassSpring1D, ph::SystemKind::Pendulum3D}) {
    for (std::uint64_t seed = 1; seed < 6; ++seed) {
      const auto [spec, state] = ph::sample_system(seed, kind, {});
      const auto d = ph::equations_of_motion(spec, state);
      const auto pe = [&](std::span<const double> x) {
        ph::PhaseState s = state;
        s.positions.assign(x.begin(), x.end());
        return ph::energy(spec, s).potential;
      };
      const auto grad = oracle::central_difference(pe, state.positions, 1e-6);
      const auto dim = static_cast<std::size_t>(spec.spatial_dim());
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double expected = -grad[i] / spec.masses[i / dim];
        EXPECT_NEAR(d.dvelocities[i], expected, 1e-6 * std::max(1.0, std::fabs(expected)))
            << "coordinate " << i;
      }
      EXPECT_EQ(d.dpositions, state.velocities);
    }
  }
}

TEST(EquationsOfMotion, FreeFallWithoutSprings) {
  auto spec = ph::SystemSpec::pendulum({1, 2, 3}, {1, 1}, {1, 1}, 9.8);
  spec.spring_constants = {1e-300, 1e-300};
  ph::PhaseState s;
  s.positions = {0, 0, 0, 1, 0, 0, 2, 0, 0};
  s.velocities.assign(9, 0.0);
  const auto d = ph::equations_of_motion(spec, s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(d.dvelocities[i * 3 + 2], -9.8, 1e-12);
}

TEST(EquationsOfMotion, CoincidentMassesAreSingular) {
  const auto spec = ph::SystemSpec::pendulum({1, 1, 1}, {1, 1}, {1, 1}, 9.8);
  ph::PhaseState s;
  s.positions = {0, 0, 0, 0, 0, 0, 1, 0, 0};
  s.velocities.assign(9, 0.0);
  try {
    ph::equations_of_motion(spec, s);
    FAIL();
  } catch (const picl::Error& e) {
    EXPECT_EQ(e.code(), picl::ErrorCode::SingularConfiguration);
  }
}

TEST(Integrate, MatchesAnalyticOscillator) {
  const oracle::TwoMassSho sho;
  const auto traj = ph::integrate(two_mass(sho), sho_start(sho), 0.1, 100);
  ASSERT_EQ(traj.size(), 101u);
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double t = 0.1 * static_cast<double>(k);
    EXPECT_DOUBLE_EQ(traj.states[k].time, t);
    const double sep = traj.states[k].positions[1] - traj.states[k].positions[0];
    const double expected = sho.x2(t) - sho.x1(t);
    EXPECT_LT(std::fabs(sep - expected) / std::fabs(expected), 1e-6);
  }
}

TEST(Integrate, FourthOrderConvergence) {
  const oracle::TwoMassSho sho;
  double previous = 0.0;
  for (double dt : {0.4, 0.2, 0.1}) {
    const auto n = static_cast<std::size_t>(std::llround(20.0 / dt));
    const auto traj = ph::integrate(two_mass(sho), sho_start(sho), dt, n);
    const double err = std::fabs(traj.states.back().positions[0] - sho.x1(20.0));
    if (previous > 0.0) EXPECT_GE(previous / err, 8.0) << "dt " << dt;
    previous = err;
  }
}

TEST(Integrate, EquilibriumStaysPut) {
  const ph::PhaseState s{{0.0, 1.0, 2.5}, {0, 0, 0}, 0};
  const auto traj = ph::integrate(soft_chain(), s, 0.1, 20);
  for (const auto& x : traj.states) EXPECT_EQ(x.positions, s.positions);
}

TEST(Integrate, TimeReversal) {
  const ph::PhaseState s{{0.1, 1.0, 2.3}, {0.2, -0.1, 0.05}, 0};
  const auto fwd = ph::integrate(soft_chain(), s, 0.1, 50);
  auto back_start = fwd.states.back();
  for (auto& v : back_start.velocities) v = -v;
  const auto back = ph::integrate(soft_chain(), back_start, 0.1, 50);
  auto end = back.states.back();
  for (auto& v : end.velocities) v = -v;
  end.time = 0.0;
  EXPECT_LT(relative_state_distance(end, s), 1e-6);
}

TEST(Integrate, DeterministicAndValidated) {
  const auto [spec, init] = ph::sample_system(3, ph::SystemKind::Pendulum3D, {});
  EXPECT_EQ(ph::integrate(spec, init, 0.1, 30).states, ph::integrate(spec, init, 0.1, 30).states);
  EXPECT_THROW(ph::integrate(spec, init, 0.0, 10), picl::Error);
  EXPECT_THROW(ph::integrate(spec, init, 0.1, 0), picl::Error);
}

TEST(Integrate, DivergenceCarriesStep) {
  auto s = at_rest_1d();
  s.velocities = {std::nan(""), 0, 0};
  try {
    ph::integrate(soft_chain(), s, 0.1, 5);
    FAIL();
  } catch (const picl::DivergenceError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

TEST(SampleSystem, DeterministicAndInRange) {
  const ph::SamplingRanges ranges;
  const auto a = ph::sample_system(11, ph::SystemKind::MassSpring1D, ranges);
  const auto b = ph::sample_system(11, ph::SystemKind::MassSpring1D, ranges);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  double lo = 1e9, hi = -1e9;
  std::set<double> distinct;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto spec = ph::sample_system(seed, ph::SystemKind::MassSpring1D, ranges).first;
    lo = std::min(lo, spec.masses[0]);
    hi = std::max(hi, spec.masses[0]);
    distinct.insert(spec.masses[0]);
    if (seed < 200) {
      for (double k : spec.spring_constants) EXPECT_TRUE(k >= 0.5 && k <= 2.0);
      for (double l : spec.natural_lengths) EXPECT_TRUE(l >= 0.5 && l <= 1.5);
    }
  }
  EXPECT_GE(lo, 0.5);
  EXPECT_LE(hi, 2.0);
  EXPECT_EQ(distinct.size(), 10000u);
}

TEST(SampleSystem, RejectsEmptyRange) {
  ph::SamplingRanges r;
  r.mass = {2.0, 1.0};
  EXPECT_THROW(ph::sample_system(0, ph::SystemKind::MassSpring1D, r), picl::Error);
}

TEST(TrajectoryFile, RoundTripsExactly) {
  oracle::TempDir dir;
  const auto [spec, init] = ph::sample_system(5, ph::SystemKind::Pendulum3D, {});
  const auto traj = ph::integrate(spec, init, 0.1, 40);
  ph::write_trajectory(dir / "t.csv", traj, {{"seed", 5}});
  const auto back = ph::read_trajectory(dir / "t.csv");
  EXPECT_EQ(back.spec, traj.spec);
  EXPECT_EQ(back.dt, traj.dt);
  EXPECT_EQ(back.states, traj.states);
  EXPECT_EQ(ph::channel_names(spec).front(), "x1_0");
  EXPECT_EQ(ph::channel_names(spec).back(), "v3_2");
}

TEST(TrajectoryFile, RejectsCorruptRows) {
  oracle::TempDir dir;
  const auto traj = ph::integrate(soft_chain(), {{0.1, 1.0, 2.3}, {0, 0, 0}, 0}, 0.1, 3);
  ph::write_trajectory(dir / "t.csv", traj);
  std::ofstream(dir / "t.csv", std::ios::app) << "0.5,1,2\n";
  EXPECT_THROW(ph::read_trajectory(dir / "t.csv"), picl::Error);
}
