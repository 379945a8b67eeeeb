#pragma once

// Shared setup for tests that drive the mock adapter in process.

#include <memory>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "picl/forecast.hpp"
#include "picl/mock_model.hpp"
#include "picl/physics.hpp"
#include "picl/protocol.hpp"

namespace fixture {

inline std::unique_ptr<picl::protocol::Transport> inproc(const std::shared_ptr<picl::mock::MockModel>& model) {
  std::shared_ptr<picl::protocol::LineHandler> handler = model->new_session();
  return std::make_unique<picl::protocol::InProcessTransport>(
      [handler](std::string_view line) { return handler->handle_line(line); });
}

inline std::unique_ptr<picl::protocol::AdapterSession> session(
    const std::shared_ptr<picl::mock::MockModel>& model, const std::string& id = "test") {
  auto s = std::make_unique<picl::protocol::AdapterSession>(inproc(model), id);
  s->hello();
  return s;
}

/// Sampled mass-spring trajectories of `states` states each, written under `dir`.
inline std::vector<picl::forecast::TrajectoryRef> trajectories(
    const oracle::TempDir& dir, std::size_t n, std::size_t states, std::uint64_t seed = 100,
    picl::physics::SystemKind kind = picl::physics::SystemKind::MassSpring1D) {
  std::vector<picl::forecast::TrajectoryRef> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [spec, init] = picl::physics::sample_system(seed + i, kind, {});
    const auto traj = picl::physics::integrate(spec, init, 0.1, states - 1);
    const std::string id = "traj" + std::to_string(i);
    const auto path = dir / (id + ".csv");
    picl::physics::write_trajectory(path, traj, {{"trajectory_id", id}});
    out.push_back(picl::forecast::load_trajectory_ref(path));
  }
  return out;
}

}  // namespace fixture
