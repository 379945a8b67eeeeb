#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace picl::physics {

enum class SystemKind { MassSpring1D, Pendulum3D };

std::string_view to_string(SystemKind kind) noexcept;
SystemKind system_kind_from_string(std::string_view name);

/// Physical constants of a free spring chain. Experiments always use three
/// masses and two springs; shorter chains are accepted so that reduced
/// systems (two-mass oscillators) run through the same code path.
struct SystemSpec {
  SystemKind kind = SystemKind::MassSpring1D;
  std::vector<double> masses;
  std::vector<double> spring_constants;
  std::vector<double> natural_lengths;
  double gravity = 0.0;  // only read for Pendulum3D

  int spatial_dim() const noexcept { return kind == SystemKind::MassSpring1D ? 1 : 3; }
  std::size_t n_masses() const noexcept { return masses.size(); }
  std::size_t n_coords() const noexcept { return masses.size() * static_cast<std::size_t>(spatial_dim()); }

  /// Throws Error(InvalidInput) when an invariant does not hold.
  void validate() const;

  static SystemSpec mass_spring(std::array<double, 3> masses, std::array<double, 2> k,
                                std::array<double, 2> lengths);
  static SystemSpec pendulum(std::array<double, 3> masses, std::array<double, 2> k,
                             std::array<double, 2> lengths, double gravity);

  nlohmann::json to_json() const;
  static SystemSpec from_json(const nlohmann::json& j);

  friend bool operator==(const SystemSpec&, const SystemSpec&) = default;
};

/// Positions and velocities, mass-major: coordinate d of mass i lives at
/// index i * spatial_dim + d. 1D systems store one coordinate per mass.
struct PhaseState {
  std::vector<double> positions;
  std::vector<double> velocities;
  double time = 0.0;

  /// Flattened z = (x, v).
  std::vector<double> flatten() const;

  friend bool operator==(const PhaseState&, const PhaseState&) = default;
};

struct PhaseDerivative {
  std::vector<double> dpositions;
  std::vector<double> dvelocities;
};

struct EnergyBreakdown {
  double total = 0.0;
  double kinetic = 0.0;
  double potential = 0.0;
};

struct Trajectory {
  SystemSpec spec;
  double dt = 0.1;
  std::vector<PhaseState> states;

  std::size_t size() const noexcept { return states.size(); }
};

EnergyBreakdown energy(const SystemSpec& spec, const PhaseState& state);

/// Analytic Hamiltonian vector field: dx/dt = v, dv/dt = -grad(PE) / m.
PhaseDerivative equations_of_motion(const SystemSpec& spec, const PhaseState& state);

/// Classic fixed-step RK4. Returns n_steps + 1 states, the first being
/// `initial`.
Trajectory integrate(const SystemSpec& spec, const PhaseState& initial, double dt,
                     std::size_t n_steps);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SamplingRanges {
  Range mass{0.5, 2.0};
  Range spring_constant{0.5, 2.0};
  Range natural_length{0.5, 1.5};
  double gravity = 9.8;
  Range position_perturbation{-0.5, 0.5};
  Range velocity{-0.5, 0.5};

  void validate() const;
  nlohmann::json to_json() const;
  static SamplingRanges from_json(const nlohmann::json& j);
};

/// Draw constants and an initial state uniformly from `ranges`. Masses sit
/// at their equilibrium spacing along the first axis before perturbation.
std::pair<SystemSpec, PhaseState> sample_system(std::uint64_t seed, SystemKind kind,
                                                const SamplingRanges& ranges);

/// Degree-of-freedom names in flattened z order: x1..x3, v1..v3 in 1D,
/// x1_0..x3_2, v1_0..v3_2 in 3D.
std::vector<std::string> channel_names(const SystemSpec& spec);

/// One degree of freedom over states [first, first + count).
std::vector<double> channel_series(const Trajectory& traj, std::size_t channel,
                                   std::size_t first, std::size_t count);

/// Columnar CSV (time + every degree of freedom) plus a JSON sidecar with
/// kind, constants, dt and any extra metadata.
void write_trajectory(const std::filesystem::path& path, const Trajectory& traj,
                      const nlohmann::json& extra_meta = nlohmann::json::object());
Trajectory read_trajectory(const std::filesystem::path& path);

}  // namespace picl::physics
