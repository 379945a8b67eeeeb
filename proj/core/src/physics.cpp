#include "picl/physics.hpp"

#include <cmath>
#include <string>

#include "picl/error.hpp"
#include "picl/random.hpp"

namespace picl::physics {

std::string_view to_string(SystemKind kind) noexcept {
  return kind == SystemKind::MassSpring1D ? "mass_spring_1d" : "pendulum_3d";
}

SystemKind system_kind_from_string(std::string_view name) {
  if (name == "mass_spring_1d") return SystemKind::MassSpring1D;
  if (name == "pendulum_3d") return SystemKind::Pendulum3D;
  throw Error(ErrorCode::InvalidInput, "unknown system kind '" + std::string(name) + "'");
}

void SystemSpec::validate() const {
  require(masses.size() >= 2, ErrorCode::InvalidInput, "need at least two masses");
  require(spring_constants.size() + 1 == masses.size() &&
              natural_lengths.size() + 1 == masses.size(),
          ErrorCode::InvalidInput, "need exactly one spring between each neighbour pair");
  for (double m : masses)
    require(std::isfinite(m) && m > 0.0, ErrorCode::InvalidInput, "masses must be > 0");
  for (double k : spring_constants)
    require(std::isfinite(k) && k > 0.0, ErrorCode::InvalidInput, "spring constants must be > 0");
  for (double l : natural_lengths)
    require(std::isfinite(l) && l > 0.0, ErrorCode::InvalidInput, "natural lengths must be > 0");
  require(std::isfinite(gravity) && gravity >= 0.0, ErrorCode::InvalidInput,
          "gravity must be non-negative");
}

SystemSpec SystemSpec::mass_spring(std::array<double, 3> m, std::array<double, 2> k,
                                   std::array<double, 2> l) {
  SystemSpec s;
  s.kind = SystemKind::MassSpring1D;
  s.masses.assign(m.begin(), m.end());
  s.spring_constants.assign(k.begin(), k.end());
  s.natural_lengths.assign(l.begin(), l.end());
  s.validate();
  return s;
}

SystemSpec SystemSpec::pendulum(std::array<double, 3> m, std::array<double, 2> k,
                                std::array<double, 2> l, double g) {
  SystemSpec s;
  s.kind = SystemKind::Pendulum3D;
  s.masses.assign(m.begin(), m.end());
  s.spring_constants.assign(k.begin(), k.end());
  s.natural_lengths.assign(l.begin(), l.end());
  s.gravity = g;
  s.validate();
  return s;
}

nlohmann::json SystemSpec::to_json() const {
  return {{"kind", to_string(kind)},
          {"masses", masses},
          {"spring_constants", spring_constants},
          {"natural_lengths", natural_lengths},
          {"gravity", gravity},
          {"spatial_dim", spatial_dim()}};
}

SystemSpec SystemSpec::from_json(const nlohmann::json& j) {
  SystemSpec s;
  try {
    s.kind = system_kind_from_string(j.at("kind").get<std::string>());
    s.masses = j.at("masses").get<std::vector<double>>();
    s.spring_constants = j.at("spring_constants").get<std::vector<double>>();
    s.natural_lengths = j.at("natural_lengths").get<std::vector<double>>();
    s.gravity = j.value("gravity", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("system spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<double> PhaseState::flatten() const {
  std::vector<double> z;
  z.reserve(positions.size() + velocities.size());
  z.insert(z.end(), positions.begin(), positions.end());
  z.insert(z.end(), velocities.begin(), velocities.end());
  return z;
}

namespace {

void check_dims(const SystemSpec& spec, const PhaseState& state) {
  const auto n = spec.n_coords();
  require(state.positions.size() == n && state.velocities.size() == n, ErrorCode::InvalidInput,
          "state has " + std::to_string(state.positions.size()) + "/" +
              std::to_string(state.velocities.size()) + " coordinates, system expects " +
              std::to_string(n));
}

double separation(const SystemSpec& spec, const std::vector<double>& x, std::size_t i) {
  const auto d = static_cast<std::size_t>(spec.spatial_dim());
  double sq = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = x[i * d + c] - x[(i + 1) * d + c];
    sq += diff * diff;
  }
  return std::sqrt(sq);
}

}  // namespace

EnergyBreakdown energy(const SystemSpec& spec, const PhaseState& state) {
  check_dims(spec, state);
  const auto d = static_cast<std::size_t>(spec.spatial_dim());
  EnergyBreakdown e;
  for (std::size_t i = 0; i < spec.n_masses(); ++i) {
    double v2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = state.velocities[i * d + c];
      v2 += v * v;
    }
    e.kinetic += 0.5 * spec.masses[i] * v2;
  }
  for (std::size_t i = 0; i + 1 < spec.n_masses(); ++i) {
    const double stretch = spec.natural_lengths[i] - separation(spec, state.positions, i);
    e.potential += 0.5 * spec.spring_constants[i] * stretch * stretch;
  }
  if (spec.kind == SystemKind::Pendulum3D) {
    for (std::size_t i = 0; i < spec.n_masses(); ++i)
      e.potential += spec.gravity * spec.masses[i] * state.positions[i * d + 2];
  }
  e.total = e.kinetic + e.potential;
  return e;
}

PhaseDerivative equations_of_motion(const SystemSpec& spec, const PhaseState& state) {
  check_dims(spec, state);
  const auto d = static_cast<std::size_t>(spec.spatial_dim());
  const auto n = spec.n_coords();
  PhaseDerivative out;
  out.dpositions = state.velocities;
  std::vector<double> force(n, 0.0);
  for (std::size_t i = 0; i + 1 < spec.n_masses(); ++i) {
    const double r = separation(spec, state.positions, i);
    if (r == 0.0) {
      throw Error(ErrorCode::SingularConfiguration,
                  "masses " + std::to_string(i + 1) + " and " + std::to_string(i + 2) +
                      " coincide; spring direction undefined");
    }
    // F_i = -k (r - l) (x_i - x_{i+1}) / r, equal and opposite on i+1.
    const double scale = -spec.spring_constants[i] * (r - spec.natural_lengths[i]) / r;
    for (std::size_t c = 0; c < d; ++c) {
      const double f = scale * (state.positions[i * d + c] - state.positions[(i + 1) * d + c]);
      force[i * d + c] += f;
      force[(i + 1) * d + c] -= f;
    }
  }
  if (spec.kind == SystemKind::Pendulum3D) {
    for (std::size_t i = 0; i < spec.n_masses(); ++i) force[i * d + 2] -= spec.gravity * spec.masses[i];
  }
  out.dvelocities.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.dvelocities[k] = force[k] / spec.masses[k / d];
  return out;
}

namespace {

PhaseState axpy(const PhaseState& s, double h, const PhaseDerivative& k) {
  PhaseState out = s;
  for (std::size_t i = 0; i < out.positions.size(); ++i) {
    out.positions[i] += h * k.dpositions[i];
    out.velocities[i] += h * k.dvelocities[i];
  }
  out.time += h;
  return out;
}

bool all_finite(const PhaseState& s) {
  for (double x : s.positions)
    if (!std::isfinite(x)) return false;
  for (double v : s.velocities)
    if (!std::isfinite(v)) return false;
  return std::isfinite(s.time);
}

}  // namespace

Trajectory integrate(const SystemSpec& spec, const PhaseState& initial, double dt,
                     std::size_t n_steps) {
  spec.validate();
  check_dims(spec, initial);
  require(std::isfinite(dt) && dt > 0.0, ErrorCode::InvalidInput, "dt must be > 0");
  require(n_steps >= 1, ErrorCode::InvalidInput, "n_steps must be >= 1");
  if (!all_finite(initial)) throw DivergenceError(0, "non-finite initial state");

  Trajectory traj;
  traj.spec = spec;
  traj.dt = dt;
  traj.states.reserve(n_steps + 1);
  traj.states.push_back(initial);

  const std::size_t n = spec.n_coords();
  PhaseState cur = initial;
  for (std::size_t step = 1; step <= n_steps; ++step) {
    const auto k1 = equations_of_motion(spec, cur);
    const auto k2 = equations_of_motion(spec, axpy(cur, 0.5 * dt, k1));
    const auto k3 = equations_of_motion(spec, axpy(cur, 0.5 * dt, k2));
    const auto k4 = equations_of_motion(spec, axpy(cur, dt, k3));
    PhaseState next = cur;
    for (std::size_t i = 0; i < n; ++i) {
      next.positions[i] += dt / 6.0 *
                           (k1.dpositions[i] + 2.0 * k2.dpositions[i] + 2.0 * k3.dpositions[i] +
                            k4.dpositions[i]);
      next.velocities[i] += dt / 6.0 *
                            (k1.dvelocities[i] + 2.0 * k2.dvelocities[i] +
                             2.0 * k3.dvelocities[i] + k4.dvelocities[i]);
    }
    // Time is anchored to the initial state so that t_k = t_0 + k dt exactly.
    next.time = initial.time + static_cast<double>(step) * dt;
    if (!all_finite(next)) throw DivergenceError(step, "integration diverged");
    traj.states.push_back(next);
    cur = std::move(next);
  }
  return traj;
}

void SamplingRanges::validate() const {
  auto check = [](const Range& r, const char* name) {
    require(std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo < r.hi, ErrorCode::InvalidInput,
            std::string("sampling range ") + name + " needs lo < hi");
  };
  check(mass, "mass");
  check(spring_constant, "spring_constant");
  check(natural_length, "natural_length");
  check(position_perturbation, "position_perturbation");
  check(velocity, "velocity");
  require(mass.lo > 0.0 && spring_constant.lo > 0.0 && natural_length.lo > 0.0,
          ErrorCode::InvalidInput, "mass, spring_constant and natural_length must be positive");
  require(gravity >= 0.0, ErrorCode::InvalidInput, "gravity must be non-negative");
}

nlohmann::json SamplingRanges::to_json() const {
  auto r = [](const Range& x) { return nlohmann::json::array({x.lo, x.hi}); };
  return {{"mass", r(mass)},
          {"spring_constant", r(spring_constant)},
          {"natural_length", r(natural_length)},
          {"gravity", gravity},
          {"position_perturbation", r(position_perturbation)},
          {"velocity", r(velocity)}};
}

SamplingRanges SamplingRanges::from_json(const nlohmann::json& j) {
  SamplingRanges s;
  for (const auto& [key, value] : j.items()) {
    auto range = [&]() {
      if (!value.is_array() || value.size() != 2)
        throw Error(ErrorCode::Config, "sampling_ranges." + key + " must be [lo, hi]");
      return Range{value[0].get<double>(), value[1].get<double>()};
    };
    if (key == "mass") s.mass = range();
    else if (key == "spring_constant") s.spring_constant = range();
    else if (key == "natural_length") s.natural_length = range();
    else if (key == "position_perturbation") s.position_perturbation = range();
    else if (key == "velocity") s.velocity = range();
    else if (key == "gravity") s.gravity = value.get<double>();
    else throw Error(ErrorCode::Config, "unknown key sampling_ranges." + key);
  }
  s.validate();
  return s;
}

std::pair<SystemSpec, PhaseState> sample_system(std::uint64_t seed, SystemKind kind,
                                                const SamplingRanges& ranges) {
  ranges.validate();
  Rng rng(combine_seed(seed, static_cast<std::uint64_t>(kind)));
  SystemSpec spec;
  spec.kind = kind;
  for (int i = 0; i < 3; ++i) spec.masses.push_back(rng.uniform(ranges.mass.lo, ranges.mass.hi));
  for (int i = 0; i < 2; ++i)
    spec.spring_constants.push_back(rng.uniform(ranges.spring_constant.lo, ranges.spring_constant.hi));
  for (int i = 0; i < 2; ++i)
    spec.natural_lengths.push_back(rng.uniform(ranges.natural_length.lo, ranges.natural_length.hi));
  spec.gravity = kind == SystemKind::Pendulum3D ? ranges.gravity : 0.0;
  spec.validate();

  const auto d = static_cast<std::size_t>(spec.spatial_dim());
  PhaseState state;
  state.positions.assign(3 * d, 0.0);
  state.velocities.assign(3 * d, 0.0);
  double along = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i > 0) along += spec.natural_lengths[i - 1];
    state.positions[i * d] = along;
  }
  for (auto& x : state.positions)
    x += rng.uniform(ranges.position_perturbation.lo, ranges.position_perturbation.hi);
  for (auto& v : state.velocities) v = rng.uniform(ranges.velocity.lo, ranges.velocity.hi);
  return {std::move(spec), std::move(state)};
}

std::vector<std::string> channel_names(const SystemSpec& spec) {
  std::vector<std::string> names;
  const int d = spec.spatial_dim();
  for (const char prefix : {'x', 'v'}) {
    for (std::size_t i = 0; i < spec.n_masses(); ++i) {
      for (int c = 0; c < d; ++c) {
        std::string name(1, prefix);
        name += std::to_string(i + 1);
        if (d > 1) name += "_" + std::to_string(c);
        names.push_back(std::move(name));
      }
    }
  }
  return names;
}

std::vector<double> channel_series(const Trajectory& traj, std::size_t channel,
                                   std::size_t first, std::size_t count) {
  const auto n = traj.spec.n_coords();
  require(channel < 2 * n, ErrorCode::OutOfRange, "channel index out of range");
  require(first + count <= traj.states.size(), ErrorCode::OutOfRange,
          "requested steps exceed trajectory length");
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t k = first; k < first + count; ++k) {
    const auto& s = traj.states[k];
    out.push_back(channel < n ? s.positions[channel] : s.velocities[channel - n]);
  }
  return out;
}

}  // namespace picl::physics
