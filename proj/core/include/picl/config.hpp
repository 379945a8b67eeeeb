#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picl/forecast.hpp"
#include "picl/mock_model.hpp"
#include "picl/physics.hpp"
#include "picl/protocol.hpp"
#include "picl/sae.hpp"

namespace picl {

struct AnalysisConfig {
  std::size_t top_k = 100;
  double sync_fraction = 0.01;
  bool sync_select_by_abs = false;
  std::uint64_t dataset_seed = 0;
};

struct InterventionConfig {
  std::vector<std::uint32_t> context_lengths{256, 512, 1024};
  std::size_t window = 16;
  std::size_t n_blocks = 4;
  double unit_fraction = 0.01;
  bool select_by_abs = true;
  protocol::AblationMode mode = protocol::AblationMode::DeltaPatch;
  std::size_t control_trials = 10;
  std::uint64_t seed = 0;
};

/// Declarative description of a whole experiment. Unknown keys anywhere are
/// rejected so a typo cannot silently fall back to a default.
struct ExperimentConfig {
  std::filesystem::path output_dir = "picl-out";
  std::vector<physics::SystemKind> systems{physics::SystemKind::MassSpring1D,
                                           physics::SystemKind::Pendulum3D};
  std::size_t n_trajectories = 10;
  std::uint64_t seed = 0;
  double dt = 0.1;
  physics::SamplingRanges sampling_ranges;
  std::vector<std::uint32_t> context_lengths{64, 128, 256, 512, 1024};
  std::size_t horizon = 32;
  std::size_t n_samples = 10;
  forecast::TokenizerSettings tokenizer;
  std::vector<std::uint32_t> blocks = default_blocks();
  sae::TrainConfig sae;
  AnalysisConfig analysis;
  InterventionConfig intervention;
  std::string adapter_address = "inproc";  // in-process mock model
  mock::MockConfig mock;

  static std::vector<std::uint32_t> default_blocks();

  std::uint32_t max_context() const;
  /// States per trajectory: longest history plus the forecast window.
  std::size_t trajectory_states() const;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);

  /// Parses a config file. Relative output_dir resolves against the file's
  /// directory.
  static ExperimentConfig load(const std::filesystem::path& path);

  /// FNV-1a of the canonical JSON form, excluding output_dir.
  std::string hash() const;
};

/// Every seed in the config shifted by one override value.
void apply_seed_override(ExperimentConfig& config, std::uint64_t seed);

}  // namespace picl
