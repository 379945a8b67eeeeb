#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picl/correlation.hpp"
#include "picl/forecast.hpp"
#include "picl/protocol.hpp"
#include "picl/sae.hpp"

namespace picl::intervention {

using protocol::AblationMode;

struct InterventionSpec {
  std::uint32_t context_length = 0;
  std::vector<std::uint32_t> blocks;                          // ranked, distinct
  std::map<std::uint32_t, std::vector<std::uint32_t>> units;  // per block
  AblationMode mode = AblationMode::DeltaPatch;
  std::uint64_t seed = 0;
  bool fewer_blocks = false;  // fewer candidates than requested

  std::size_t total_units() const noexcept;
  nlohmann::json to_json() const;
  static InterventionSpec from_json(const nlohmann::json& j);
};

struct SelectionOptions {
  std::size_t n_blocks = 4;
  double unit_fraction = 0.01;
  QuantityKind quantity = QuantityKind::TotalEnergy;
  // Rank blocks by mean |rho| and units by |rho|. An SAE unit can track a
  // quantity through either sign, so signed block means tend to cancel.
  bool by_abs = true;
};

/// Ranks blocks by mean rho(c, E) over defined units (ties to the lower
/// block index), then takes the top ceil(fraction * units) units by rho in
/// each chosen block. With `by_abs` both rankings use |rho|. `code_dims`
/// (block -> SAE code size), when non-empty, must cover every chosen block
/// and bound the unit indices.
InterventionSpec select_targets(const correlation::CorrelationMatrix& matrix,
                                const std::map<std::uint32_t, std::size_t>& code_dims = {},
                                const SelectionOptions& options = {});

/// Same blocks and per-block counts as `planted`, with units drawn uniformly
/// from those not already selected.
InterventionSpec random_control(const InterventionSpec& planted,
                                const std::map<std::uint32_t, std::size_t>& code_dims,
                                std::uint64_t seed);

/// DeltaPatch: x - sum_i c_i * decoder column i. FullReplace: decode of the
/// code with the listed units zeroed.
std::vector<float> ablate_residual(std::span<const float> x, const sae::SaeParams& sae,
                                   std::span<const std::uint32_t> units, AblationMode mode);

struct InterventionResult {
  std::size_t window = 16;
  std::uint32_t context_length = 0;
  double baseline_error = 0.0;    // mean over trajectories of window-mean Err
  double intervened_error = 0.0;
  double epsilon = 0.0;           // mean of per-trajectory epsilon
  std::vector<double> baseline_per_step;
  std::vector<double> intervened_per_step;
  std::vector<std::string> trajectory_ids;
  std::vector<double> per_trajectory_epsilon;
  std::size_t skipped_zero_baseline = 0;
  std::size_t invalid_samples = 0;
  std::size_t missing_steps = 0;

  nlohmann::json to_json() const;
  static InterventionResult from_json(const nlohmann::json& j);
};

struct RunOptions {
  std::size_t window = 16;
  std::size_t n_samples = 10;
  std::uint64_t seed = 0;
  std::uint32_t max_context = 1024;  // history is [max_context - L, max_context)
  forecast::TokenizerSettings tokenizer;
  bool oracle_hints = true;
};

/// Clean pass, then the same prompts with edits registered on every target
/// block, with identical sampling seeds. `sae_paths` maps block -> checkpoint
/// path as seen by the adapter.
InterventionResult run_intervention(protocol::AdapterSession& session, const InterventionSpec& spec,
                                    const std::map<std::uint32_t, std::string>& sae_paths,
                                    std::span<const forecast::TrajectoryRef> trajectories,
                                    const RunOptions& options);

/// One row per step: step, baseline, intervened; plus a summary row set.
void write_result_table(const InterventionResult& result, const std::filesystem::path& path);

}  // namespace picl::intervention
