#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picl/physics.hpp"
#include "picl/protocol.hpp"

namespace picl::forecast {

/// ||pred - truth|| / (||pred|| + ||truth||), in [0, 1]. Two zero vectors
/// score 0 and set `both_zero` when given.
double bounded_relative_error(std::span<const double> pred, std::span<const double> truth,
                              bool* both_zero = nullptr);

/// Median with the even-count rule (mean of the two central values).
double median(std::vector<double> values);

/// Drops invalid samples, then takes the median. nullopt when none are valid.
std::optional<double> median_aggregate(std::span<const std::optional<double>> samples);

struct TokenizerSettings {
  double alpha = 0.99;
  double beta = 0.3;
  int precision = 3;

  void validate() const;
  nlohmann::json to_json() const;
  static TokenizerSettings from_json(const nlohmann::json& j);
};

/// A simulated trajectory plus where it lives on disk (the mock adapter reads
/// ground truth from that path).
struct TrajectoryRef {
  std::string id;
  std::filesystem::path path;
  physics::Trajectory trajectory;
};

TrajectoryRef load_trajectory_ref(const std::filesystem::path& path);

struct ForecastRequest {
  std::size_t history_start = 0;
  std::size_t history_length = 0;
  std::size_t horizon = 32;
  std::size_t n_samples = 10;
  std::uint64_t seed = 0;
  TokenizerSettings tokenizer;
  bool oracle_hints = true;
};

/// Generation seed for one (trajectory, channel); independent of the history
/// length so runs that differ only in L share sampling noise.
std::uint64_t channel_seed(std::uint64_t seed, std::string_view trajectory_id,
                           std::string_view channel);

struct StateForecast {
  std::vector<std::vector<double>> predicted;  // [step][channel], NaN where missing
  std::vector<double> errors;                  // per step
  std::size_t missing_steps = 0;
  std::size_t invalid_samples = 0;
  std::size_t total_samples = 0;
  std::size_t both_zero_steps = 0;

  double mean_error() const;
};

/// Prompts each channel independently, takes the per-step median over
/// samples, unscales, recombines into full states and scores every step.
StateForecast forecast_state(protocol::AdapterSession& session, const TrajectoryRef& ref,
                             const ForecastRequest& request);

struct ErrorReport {
  std::string system;
  std::uint32_t context_length = 0;
  std::size_t horizon = 0;
  std::vector<double> mean;     // per step, over completed trajectories
  std::vector<double> std_error;
  std::vector<std::string> trajectory_ids;
  std::vector<std::vector<double>> per_trajectory;
  std::size_t n_requested = 0;
  std::vector<std::string> failures;  // "id: message"
  std::size_t missing_steps = 0;
  std::size_t invalid_samples = 0;
  std::size_t total_samples = 0;

  bool incomplete() const noexcept { return !failures.empty(); }
  std::size_t n_completed() const noexcept { return per_trajectory.size(); }
  double first_step_mean() const { return mean.at(0); }

  nlohmann::json to_json() const;
  static ErrorReport from_json(const nlohmann::json& j);
};

/// Fills mean and std_error (sample std / sqrt(n); 0 for n = 1) from
/// per_trajectory.
void summarize(ErrorReport& report);

struct SweepOptions {
  std::vector<std::uint32_t> context_lengths{64, 128, 256, 512, 1024};
  std::size_t horizon = 32;
  std::size_t n_samples = 10;
  std::uint64_t seed = 0;
  TokenizerSettings tokenizer;
  bool oracle_hints = true;

  std::uint32_t max_context() const;
};

/// History for length L is [maxL - L, maxL); every L predicts the same
/// window [maxL, maxL + horizon). Trajectories need maxL + horizon states.
std::size_t history_start(std::uint32_t context_length, std::uint32_t max_context);

/// One report per (system, context length). Adapter failures are recorded
/// per trajectory and leave the cell marked incomplete.
std::vector<ErrorReport> sweep(protocol::AdapterSession& session,
                               const std::map<std::string, std::vector<TrajectoryRef>>& systems,
                               const SweepOptions& options);

/// first_step_error.csv (system, context_length, mean, std_error, n) and
/// per_step_error.csv (system, context_length, step, mean, std_error, n).
void write_error_tables(std::span<const ErrorReport> reports, const std::filesystem::path& dir);

}  // namespace picl::forecast
