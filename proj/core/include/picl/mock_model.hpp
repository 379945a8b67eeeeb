#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "picl/activation_store.hpp"
#include "picl/physics.hpp"
#include "picl/protocol.hpp"
#include "picl/quantity.hpp"
#include "picl/sae.hpp"

namespace picl::mock {

struct PlantedBlockConfig {
  std::uint32_t block = 0;
  std::vector<QuantityKind> sources{QuantityKind::TotalEnergy};
};

struct MockConfig {
  std::string model_id = "picl-mock-v1";
  std::uint32_t n_blocks = 64;
  std::uint32_t hidden_dim = 16;
  std::vector<PlantedBlockConfig> planted{{24, {QuantityKind::TotalEnergy}},
                                          {32, {QuantityKind::TotalEnergy}},
                                          {40, {QuantityKind::TotalEnergy}}};
  double noise_scale = 0.1;   // isotropic residual noise, every block
  double embed_scale = 0.5;   // per-character embedding norm
  std::uint64_t seed = 7;

  // Readout: per-step noise sd, in units of the channel's standard deviation,
  //   sigma0 * (reference_length / L)^gamma * (1 + step_growth * i)
  //   * (1 + coupling * damage)
  // where damage in [0, 1] is the share of planted-subspace energy removed by
  // active edits, averaged over planted blocks.
  double sigma0 = 0.5;
  double gamma = 1.0;
  double reference_length = 64.0;
  double step_growth = 0.125;
  double coupling = 4.0;
  double invalid_sample_rate = 0.0;

  // Energy signals are shifted by the minimum and divided by the standard
  // deviation of reference systems drawn from these ranges.
  physics::SamplingRanges sampling_ranges;
  double dt = 0.1;
  std::size_t reference_systems = 16;
  std::size_t reference_steps = 1055;

  void validate() const;
  nlohmann::json to_json() const;
  static MockConfig from_json(const nlohmann::json& j);
};

/// Immutable model state plus caches shared by every session.
class MockModel : public std::enable_shared_from_this<MockModel> {
 public:
  static std::shared_ptr<MockModel> create(MockConfig config);

  const MockConfig& config() const noexcept { return config_; }
  protocol::HelloResponse hello() const;

  /// Planted spec for a block, or nullptr.
  const activations::PlantedSpec* planted(std::uint32_t block) const;

  /// Per-token residuals (prompt.size() x H) at one block, before edits.
  /// `signals[t]` holds the normalized quantity values of history step t.
  std::vector<double> residuals(std::uint32_t block, std::string_view prompt,
                                const std::vector<std::array<double, kNumQuantities>>& signals,
                                std::uint64_t seed) const;

  /// Normalized (E, KE, PE, 0) per history step of the prompt.
  std::vector<std::array<double, kNumQuantities>> prompt_signals(
      std::string_view prompt, const protocol::OracleHint* oracle) const;

  /// A new per-connection session.
  std::unique_ptr<protocol::LineHandler> new_session();

  std::shared_ptr<const physics::Trajectory> load_trajectory(const std::string& path) const;
  activations::SignalNormalization normalization(physics::SystemKind kind) const;

 private:
  explicit MockModel(MockConfig config);

  MockConfig config_;
  std::map<std::uint32_t, activations::PlantedSpec> planted_;
  // [block][char] embedding vectors, orthogonal to the block's planted directions.
  std::vector<std::vector<std::vector<double>>> embeddings_;

  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::shared_ptr<const physics::Trajectory>> trajectories_;
  mutable std::map<physics::SystemKind, activations::SignalNormalization> normalization_;
};

struct ActiveEdit {
  protocol::InterventionEdit edit;
  sae::SaeParams sae;
};

class MockSession final : public protocol::LineHandler {
 public:
  explicit MockSession(std::shared_ptr<const MockModel> model) : model_(std::move(model)) {}

  std::string handle_line(std::string_view line) override;
  bool finished() const override { return finished_; }

  nlohmann::json handle(const nlohmann::json& request);
  const std::vector<ActiveEdit>& edits() const noexcept { return edits_; }

 private:
  nlohmann::json on_generate(const nlohmann::json& request);
  nlohmann::json on_capture(const nlohmann::json& request);
  nlohmann::json on_intervene(const nlohmann::json& request);
  double damage(std::string_view prompt,
                const std::vector<std::array<double, kNumQuantities>>& signals,
                std::uint64_t seed) const;

  std::shared_ptr<const MockModel> model_;
  std::string session_id_;
  bool greeted_ = false;
  bool finished_ = false;
  std::vector<ActiveEdit> edits_;
};

}  // namespace picl::mock
