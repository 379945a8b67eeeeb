#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picl/physics.hpp"
#include "picl/quantity.hpp"
#include "picl/tokenizer.hpp"

namespace picl::activations {

inline constexpr char kTensorMagic[4] = {'P', 'I', 'C', 'L'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::size_t kTensorHeaderBytes = 24;

struct Provenance {
  std::string trajectory_id;
  std::string channel;
  std::string model_id;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Residual stream of one prompt at one block: seq_len x hidden_dim binary32,
/// time-major.
struct ActivationTensor {
  std::uint32_t block_index = 0;
  std::uint32_t context_length = 0;
  std::uint32_t seq_len = 0;
  std::uint32_t hidden_dim = 0;
  std::vector<float> data;
  Provenance provenance;

  std::span<const float> row(std::size_t t) const {
    return std::span<const float>(data).subspan(t * hidden_dim, hidden_dim);
  }
  std::span<float> row(std::size_t t) {
    return std::span<float>(data).subspan(t * hidden_dim, hidden_dim);
  }

  friend bool operator==(const ActivationTensor&, const ActivationTensor&) = default;
};

/// Bit-exact encoding: "PICL", version, block, context_length, L, H (u32 LE)
/// followed by L*H binary32 LE values.
std::vector<std::byte> encode_tensor(const ActivationTensor& t);
/// Throws Error with BadMagic, UnsupportedVersion, Truncated or
/// DimensionOverflow. Provenance is left empty; it lives in the sidecar.
ActivationTensor decode_tensor(std::span<const std::byte> bytes);

/// Writes the tensor file atomically plus a JSON sidecar carrying provenance
/// and any extra metadata.
void write_tensor(const ActivationTensor& t, const std::filesystem::path& path,
                  const nlohmann::json& extra_meta = nlohmann::json::object());
/// Reads the tensor and, when present, provenance from its sidecar.
ActivationTensor read_tensor(const std::filesystem::path& path);

/// Where the history of one prompt sits in its trajectory, and which token
/// stands for each step.
struct PromptAlignment {
  std::string trajectory_id;
  std::string channel;
  std::size_t history_start = 0;
  std::vector<tokenizer::TokenRange> tokens;  // one per history step
};

struct SourceKey {
  std::uint32_t block_index = 0;
  std::uint32_t context_length = 0;
  std::string trajectory_id;
  std::string channel;

  friend auto operator<=>(const SourceKey&, const SourceKey&) = default;
};

struct SampleInfo {
  std::size_t source = 0;  // index into ActivationDataset::sources
  std::size_t step = 0;    // history step within the prompt
  physics::EnergyBreakdown energy;
  double random_baseline = 0.0;
};

struct ActivationDataset {
  std::size_t hidden_dim = 0;
  std::uint64_t seed = 0;
  std::string representative_rule = "last_token_of_number";
  std::vector<float> residuals;  // samples x hidden_dim
  std::vector<SampleInfo> samples;
  std::vector<SourceKey> sources;

  std::size_t size() const noexcept { return samples.size(); }
  std::span<const float> residual(std::size_t i) const {
    return std::span<const float>(residuals).subspan(i * hidden_dim, hidden_dim);
  }
  double label(std::size_t i, QuantityKind q) const {
    return quantity_value(samples[i].energy, samples[i].random_baseline, q);
  }
};

/// The i.i.d. standard-normal baseline for one (trajectory, channel, step).
/// Keyed rather than sequential so that dataset content does not depend on
/// input order.
double random_baseline(std::uint64_t seed, std::string_view trajectory_id,
                       std::string_view channel, std::size_t step);

/// One sample per (tensor, history step). `trajectories` is keyed by
/// trajectory id; `alignments` by (trajectory id, channel).
ActivationDataset build_dataset(
    std::span<const ActivationTensor> tensors,
    const std::map<std::string, physics::Trajectory>& trajectories,
    const std::map<std::pair<std::string, std::string>, PromptAlignment>& alignments,
    std::uint64_t seed);

struct PlantedFeature {
  QuantityKind source = QuantityKind::TotalEnergy;
  std::vector<double> direction;  // unit vector in R^H
};

struct PlantedSpec {
  std::size_t hidden_dim = 0;
  std::uint32_t block_index = 0;
  std::vector<PlantedFeature> features;
  double noise_scale = 0.0;
  std::uint64_t seed = 0;

  /// Throws Error(InvalidInput) on bad dimensions, non-unit or
  /// non-orthogonal directions, or a RandomBaseline source.
  void validate() const;

  /// Orthonormal random directions (Gram-Schmidt on Gaussian draws).
  static PlantedSpec random(std::size_t hidden_dim, std::vector<QuantityKind> sources,
                            double noise_scale, std::uint64_t seed, std::uint32_t block_index = 0);
};

/// Per-quantity affine map applied to planted signals: (q - offset) / scale.
struct SignalNormalization {
  std::array<double, kNumQuantities> offset{};
  std::array<double, kNumQuantities> scale{1.0, 1.0, 1.0, 1.0};
};

struct PlantedActivations {
  std::vector<ActivationTensor> tensors;  // one per trajectory, one row per step
  std::map<std::pair<std::string, std::string>, PromptAlignment> alignments;
  std::vector<PlantedFeature> truth;
  SignalNormalization normalization;
};

/// residual(t) = sum_f s_f(t) d_f + noise, where s_f is the feature's energy
/// component normalized to zero mean and unit variance, pooled over all
/// supplied trajectories. Trajectory ids are taken from the map keys; every tensor
/// is tagged with channel "planted".
PlantedActivations generate_planted(const PlantedSpec& spec,
                                    const std::map<std::string, physics::Trajectory>& trajectories);

}  // namespace picl::activations
