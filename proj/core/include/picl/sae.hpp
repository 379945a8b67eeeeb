#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "picl/activation_store.hpp"

namespace picl::sae {

/// Single-hidden-layer sparse autoencoder: c = relu(W_e x + b_e),
/// x_hat = W_d c + b_d. Weights are row-major; W_e is code_dim x input_dim,
/// W_d is input_dim x code_dim.
template <typename T>
struct BasicSaeParams {
  std::size_t input_dim = 0;
  std::size_t code_dim = 0;
  std::vector<T> encoder_weights;
  std::vector<T> encoder_bias;
  std::vector<T> decoder_weights;
  std::vector<T> decoder_bias;

  static BasicSaeParams zeros(std::size_t input_dim, std::size_t code_dim);
  /// Weights uniform in [-1/sqrt(H), 1/sqrt(H)], biases zero.
  static BasicSaeParams initialize(std::size_t input_dim, std::size_t code_dim, std::uint64_t seed);

  void validate() const;
  std::size_t n_parameters() const noexcept {
    return encoder_weights.size() + encoder_bias.size() + decoder_weights.size() +
           decoder_bias.size();
  }

  T& encoder_weight(std::size_t unit, std::size_t k) { return encoder_weights[unit * input_dim + k]; }
  T& decoder_weight(std::size_t k, std::size_t unit) { return decoder_weights[k * code_dim + unit]; }
  T encoder_weight(std::size_t unit, std::size_t k) const { return encoder_weights[unit * input_dim + k]; }
  T decoder_weight(std::size_t k, std::size_t unit) const { return decoder_weights[k * code_dim + unit]; }

  /// Flat views in declared order (W_e, b_e, W_d, b_d), for optimizers and
  /// finite-difference checks.
  std::vector<T> flatten() const;
  void unflatten(std::span<const T> flat);

  template <typename U>
  BasicSaeParams<U> cast() const {
    BasicSaeParams<U> out;
    out.input_dim = input_dim;
    out.code_dim = code_dim;
    out.encoder_weights.assign(encoder_weights.begin(), encoder_weights.end());
    out.encoder_bias.assign(encoder_bias.begin(), encoder_bias.end());
    out.decoder_weights.assign(decoder_weights.begin(), decoder_weights.end());
    out.decoder_bias.assign(decoder_bias.begin(), decoder_bias.end());
    return out;
  }

  friend bool operator==(const BasicSaeParams&, const BasicSaeParams&) = default;
};

using SaeParams = BasicSaeParams<float>;

template <typename T>
void encode(const BasicSaeParams<T>& p, std::span<const T> x, std::span<T> code);
template <typename T>
std::vector<T> encode(const BasicSaeParams<T>& p, std::span<const T> x);

template <typename T>
void decode(const BasicSaeParams<T>& p, std::span<const T> code, std::span<T> x_hat);
template <typename T>
std::vector<T> decode(const BasicSaeParams<T>& p, std::span<const T> code);

struct LossBreakdown {
  double total = 0.0;
  double reconstruction = 0.0;  // mean squared L2 error
  double sparsity = 0.0;        // lambda * mean L1 norm of codes
};

/// `batch` holds n rows of input_dim values.
template <typename T>
LossBreakdown loss(const BasicSaeParams<T>& p, std::span<const T> batch, double sparsity_weight);

/// Analytic gradient of the total loss, returned in a params-shaped struct.
/// The ReLU subgradient at 0 is 0.
template <typename T>
BasicSaeParams<T> gradient(const BasicSaeParams<T>& p, std::span<const T> batch,
                           double sparsity_weight, LossBreakdown* loss_out = nullptr);

struct TrainConfig {
  double learning_rate = 1e-4;
  double sparsity_weight = 1e-3;
  int epochs = 10;
  std::size_t batch_size = 4096;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t expansion = 2;  // code_dim = expansion * H

  void validate() const;
};

struct EpochLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  double sparsity = 0.0;
};

struct TrainReport {
  std::vector<EpochLoss> epochs;
  double active_fraction = 0.0;  // share of code entries > 0 after training

  friend bool operator==(const TrainReport&, const TrainReport&) = default;
};

bool operator==(const EpochLoss& a, const EpochLoss& b);

/// Adam over shuffled mini-batches; the final short batch is kept.
/// Deterministic for a given config and data. Throws NonFiniteLossError.
std::pair<SaeParams, TrainReport> train(std::span<const float> data, std::size_t input_dim,
                                        const TrainConfig& config);
std::pair<SaeParams, TrainReport> train(const activations::ActivationDataset& dataset,
                                        const TrainConfig& config);

/// Share of code entries > 0 over every row of `data`.
double active_fraction(const SaeParams& p, std::span<const float> data);

/// Codes of every dataset sample, samples x code_dim.
std::vector<float> encode_all(const SaeParams& p, std::span<const float> data);

inline constexpr char kCheckpointMagic[4] = {'P', 'S', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "PSAE", version u32, H u32, then W_e, b_e, W_d, b_d as binary32 LE.
/// Requires code_dim == 2H.
void write_checkpoint(const SaeParams& p, const std::filesystem::path& path);
SaeParams read_checkpoint(const std::filesystem::path& path);

/// epoch,total,reconstruction,sparsity
void write_loss_curve(const TrainReport& report, const std::filesystem::path& path);

}  // namespace picl::sae
