#include "picl/sae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"

namespace picl::sae {

template <typename T>
BasicSaeParams<T> BasicSaeParams<T>::zeros(std::size_t input_dim, std::size_t code_dim) {
  require(input_dim > 0 && code_dim > 0, ErrorCode::InvalidInput, "SAE dims must be > 0");
  BasicSaeParams p;
  p.input_dim = input_dim;
  p.code_dim = code_dim;
  p.encoder_weights.assign(code_dim * input_dim, T{0});
  p.encoder_bias.assign(code_dim, T{0});
  p.decoder_weights.assign(input_dim * code_dim, T{0});
  p.decoder_bias.assign(input_dim, T{0});
  return p;
}

template <typename T>
BasicSaeParams<T> BasicSaeParams<T>::initialize(std::size_t input_dim, std::size_t code_dim,
                                                std::uint64_t seed) {
  auto p = zeros(input_dim, code_dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
  Rng rng(combine_seed(seed, 0x5ae1417ULL));
  for (auto& w : p.encoder_weights) w = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& w : p.decoder_weights) w = static_cast<T>(rng.uniform(-bound, bound));
  return p;
}

template <typename T>
void BasicSaeParams<T>::validate() const {
  require(input_dim > 0 && code_dim > 0, ErrorCode::InvalidInput, "SAE dims must be > 0");
  require(encoder_weights.size() == code_dim * input_dim && encoder_bias.size() == code_dim &&
              decoder_weights.size() == input_dim * code_dim && decoder_bias.size() == input_dim,
          ErrorCode::InvalidInput, "SAE parameter shapes are inconsistent");
  for (const auto* block : {&encoder_weights, &encoder_bias, &decoder_weights, &decoder_bias})
    for (T v : *block)
      require(std::isfinite(static_cast<double>(v)), ErrorCode::InvalidInput,
              "SAE parameters must be finite");
}

template <typename T>
std::vector<T> BasicSaeParams<T>::flatten() const {
  std::vector<T> flat;
  flat.reserve(n_parameters());
  for (const auto* block : {&encoder_weights, &encoder_bias, &decoder_weights, &decoder_bias})
    flat.insert(flat.end(), block->begin(), block->end());
  return flat;
}

template <typename T>
void BasicSaeParams<T>::unflatten(std::span<const T> flat) {
  require(flat.size() == n_parameters(), ErrorCode::InvalidInput, "flat parameter size mismatch");
  std::size_t at = 0;
  for (auto* block : {&encoder_weights, &encoder_bias, &decoder_weights, &decoder_bias}) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), block->size(), block->begin());
    at += block->size();
  }
}

template struct BasicSaeParams<float>;
template struct BasicSaeParams<double>;

template <typename T>
void encode(const BasicSaeParams<T>& p, std::span<const T> x, std::span<T> code) {
  require(x.size() == p.input_dim && code.size() == p.code_dim, ErrorCode::InvalidInput,
          "encode: dimension mismatch");
  for (std::size_t u = 0; u < p.code_dim; ++u) {
    const T* w = p.encoder_weights.data() + u * p.input_dim;
    T acc = p.encoder_bias[u];
    for (std::size_t k = 0; k < p.input_dim; ++k) acc += w[k] * x[k];
    code[u] = acc > T{0} ? acc : T{0};
  }
}

template <typename T>
std::vector<T> encode(const BasicSaeParams<T>& p, std::span<const T> x) {
  std::vector<T> code(p.code_dim);
  encode<T>(p, x, code);
  return code;
}

template <typename T>
void decode(const BasicSaeParams<T>& p, std::span<const T> code, std::span<T> x_hat) {
  require(code.size() == p.code_dim && x_hat.size() == p.input_dim, ErrorCode::InvalidInput,
          "decode: dimension mismatch");
  for (std::size_t k = 0; k < p.input_dim; ++k) {
    const T* w = p.decoder_weights.data() + k * p.code_dim;
    T acc = p.decoder_bias[k];
    for (std::size_t u = 0; u < p.code_dim; ++u) acc += w[u] * code[u];
    x_hat[k] = acc;
  }
}

template <typename T>
std::vector<T> decode(const BasicSaeParams<T>& p, std::span<const T> code) {
  std::vector<T> x_hat(p.input_dim);
  decode<T>(p, code, x_hat);
  return x_hat;
}

namespace {

template <typename T>
std::size_t batch_rows(const BasicSaeParams<T>& p, std::span<const T> batch) {
  require(p.input_dim > 0 && batch.size() % p.input_dim == 0, ErrorCode::InvalidInput,
          "batch size is not a multiple of input_dim");
  const auto n = batch.size() / p.input_dim;
  require(n > 0, ErrorCode::InvalidInput, "empty batch");
  return n;
}

// Forward and (optionally) backward pass over one batch. Loss sums are
// accumulated in double regardless of T.
template <typename T>
LossBreakdown forward_backward(const BasicSaeParams<T>& p, std::span<const T> batch,
                               double sparsity_weight, BasicSaeParams<T>* grad) {
  const auto n = batch_rows(p, batch);
  const auto H = p.input_dim;
  const auto C = p.code_dim;
  std::vector<T> pre(C), code(C), x_hat(H), g_out(H);
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));
  const T l1_grad = static_cast<T>(sparsity_weight / static_cast<double>(n));
  double recon_sum = 0.0;
  double l1_sum = 0.0;

  for (std::size_t s = 0; s < n; ++s) {
    const T* x = batch.data() + s * H;
    for (std::size_t u = 0; u < C; ++u) {
      const T* w = p.encoder_weights.data() + u * H;
      T acc = p.encoder_bias[u];
      for (std::size_t k = 0; k < H; ++k) acc += w[k] * x[k];
      pre[u] = acc;
      code[u] = acc > T{0} ? acc : T{0};
      l1_sum += static_cast<double>(code[u]);
    }
    for (std::size_t k = 0; k < H; ++k) {
      const T* w = p.decoder_weights.data() + k * C;
      T acc = p.decoder_bias[k];
      for (std::size_t u = 0; u < C; ++u) acc += w[u] * code[u];
      x_hat[k] = acc;
      const T r = acc - x[k];
      recon_sum += static_cast<double>(r) * static_cast<double>(r);
      g_out[k] = T{2} * r * inv_n;
    }
    if (!grad) continue;

    for (std::size_t k = 0; k < H; ++k) {
      grad->decoder_bias[k] += g_out[k];
      T* gw = grad->decoder_weights.data() + k * C;
      for (std::size_t u = 0; u < C; ++u) gw[u] += g_out[k] * code[u];
    }
    for (std::size_t u = 0; u < C; ++u) {
      if (!(pre[u] > T{0})) continue;
      T g = l1_grad;
      for (std::size_t k = 0; k < H; ++k) g += p.decoder_weights[k * C + u] * g_out[k];
      grad->encoder_bias[u] += g;
      T* gw = grad->encoder_weights.data() + u * H;
      for (std::size_t k = 0; k < H; ++k) gw[k] += g * x[k];
    }
  }

  LossBreakdown out;
  out.reconstruction = recon_sum / static_cast<double>(n);
  out.sparsity = sparsity_weight * l1_sum / static_cast<double>(n);
  out.total = out.reconstruction + out.sparsity;
  return out;
}

}  // namespace

template <typename T>
LossBreakdown loss(const BasicSaeParams<T>& p, std::span<const T> batch, double sparsity_weight) {
  return forward_backward<T>(p, batch, sparsity_weight, nullptr);
}

template <typename T>
BasicSaeParams<T> gradient(const BasicSaeParams<T>& p, std::span<const T> batch,
                           double sparsity_weight, LossBreakdown* loss_out) {
  auto grad = BasicSaeParams<T>::zeros(p.input_dim, p.code_dim);
  const auto l = forward_backward<T>(p, batch, sparsity_weight, &grad);
  if (loss_out) *loss_out = l;
  return grad;
}

#define PICL_SAE_INSTANTIATE(T)                                                                 \
  template void encode<T>(const BasicSaeParams<T>&, std::span<const T>, std::span<T>);          \
  template std::vector<T> encode<T>(const BasicSaeParams<T>&, std::span<const T>);              \
  template void decode<T>(const BasicSaeParams<T>&, std::span<const T>, std::span<T>);          \
  template std::vector<T> decode<T>(const BasicSaeParams<T>&, std::span<const T>);              \
  template LossBreakdown loss<T>(const BasicSaeParams<T>&, std::span<const T>, double);         \
  template BasicSaeParams<T> gradient<T>(const BasicSaeParams<T>&, std::span<const T>, double, \
                                         LossBreakdown*);

PICL_SAE_INSTANTIATE(float)
PICL_SAE_INSTANTIATE(double)
#undef PICL_SAE_INSTANTIATE

void TrainConfig::validate() const {
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorCode::InvalidInput,
          "learning_rate must be finite and non-negative");
  require(sparsity_weight >= 0.0, ErrorCode::InvalidInput, "sparsity_weight must be >= 0");
  require(epochs >= 0, ErrorCode::InvalidInput, "epochs must be >= 0");
  require(batch_size >= 1, ErrorCode::InvalidInput, "batch_size must be >= 1");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          ErrorCode::InvalidInput, "adam betas must be in [0, 1)");
  require(adam_epsilon > 0.0, ErrorCode::InvalidInput, "adam epsilon must be > 0");
  require(expansion >= 1, ErrorCode::InvalidInput, "expansion must be >= 1");
}

bool operator==(const EpochLoss& a, const EpochLoss& b) {
  return std::bit_cast<std::uint64_t>(a.total) == std::bit_cast<std::uint64_t>(b.total) &&
         std::bit_cast<std::uint64_t>(a.reconstruction) ==
             std::bit_cast<std::uint64_t>(b.reconstruction) &&
         std::bit_cast<std::uint64_t>(a.sparsity) == std::bit_cast<std::uint64_t>(b.sparsity);
}

std::pair<SaeParams, TrainReport> train(std::span<const float> data, std::size_t input_dim,
                                        const TrainConfig& config) {
  config.validate();
  require(input_dim > 0 && data.size() % input_dim == 0, ErrorCode::InvalidInput,
          "training data is not a multiple of input_dim");
  const auto n = data.size() / input_dim;
  require(n > 0, ErrorCode::InvalidInput, "cannot train on an empty dataset");

  auto params = SaeParams::initialize(input_dim, config.expansion * input_dim, config.seed);
  const auto n_params = params.n_parameters();
  std::vector<float> m(n_params, 0.0f), v(n_params, 0.0f);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> batch;
  batch.reserve(std::min(n, config.batch_size) * input_dim);
  Rng rng(combine_seed(config.seed, 0x7a1d0f5eULL));

  const auto lr = static_cast<float>(config.learning_rate);
  const auto b1 = static_cast<float>(config.adam_beta1);
  const auto b2 = static_cast<float>(config.adam_beta2);
  const auto eps = static_cast<float>(config.adam_epsilon);
  std::uint64_t t = 0;

  TrainReport report;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    EpochLoss acc;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const auto end = std::min(n, start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) {
        const float* row = data.data() + order[i] * input_dim;
        batch.insert(batch.end(), row, row + input_dim);
      }
      LossBreakdown l;
      auto grad = gradient<float>(params, batch, config.sparsity_weight, &l);
      if (!std::isfinite(l.total)) throw NonFiniteLossError(epoch, batch_index);
      const double w = static_cast<double>(end - start) / static_cast<double>(n);
      acc.total += w * l.total;
      acc.reconstruction += w * l.reconstruction;
      acc.sparsity += w * l.sparsity;

      ++t;
      const auto c1 = static_cast<float>(1.0 - std::pow(config.adam_beta1, static_cast<double>(t)));
      const auto c2 = static_cast<float>(1.0 - std::pow(config.adam_beta2, static_cast<double>(t)));
      auto flat = params.flatten();
      const auto g = grad.flatten();
      for (std::size_t i = 0; i < n_params; ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        const float m_hat = m[i] / c1;
        const float v_hat = v[i] / c2;
        flat[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      }
      params.unflatten(flat);
    }
    report.epochs.push_back(acc);
  }
  report.active_fraction = active_fraction(params, data);
  return {std::move(params), std::move(report)};
}

std::pair<SaeParams, TrainReport> train(const activations::ActivationDataset& dataset,
                                        const TrainConfig& config) {
  return train(std::span<const float>(dataset.residuals), dataset.hidden_dim, config);
}

double active_fraction(const SaeParams& p, std::span<const float> data) {
  require(data.size() % p.input_dim == 0, ErrorCode::InvalidInput, "data shape mismatch");
  const auto n = data.size() / p.input_dim;
  if (n == 0) return 0.0;
  std::vector<float> code(p.code_dim);
  std::size_t active = 0;
  for (std::size_t s = 0; s < n; ++s) {
    encode<float>(p, data.subspan(s * p.input_dim, p.input_dim), code);
    active += static_cast<std::size_t>(std::count_if(code.begin(), code.end(), [](float c) { return c > 0.0f; }));
  }
  return static_cast<double>(active) / static_cast<double>(n * p.code_dim);
}

std::vector<float> encode_all(const SaeParams& p, std::span<const float> data) {
  require(data.size() % p.input_dim == 0, ErrorCode::InvalidInput, "data shape mismatch");
  const auto n = data.size() / p.input_dim;
  std::vector<float> codes(n * p.code_dim);
  for (std::size_t s = 0; s < n; ++s) {
    encode<float>(p, data.subspan(s * p.input_dim, p.input_dim),
                  std::span<float>(codes).subspan(s * p.code_dim, p.code_dim));
  }
  return codes;
}

namespace {

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const std::byte> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(std::to_integer<unsigned>(bytes[at + i])) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(const SaeParams& p, const std::filesystem::path& path) {
  p.validate();
  require(p.code_dim == 2 * p.input_dim, ErrorCode::InvalidInput,
          "checkpoint format requires code_dim == 2H");
  std::vector<std::byte> out;
  out.reserve(12 + 4 * p.n_parameters());
  for (char c : kCheckpointMagic) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(p.input_dim));
  for (float x : p.flatten()) put_u32(out, std::bit_cast<std::uint32_t>(x));
  write_file_atomic(path, std::span<const std::byte>(out));
}

SaeParams read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw Error(ErrorCode::BadMagic, "not a PSAE checkpoint: " + path.string());
  if (bytes.size() < 12) throw Error(ErrorCode::Truncated, "checkpoint header truncated");
  const auto version = get_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::UnsupportedVersion, "checkpoint version " + std::to_string(version));
  const std::size_t H = get_u32(bytes, 8);
  require(H > 0, ErrorCode::InvalidInput, "checkpoint H must be > 0");
  auto p = SaeParams::zeros(H, 2 * H);
  const auto expected = 12 + 4 * p.n_parameters();
  if (bytes.size() < expected) throw Error(ErrorCode::Truncated, "checkpoint payload truncated");
  if (bytes.size() > expected) throw Error(ErrorCode::InvalidInput, "trailing bytes in checkpoint");
  std::vector<float> flat(p.n_parameters());
  for (std::size_t i = 0; i < flat.size(); ++i)
    flat[i] = std::bit_cast<float>(get_u32(bytes, 12 + 4 * i));
  p.unflatten(flat);
  return p;
}

void write_loss_curve(const TrainReport& report, const std::filesystem::path& path) {
  CsvTable table({"epoch", "total", "reconstruction", "sparsity"});
  for (std::size_t e = 0; e < report.epochs.size(); ++e) {
    const auto& l = report.epochs[e];
    table.row().cell(e + 1).cell(l.total).cell(l.reconstruction).cell(l.sparsity);
  }
  table.write(path);
}

}  // namespace picl::sae
