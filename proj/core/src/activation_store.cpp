#include "picl/activation_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"

namespace picl::activations {

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

std::vector<std::byte> encode_tensor(const ActivationTensor& t) {
  require(t.seq_len > 0 && t.hidden_dim > 0, ErrorCode::InvalidInput, "tensor dims must be > 0");
  require(t.data.size() == static_cast<std::size_t>(t.seq_len) * t.hidden_dim,
          ErrorCode::InvalidInput, "tensor data length != L * H");
  std::vector<std::byte> out;
  out.reserve(kTensorHeaderBytes + 4 * t.data.size());
  for (char c : kTensorMagic) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kTensorFormatVersion);
  put_u32(out, t.block_index);
  put_u32(out, t.context_length);
  put_u32(out, t.seq_len);
  put_u32(out, t.hidden_dim);
  for (float x : t.data) put_u32(out, std::bit_cast<std::uint32_t>(x));
  return out;
}

ActivationTensor decode_tensor(std::span<const std::byte> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic, 4) != 0)
    throw Error(ErrorCode::BadMagic, "not a PICL tensor file");
  if (bytes.size() < kTensorHeaderBytes)
    throw Error(ErrorCode::Truncated, "tensor header truncated");
  const auto version = get_u32(bytes, 4);
  if (version != kTensorFormatVersion)
    throw Error(ErrorCode::UnsupportedVersion,
                "tensor format version " + std::to_string(version) + " not supported");
  ActivationTensor t;
  t.block_index = get_u32(bytes, 8);
  t.context_length = get_u32(bytes, 12);
  t.seq_len = get_u32(bytes, 16);
  t.hidden_dim = get_u32(bytes, 20);
  if (t.seq_len == 0 || t.hidden_dim == 0)
    throw Error(ErrorCode::InvalidInput, "tensor dims must be > 0");

  const auto n = static_cast<std::uint64_t>(t.seq_len) * t.hidden_dim;
  constexpr auto kMaxFloats = (std::numeric_limits<std::size_t>::max() - kTensorHeaderBytes) / 4;
  if (n > kMaxFloats) throw Error(ErrorCode::DimensionOverflow, "L * H overflows the address space");
  const auto expected = kTensorHeaderBytes + 4 * static_cast<std::size_t>(n);
  if (bytes.size() < expected)
    throw Error(ErrorCode::Truncated, "tensor payload truncated: " + std::to_string(bytes.size()) +
                                          " of " + std::to_string(expected) + " bytes");
  if (bytes.size() > expected)
    throw Error(ErrorCode::InvalidInput, "trailing bytes after tensor payload");

  t.data.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < t.data.size(); ++i)
    t.data[i] = std::bit_cast<float>(get_u32(bytes, kTensorHeaderBytes + 4 * i));
  return t;
}

void write_tensor(const ActivationTensor& t, const std::filesystem::path& path,
                  const nlohmann::json& extra_meta) {
  const auto bytes = encode_tensor(t);
  write_file_atomic(path, std::span<const std::byte>(bytes));
  nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  meta["block_index"] = t.block_index;
  meta["context_length"] = t.context_length;
  meta["seq_len"] = t.seq_len;
  meta["hidden_dim"] = t.hidden_dim;
  meta["provenance"] = {{"trajectory_id", t.provenance.trajectory_id},
                        {"channel", t.provenance.channel},
                        {"model_id", t.provenance.model_id}};
  write_sidecar(path, meta);
}

ActivationTensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_binary_file(path);
  auto t = decode_tensor(bytes);
  if (std::filesystem::exists(sidecar_path(path))) {
    const auto meta = read_sidecar(path);
    if (meta.contains("provenance")) {
      const auto& p = meta["provenance"];
      t.provenance.trajectory_id = p.value("trajectory_id", "");
      t.provenance.channel = p.value("channel", "");
      t.provenance.model_id = p.value("model_id", "");
    }
  }
  return t;
}

double random_baseline(std::uint64_t seed, std::string_view trajectory_id, std::string_view channel,
                       std::size_t step) {
  std::string key(trajectory_id);
  key += '\x1f';
  key += channel;
  const auto stream = combine_seed(seed, fnv1a64(key));
  return keyed_normal(stream, step);
}

ActivationDataset build_dataset(
    std::span<const ActivationTensor> tensors,
    const std::map<std::string, physics::Trajectory>& trajectories,
    const std::map<std::pair<std::string, std::string>, PromptAlignment>& alignments,
    std::uint64_t seed) {
  ActivationDataset ds;
  ds.seed = seed;
  if (tensors.empty()) return ds;
  ds.hidden_dim = tensors.front().hidden_dim;

  for (const auto& t : tensors) {
    require(t.hidden_dim == ds.hidden_dim, ErrorCode::InvalidInput,
            "tensors disagree on hidden dimension");
    const auto& prov = t.provenance;
    const auto traj_it = trajectories.find(prov.trajectory_id);
    if (traj_it == trajectories.end())
      throw Error(ErrorCode::MissingAlignment, "no trajectory '" + prov.trajectory_id + "'");
    const auto align_it = alignments.find({prov.trajectory_id, prov.channel});
    if (align_it == alignments.end()) {
      throw Error(ErrorCode::MissingAlignment,
                  "no alignment for " + prov.trajectory_id + "/" + prov.channel);
    }
    const auto& traj = traj_it->second;
    const auto& align = align_it->second;
    require(align.tokens.size() == t.context_length, ErrorCode::InvalidInput,
            "alignment has " + std::to_string(align.tokens.size()) + " steps, tensor context is " +
                std::to_string(t.context_length));

    const auto source = ds.sources.size();
    ds.sources.push_back({t.block_index, t.context_length, prov.trajectory_id, prov.channel});
    for (std::size_t step = 0; step < align.tokens.size(); ++step) {
      const auto state_index = align.history_start + step;
      if (state_index >= traj.states.size()) {
        throw Error(ErrorCode::OutOfRange, "step " + std::to_string(state_index) +
                                               " beyond trajectory " + prov.trajectory_id);
      }
      const auto token = align.tokens[step].representative;
      if (token >= t.seq_len) {
        throw Error(ErrorCode::OutOfRange, "representative token " + std::to_string(token) +
                                               " beyond tensor length");
      }
      const auto row = t.row(token);
      ds.residuals.insert(ds.residuals.end(), row.begin(), row.end());
      SampleInfo info;
      info.source = source;
      info.step = step;
      info.energy = physics::energy(traj.spec, traj.states[state_index]);
      info.random_baseline = random_baseline(seed, prov.trajectory_id, prov.channel, step);
      ds.samples.push_back(info);
    }
  }
  return ds;
}

void PlantedSpec::validate() const {
  require(hidden_dim > 0, ErrorCode::InvalidInput, "hidden_dim must be > 0");
  require(features.size() <= hidden_dim, ErrorCode::InvalidInput, "more features than dimensions");
  require(std::isfinite(noise_scale) && noise_scale >= 0.0, ErrorCode::InvalidInput,
          "noise_scale must be >= 0");
  constexpr double kTol = 1e-9;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& d = features[i].direction;
    require(features[i].source != QuantityKind::RandomBaseline, ErrorCode::InvalidInput,
            "planted features must track an energy component");
    require(d.size() == hidden_dim, ErrorCode::InvalidInput, "direction has wrong dimension");
    for (std::size_t j = 0; j <= i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < hidden_dim; ++k) dot += d[k] * features[j].direction[k];
      const double expected = i == j ? 1.0 : 0.0;
      require(std::abs(dot - expected) <= kTol, ErrorCode::InvalidInput,
              i == j ? "direction is not unit length" : "directions are not orthogonal");
    }
  }
}

PlantedSpec PlantedSpec::random(std::size_t hidden_dim, std::vector<QuantityKind> sources,
                                double noise_scale, std::uint64_t seed,
                                std::uint32_t block_index) {
  require(sources.size() <= hidden_dim, ErrorCode::InvalidInput, "more features than dimensions");
  PlantedSpec spec;
  spec.hidden_dim = hidden_dim;
  spec.block_index = block_index;
  spec.noise_scale = noise_scale;
  spec.seed = seed;
  Rng rng(combine_seed(seed, 0xd1ec7105ULL));
  for (auto source : sources) {
    std::vector<double> d(hidden_dim);
    for (;;) {
      for (auto& x : d) x = rng.normal();
      // Two Gram-Schmidt passes keep orthogonality at the 1e-15 level.
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& f : spec.features) {
          double dot = 0.0;
          for (std::size_t k = 0; k < hidden_dim; ++k) dot += d[k] * f.direction[k];
          for (std::size_t k = 0; k < hidden_dim; ++k) d[k] -= dot * f.direction[k];
        }
      }
      double norm = 0.0;
      for (double x : d) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (auto& x : d) x /= norm;
        break;
      }
    }
    spec.features.push_back({source, std::move(d)});
  }
  spec.validate();
  return spec;
}

PlantedActivations generate_planted(const PlantedSpec& spec,
                                    const std::map<std::string, physics::Trajectory>& trajectories) {
  spec.validate();
  PlantedActivations out;
  out.truth = spec.features;

  // Pooled normalization over every supplied state.
  std::array<double, kNumQuantities> sum{}, sum_sq{};
  std::size_t count = 0;
  std::map<std::string, std::vector<physics::EnergyBreakdown>> energies;
  for (const auto& [id, traj] : trajectories) {
    auto& e = energies[id];
    e.reserve(traj.states.size());
    for (const auto& s : traj.states) {
      e.push_back(physics::energy(traj.spec, s));
      for (auto q : kAllQuantities) {
        const double v = quantity_value(e.back(), 0.0, q);
        sum[index_of(q)] += v;
        sum_sq[index_of(q)] += v * v;
      }
      ++count;
    }
  }
  for (auto q : kAllQuantities) {
    const auto i = index_of(q);
    if (count == 0) break;
    const double mean = sum[i] / static_cast<double>(count);
    const double var = std::max(0.0, sum_sq[i] / static_cast<double>(count) - mean * mean);
    out.normalization.offset[i] = mean;
    out.normalization.scale[i] = var > 0.0 ? std::sqrt(var) : 1.0;
  }

  const auto H = spec.hidden_dim;
  for (const auto& [id, traj] : trajectories) {
    const auto& e = energies.at(id);
    ActivationTensor t;
    t.block_index = spec.block_index;
    t.context_length = static_cast<std::uint32_t>(traj.states.size());
    t.seq_len = t.context_length;
    t.hidden_dim = static_cast<std::uint32_t>(H);
    t.provenance = {id, "planted", "planted"};
    t.data.assign(static_cast<std::size_t>(t.seq_len) * H, 0.0f);
    Rng noise(combine_seed(spec.seed, fnv1a64(id)));
    for (std::size_t step = 0; step < traj.states.size(); ++step) {
      std::vector<double> r(H, 0.0);
      for (const auto& f : spec.features) {
        const auto i = index_of(f.source);
        const double s =
            (quantity_value(e[step], 0.0, f.source) - out.normalization.offset[i]) /
            out.normalization.scale[i];
        for (std::size_t k = 0; k < H; ++k) r[k] += s * f.direction[k];
      }
      if (spec.noise_scale > 0.0)
        for (auto& x : r) x += spec.noise_scale * noise.normal();
      auto row = t.row(step);
      for (std::size_t k = 0; k < H; ++k) row[k] = static_cast<float>(r[k]);
    }

    PromptAlignment align;
    align.trajectory_id = id;
    align.channel = "planted";
    align.history_start = 0;
    align.tokens.resize(traj.states.size());
    for (std::size_t step = 0; step < traj.states.size(); ++step) align.tokens[step] = {step, step, step};
    out.alignments[{id, "planted"}] = std::move(align);
    out.tensors.push_back(std::move(t));
  }
  return out;
}

}  // namespace picl::activations
