#include "picl/mock_model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include "picl/error.hpp"
#include "picl/intervention.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"
#include "picl/tokenizer.hpp"

namespace picl::mock {

using nlohmann::json;

namespace {

constexpr std::string_view kAlphabet = "0123456789-,";
constexpr double kSignalClamp = 10.0;

int char_index(char c) {
  const auto pos = kAlphabet.find(c);
  return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

// Thrown inside a session; becomes an error response with this code.
struct RequestError {
  std::string code;
  std::string message;
};

[[noreturn]] void reject(std::string code, std::string message) {
  throw RequestError{std::move(code), std::move(message)};
}

std::string_view strip_trailing_comma(std::string_view prompt) {
  if (!prompt.empty() && prompt.back() == ',') prompt.remove_suffix(1);
  return prompt;
}

std::vector<long long> prompt_literals(std::string_view prompt) {
  if (prompt.empty()) reject("invalid_payload", "empty prompt");
  for (char c : prompt)
    if (char_index(c) < 0)
      reject("invalid_payload", std::string("prompt contains unsupported character '") + c + "'");
  try {
    return tokenizer::parse_literals(strip_trailing_comma(prompt));
  } catch (const ParseError& e) {
    reject("invalid_payload", e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void MockConfig::validate() const {
  require(n_blocks >= 1, ErrorCode::Config, "mock n_blocks must be positive");
  require(hidden_dim >= 2, ErrorCode::Config, "mock hidden_dim must be at least 2");
  std::set<std::uint32_t> seen;
  for (const auto& p : planted) {
    require(p.block < n_blocks, ErrorCode::Config,
            "planted block " + std::to_string(p.block) + " outside the model");
    require(seen.insert(p.block).second, ErrorCode::Config, "planted block listed twice");
    require(!p.sources.empty(), ErrorCode::Config, "planted block without sources");
    require(p.sources.size() + kAlphabet.size() < hidden_dim * 4 && p.sources.size() < hidden_dim,
            ErrorCode::Config, "too many planted features for hidden_dim");
  }
  require(noise_scale >= 0.0 && embed_scale >= 0.0, ErrorCode::Config,
          "mock noise and embedding scales must be >= 0");
  require(sigma0 > 0.0 && gamma >= 0.0 && reference_length > 0.0 && step_growth >= 0.0,
          ErrorCode::Config, "mock readout profile parameters out of range");
  require(coupling >= 0.0, ErrorCode::Config, "mock coupling must be >= 0");
  require(invalid_sample_rate >= 0.0 && invalid_sample_rate <= 1.0, ErrorCode::Config,
          "invalid_sample_rate must be in [0, 1]");
  require(dt > 0.0 && reference_systems >= 1 && reference_steps >= 1, ErrorCode::Config,
          "mock reference simulation parameters out of range");
  sampling_ranges.validate();
}

json MockConfig::to_json() const {
  json planted_json = json::array();
  for (const auto& p : planted) {
    json sources = json::array();
    for (auto q : p.sources) sources.push_back(std::string(picl::to_string(q)));
    planted_json.push_back({{"block", p.block}, {"sources", sources}});
  }
  return {{"model_id", model_id},
          {"n_blocks", n_blocks},
          {"hidden_dim", hidden_dim},
          {"planted", planted_json},
          {"noise_scale", noise_scale},
          {"embed_scale", embed_scale},
          {"seed", seed},
          {"sigma0", sigma0},
          {"gamma", gamma},
          {"reference_length", reference_length},
          {"step_growth", step_growth},
          {"coupling", coupling},
          {"invalid_sample_rate", invalid_sample_rate},
          {"sampling_ranges", sampling_ranges.to_json()},
          {"dt", dt},
          {"reference_systems", reference_systems},
          {"reference_steps", reference_steps}};
}

MockConfig MockConfig::from_json(const json& j) {
  require(j.is_object(), ErrorCode::Config, "mock config must be an object");
  MockConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "model_id") {
      c.model_id = v.get<std::string>();
    } else if (key == "n_blocks") {
      c.n_blocks = v.get<std::uint32_t>();
    } else if (key == "hidden_dim") {
      c.hidden_dim = v.get<std::uint32_t>();
    } else if (key == "planted") {
      c.planted.clear();
      for (const auto& p : v) {
        PlantedBlockConfig b;
        b.sources.clear();
        for (const auto& [pk, pv] : p.items()) {
          if (pk == "block") {
            b.block = pv.get<std::uint32_t>();
          } else if (pk == "sources") {
            for (const auto& s : pv) b.sources.push_back(quantity_from_string(s.get<std::string>()));
          } else {
            throw Error(ErrorCode::Config, "unknown mock.planted key '" + pk + "'");
          }
        }
        c.planted.push_back(std::move(b));
      }
    } else if (key == "noise_scale") {
      c.noise_scale = v.get<double>();
    } else if (key == "embed_scale") {
      c.embed_scale = v.get<double>();
    } else if (key == "seed") {
      c.seed = v.get<std::uint64_t>();
    } else if (key == "sigma0") {
      c.sigma0 = v.get<double>();
    } else if (key == "gamma") {
      c.gamma = v.get<double>();
    } else if (key == "reference_length") {
      c.reference_length = v.get<double>();
    } else if (key == "step_growth") {
      c.step_growth = v.get<double>();
    } else if (key == "coupling") {
      c.coupling = v.get<double>();
    } else if (key == "invalid_sample_rate") {
      c.invalid_sample_rate = v.get<double>();
    } else if (key == "sampling_ranges") {
      c.sampling_ranges = physics::SamplingRanges::from_json(v);
    } else if (key == "dt") {
      c.dt = v.get<double>();
    } else if (key == "reference_systems") {
      c.reference_systems = v.get<std::size_t>();
    } else if (key == "reference_steps") {
      c.reference_steps = v.get<std::size_t>();
    } else {
      throw Error(ErrorCode::Config, "unknown mock key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model

std::shared_ptr<MockModel> MockModel::create(MockConfig config) {
  return std::shared_ptr<MockModel>(new MockModel(std::move(config)));
}

MockModel::MockModel(MockConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t H = config_.hidden_dim;
  for (const auto& p : config_.planted) {
    planted_.emplace(p.block, activations::PlantedSpec::random(
                                  H, p.sources, config_.noise_scale,
                                  combine_seed(config_.seed, 0x9000 + p.block), p.block));
  }
  embeddings_.resize(config_.n_blocks);
  for (std::uint32_t b = 0; b < config_.n_blocks; ++b) {
    const auto* spec = planted(b);
    embeddings_[b].resize(kAlphabet.size());
    for (std::size_t c = 0; c < kAlphabet.size(); ++c) {
      Rng rng(combine_seed(config_.seed, (static_cast<std::uint64_t>(b) << 8) | c));
      std::vector<double> e(H);
      for (auto& x : e) x = rng.normal();
      if (spec) {
        for (const auto& f : spec->features) {
          double dot = 0.0;
          for (std::size_t k = 0; k < H; ++k) dot += e[k] * f.direction[k];
          for (std::size_t k = 0; k < H; ++k) e[k] -= dot * f.direction[k];
        }
      }
      double norm = 0.0;
      for (double x : e) norm += x * x;
      norm = std::sqrt(norm);
      for (auto& x : e) x = norm > 0.0 ? x * config_.embed_scale / norm : 0.0;
      embeddings_[b][c] = std::move(e);
    }
  }
}

protocol::HelloResponse MockModel::hello() const {
  protocol::HelloResponse r;
  r.model_id = config_.model_id;
  r.n_blocks = config_.n_blocks;
  r.hidden_dim = config_.hidden_dim;
  return r;
}

const activations::PlantedSpec* MockModel::planted(std::uint32_t block) const {
  auto it = planted_.find(block);
  return it == planted_.end() ? nullptr : &it->second;
}

std::shared_ptr<const physics::Trajectory> MockModel::load_trajectory(const std::string& path) const {
  {
    std::lock_guard lock(cache_mutex_);
    auto it = trajectories_.find(path);
    if (it != trajectories_.end()) return it->second;
  }
  auto traj = std::make_shared<const physics::Trajectory>(physics::read_trajectory(path));
  std::lock_guard lock(cache_mutex_);
  return trajectories_.emplace(path, std::move(traj)).first->second;
}

activations::SignalNormalization MockModel::normalization(physics::SystemKind kind) const {
  {
    std::lock_guard lock(cache_mutex_);
    auto it = normalization_.find(kind);
    if (it != normalization_.end()) return it->second;
  }
  // Offset by the reference minimum so planted signals are non-negative, as a
  // ReLU code tracking them would be.
  std::array<double, kNumQuantities> sum{}, sum_sq{};
  std::array<double, kNumQuantities> lo;
  lo.fill(std::numeric_limits<double>::infinity());
  std::size_t count = 0;
  for (std::size_t i = 0; i < config_.reference_systems; ++i) {
    const auto [spec, init] = physics::sample_system(
        combine_seed(config_.seed, 0x5eed0000 + i), kind, config_.sampling_ranges);
    const auto traj = physics::integrate(spec, init, config_.dt, config_.reference_steps);
    for (const auto& s : traj.states) {
      const auto e = physics::energy(spec, s);
      for (auto q : kAllQuantities) {
        const double v = quantity_value(e, 0.0, q);
        sum[index_of(q)] += v;
        sum_sq[index_of(q)] += v * v;
        lo[index_of(q)] = std::min(lo[index_of(q)], v);
      }
      ++count;
    }
  }
  activations::SignalNormalization n;
  for (auto q : kAllQuantities) {
    const auto i = index_of(q);
    const double mean = sum[i] / static_cast<double>(count);
    const double var = std::max(0.0, sum_sq[i] / static_cast<double>(count) - mean * mean);
    n.offset[i] = lo[i];
    n.scale[i] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  std::lock_guard lock(cache_mutex_);
  return normalization_.emplace(kind, n).first->second;
}

std::vector<std::array<double, kNumQuantities>> MockModel::prompt_signals(
    std::string_view prompt, const protocol::OracleHint* oracle) const {
  const auto literals = prompt_literals(prompt);
  std::vector<std::array<double, kNumQuantities>> out(literals.size());
  if (oracle) {
    std::shared_ptr<const physics::Trajectory> traj;
    try {
      traj = load_trajectory(oracle->trajectory_path);
    } catch (const Error& e) {
      reject("invalid_payload", std::string("cannot load oracle trajectory: ") + e.what());
    }
    if (oracle->history_start + literals.size() > traj->size())
      reject("invalid_payload", "oracle trajectory shorter than the prompt");
    const auto norm = normalization(traj->spec.kind);
    for (std::size_t t = 0; t < literals.size(); ++t) {
      const auto e = physics::energy(traj->spec, traj->states[oracle->history_start + t]);
      for (auto q : {QuantityKind::TotalEnergy, QuantityKind::KineticEnergy,
                     QuantityKind::PotentialEnergy}) {
        const auto i = index_of(q);
        out[t][i] = std::clamp((quantity_value(e, 0.0, q) - norm.offset[i]) / norm.scale[i],
                               0.0, kSignalClamp);
      }
      out[t][index_of(QuantityKind::RandomBaseline)] = 0.0;
    }
    return out;
  }
  // No ground truth: the planted directions carry the prompt's own values,
  // shifted by their minimum and scaled by their spread.
  double mean = 0.0;
  double lo = std::numeric_limits<double>::infinity();
  for (auto v : literals) {
    mean += static_cast<double>(v);
    lo = std::min(lo, static_cast<double>(v));
  }
  mean /= static_cast<double>(literals.size());
  double var = 0.0;
  for (auto v : literals) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  const double sd = var > 0.0 ? std::sqrt(var / static_cast<double>(literals.size())) : 1.0;
  for (std::size_t t = 0; t < literals.size(); ++t) {
    const double z = std::clamp((static_cast<double>(literals[t]) - lo) / sd, 0.0, kSignalClamp);
    out[t] = {z, z, z, 0.0};
  }
  return out;
}

std::vector<double> MockModel::residuals(
    std::uint32_t block, std::string_view prompt,
    const std::vector<std::array<double, kNumQuantities>>& signals, std::uint64_t seed) const {
  require(block < config_.n_blocks, ErrorCode::OutOfRange, "block outside the model");
  const std::size_t H = config_.hidden_dim;
  const auto* spec = planted(block);
  std::vector<double> out(prompt.size() * H, 0.0);
  Rng noise(combine_seed(combine_seed(config_.seed, seed), combine_seed(fnv1a64(prompt), block)));
  std::size_t step = 0;
  for (std::size_t p = 0; p < prompt.size(); ++p) {
    const int c = char_index(prompt[p]);
    require(c >= 0, ErrorCode::InvalidInput, "unsupported prompt character");
    double* row = out.data() + p * H;
    const auto& e = embeddings_[block][static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < H; ++k) row[k] = e[k];
    if (spec && step < signals.size()) {
      for (const auto& f : spec->features) {
        const double s = signals[step][index_of(f.source)];
        for (std::size_t k = 0; k < H; ++k) row[k] += s * f.direction[k];
      }
    }
    for (std::size_t k = 0; k < H; ++k) row[k] += config_.noise_scale * noise.normal();
    if (prompt[p] == ',') ++step;
  }
  return out;
}

std::unique_ptr<protocol::LineHandler> MockModel::new_session() {
  return std::make_unique<MockSession>(shared_from_this());
}

// ---------------------------------------------------------------------------
// Session

std::string MockSession::handle_line(std::string_view line) {
  json request = json::parse(line, nullptr, false);
  if (request.is_discarded() || !request.is_object()) {
    json err = protocol::error_response(session_id_, "malformed_message",
                                        "request is not a JSON object");
    err["sampling"] = protocol::SamplingSettings{}.to_json();
    return err.dump();
  }
  return handle(request).dump();
}

json MockSession::handle(const json& request) {
  const protocol::SamplingSettings sampling;
  json response;
  try {
    auto type_it = request.find("type");
    if (type_it == request.end() || !type_it->is_string())
      reject("malformed_message", "missing 'type'");
    const std::string type = type_it->get<std::string>();
    auto sid = request.find("session_id");
    if (sid == request.end() || !sid->is_string())
      reject("malformed_message", "missing 'session_id'");

    if (type == "hello") {
      const auto version = request.value("protocol_version", -1);
      if (version != protocol::kProtocolVersion)
        reject("unsupported_version",
               "server speaks protocol version " + std::to_string(protocol::kProtocolVersion));
      if (auto model = request.find("model"); model != request.end()) {
        if (!model->is_string() || model->get<std::string>() != model_->config().model_id)
          reject("unknown_model", "this server hosts " + model_->config().model_id);
      }
      session_id_ = sid->get<std::string>();
      greeted_ = true;
      edits_.clear();
      response = model_->hello().to_json();
    } else {
      if (!greeted_) reject("no_session", "send hello first");
      if (sid->get<std::string>() != session_id_)
        reject("unknown_session", "session id does not match hello");
      try {
        if (type == "generate") {
          response = on_generate(request);
        } else if (type == "capture") {
          response = on_capture(request);
        } else if (type == "intervene") {
          response = on_intervene(request);
        } else if (type == "clear") {
          edits_.clear();
          response = {{"type", "clear"}, {"ok", true}};
        } else if (type == "bye") {
          finished_ = true;
          response = {{"type", "bye"}, {"ok", true}};
        } else {
          reject("unknown_type", "unknown message type '" + type + "'");
        }
      } catch (const Error& e) {
        reject(e.code() == ErrorCode::OutOfRange ? "out_of_range_block" : "invalid_payload",
               e.what());
      }
    }
  } catch (const RequestError& e) {
    response = protocol::error_response(session_id_, e.code, e.message);
  } catch (const std::exception& e) {
    response = protocol::error_response(session_id_, "invalid_payload", e.what());
  }
  response["session_id"] = session_id_;
  response["sampling"] = sampling.to_json();
  return response;
}

double MockSession::damage(std::string_view prompt,
                           const std::vector<std::array<double, kNumQuantities>>& signals,
                           std::uint64_t seed) const {
  if (edits_.empty()) return 0.0;
  const auto& cfg = model_->config();
  const std::size_t H = cfg.hidden_dim;
  double total = 0.0;
  for (const auto& p : cfg.planted) {
    const auto* spec = model_->planted(p.block);
    std::vector<const ActiveEdit*> here;
    for (const auto& e : edits_)
      if (e.edit.block == p.block) here.push_back(&e);
    if (here.empty()) continue;
    const auto r = model_->residuals(p.block, prompt, signals, seed);
    double removed = 0.0, present = 0.0;
    std::vector<float> x(H);
    for (std::size_t pos = 0; pos < prompt.size(); ++pos) {
      const double* row = r.data() + pos * H;
      for (std::size_t k = 0; k < H; ++k) x[k] = static_cast<float>(row[k]);
      std::vector<float> edited = x;
      for (const auto* e : here)
        edited = intervention::ablate_residual(edited, e->sae, e->edit.units, e->edit.mode);
      for (const auto& f : spec->features) {
        double before = 0.0, delta = 0.0;
        for (std::size_t k = 0; k < H; ++k) {
          before += static_cast<double>(x[k]) * f.direction[k];
          delta += static_cast<double>(x[k] - edited[k]) * f.direction[k];
        }
        present += before * before;
        removed += delta * delta;
      }
    }
    if (present > 0.0) total += std::min(1.0, removed / present);
  }
  return total / static_cast<double>(cfg.planted.size());
}

json MockSession::on_generate(const json& request) {
  protocol::GenerateRequest req;
  try {
    req = protocol::GenerateRequest::from_json(request);
  } catch (const Error& e) {
    reject("malformed_message", e.what());
  }
  if (req.n_steps < 1 || req.n_steps > 4096) reject("invalid_payload", "n_steps out of range");
  if (req.n_samples < 1 || req.n_samples > 1024) reject("invalid_payload", "n_samples out of range");
  const auto& cfg = model_->config();
  const auto literals = prompt_literals(req.prompt);
  const auto n = literals.size();

  // Ground-truth continuation in physical units and its per-step noise unit.
  std::vector<double> centre(req.n_steps);
  double unit = 1.0;
  std::function<long long(double)> to_literal;
  if (req.oracle) {
    const auto& h = *req.oracle;
    if (!(h.scale > 0.0) || h.precision < 1 || h.precision > 9)
      reject("invalid_payload", "oracle scaling out of range");
    const auto traj = model_->load_trajectory(h.trajectory_path);
    const auto names = physics::channel_names(traj->spec);
    const auto it = std::find(names.begin(), names.end(), h.channel);
    if (it == names.end()) reject("invalid_payload", "unknown channel '" + h.channel + "'");
    const auto ch = static_cast<std::size_t>(it - names.begin());
    if (h.history_start + n + req.n_steps > traj->size())
      reject("invalid_payload", "oracle trajectory too short for the requested continuation");
    const auto truth = physics::channel_series(*traj, ch, h.history_start + n, req.n_steps);
    std::copy(truth.begin(), truth.end(), centre.begin());
    const auto full = physics::channel_series(*traj, ch, 0, traj->size());
    double mean = 0.0;
    for (double v : full) mean += v;
    mean /= static_cast<double>(full.size());
    double var = 0.0;
    for (double v : full) var += (v - mean) * (v - mean);
    var /= static_cast<double>(full.size());
    unit = var > 0.0 ? std::sqrt(var) : 1.0;
    const tokenizer::ScalingParams sp{0.99, 0.3, h.scale, h.offset, false};
    const int precision = h.precision;
    to_literal = [sp, precision](double v) { return tokenizer::quantize(v, sp, precision); };
  } else {
    // Linear extrapolation in literal space.
    const double last = static_cast<double>(literals.back());
    const double slope = n >= 2 ? last - static_cast<double>(literals[n - 2]) : 0.0;
    for (std::size_t i = 0; i < req.n_steps; ++i)
      centre[i] = last + slope * static_cast<double>(i + 1);
    double mean = 0.0;
    for (auto v : literals) mean += static_cast<double>(v);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (auto v : literals) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
    unit = std::max(1.0, std::sqrt(var / static_cast<double>(n)));
    to_literal = [](double v) { return std::llround(v); };
  }

  const auto signals = model_->prompt_signals(req.prompt, req.oracle ? &*req.oracle : nullptr);
  const double amplify = 1.0 + cfg.coupling * damage(req.prompt, signals, req.seed);
  const double context =
      cfg.sigma0 * std::pow(cfg.reference_length / static_cast<double>(n), cfg.gamma);

  protocol::GenerateResponse out;
  for (std::size_t k = 0; k < req.n_samples; ++k) {
    const auto seed = protocol::sample_seed(req.seed, k);
    Rng rng(seed);
    Rng corrupt(combine_seed(seed, 0xbad));
    std::string text;
    for (std::size_t i = 0; i < req.n_steps; ++i) {
      const double sd = context * (1.0 + cfg.step_growth * static_cast<double>(i)) * amplify;
      const double value = centre[i] + sd * unit * rng.normal();
      const bool invalid =
          cfg.invalid_sample_rate > 0.0 && corrupt.uniform() < cfg.invalid_sample_rate;
      if (i > 0) text += ',';
      text += invalid ? std::string("?") : std::to_string(to_literal(value));
    }
    out.samples.push_back(std::move(text));
    out.seeds.push_back(seed);
  }
  return out.to_json();
}

json MockSession::on_capture(const json& request) {
  protocol::CaptureRequest req;
  try {
    req = protocol::CaptureRequest::from_json(request);
  } catch (const Error& e) {
    reject("malformed_message", e.what());
  }
  const auto& cfg = model_->config();
  if (req.blocks.empty()) reject("invalid_payload", "no capture blocks");
  std::set<std::uint32_t> seen;
  for (auto b : req.blocks) {
    if (b >= cfg.n_blocks)
      reject("out_of_range_block",
             "block " + std::to_string(b) + " outside a " + std::to_string(cfg.n_blocks) +
                 "-block model");
    if (!seen.insert(b).second) reject("invalid_payload", "capture block listed twice");
  }
  if (req.output_dir.empty() || req.basename.empty())
    reject("invalid_payload", "output_dir and basename are required");
  if (req.basename.find('/') != std::string::npos)
    reject("invalid_payload", "basename must not contain '/'");

  const auto signals = model_->prompt_signals(req.prompt, req.oracle ? &*req.oracle : nullptr);
  protocol::CaptureResponse out;
  out.hidden_dim = cfg.hidden_dim;
  out.token_lengths.assign(req.prompt.size(), 1);
  for (auto b : req.blocks) {
    const auto r = model_->residuals(b, req.prompt, signals, req.seed);
    activations::ActivationTensor t;
    t.block_index = b;
    t.context_length = req.context_length;
    t.seq_len = static_cast<std::uint32_t>(req.prompt.size());
    t.hidden_dim = cfg.hidden_dim;
    t.provenance = {req.trajectory_id, req.channel, cfg.model_id};
    t.data.resize(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) t.data[i] = static_cast<float>(r[i]);
    for (const auto& e : edits_) {
      if (e.edit.block != b) continue;
      for (std::size_t p = 0; p < t.seq_len; ++p) {
        auto row = t.row(p);
        const auto edited = intervention::ablate_residual(row, e.sae, e.edit.units, e.edit.mode);
        std::copy(edited.begin(), edited.end(), row.begin());
      }
    }
    const auto path = fs::path(req.output_dir) / ("block" + std::to_string(b)) /
                      (req.basename + ".picl");
    write_tensor(t, path,
                 {{"capture_point", "block_output"},
                  {"seed", req.seed},
                  {"prompt_hash", hex64(fnv1a64(req.prompt))},
                  {"active_edits", edits_.size()}});
    out.files.push_back({b, path.string()});
  }
  return out.to_json();
}

json MockSession::on_intervene(const json& request) {
  protocol::InterventionEdit edit;
  try {
    edit = protocol::InterventionEdit::from_json(request);
  } catch (const Error& e) {
    reject("malformed_message", e.what());
  }
  const auto& cfg = model_->config();
  if (edit.block >= cfg.n_blocks)
    reject("out_of_range_block", "block " + std::to_string(edit.block) + " outside the model");
  sae::SaeParams params;
  try {
    params = sae::read_checkpoint(edit.sae_path);
  } catch (const Error& e) {
    reject("invalid_payload", std::string("cannot load SAE: ") + e.what());
  }
  if (params.input_dim != cfg.hidden_dim)
    reject("invalid_payload", "SAE input dimension does not match the model");
  for (auto u : edit.units)
    if (u >= params.code_dim)
      reject("invalid_payload", "unit " + std::to_string(u) + " outside the SAE code");
  edits_.push_back({std::move(edit), std::move(params)});
  return {{"type", "intervene"}, {"ok", true}, {"active_edits", edits_.size()}};
}

}  // namespace picl::mock
