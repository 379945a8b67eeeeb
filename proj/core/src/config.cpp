#include "picl/config.hpp"

#include <algorithm>
#include <set>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"

namespace picl {

using nlohmann::json;

namespace {

template <typename T>
T get(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, "bad value for '" + key + "': " + e.what());
  }
}

void check_object(const json& j, const std::string& where) {
  require(j.is_object(), ErrorCode::Config, where + " must be an object");
}

[[noreturn]] void unknown_key(const std::string& where, const std::string& key) {
  throw Error(ErrorCode::Config, "unknown key '" + key + "' in " + where);
}

sae::TrainConfig sae_from_json(const json& j) {
  check_object(j, "sae");
  sae::TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "learning_rate") c.learning_rate = get<double>(v, key);
    else if (key == "sparsity_weight") c.sparsity_weight = get<double>(v, key);
    else if (key == "epochs") c.epochs = get<int>(v, key);
    else if (key == "batch_size") c.batch_size = get<std::size_t>(v, key);
    else if (key == "seed") c.seed = get<std::uint64_t>(v, key);
    else if (key == "adam_beta1") c.adam_beta1 = get<double>(v, key);
    else if (key == "adam_beta2") c.adam_beta2 = get<double>(v, key);
    else if (key == "adam_epsilon") c.adam_epsilon = get<double>(v, key);
    else if (key == "expansion") c.expansion = get<std::size_t>(v, key);
    else unknown_key("sae", key);
  }
  return c;
}

json sae_to_json(const sae::TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"sparsity_weight", c.sparsity_weight},
          {"epochs", c.epochs},               {"batch_size", c.batch_size},
          {"seed", c.seed},                   {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},       {"adam_epsilon", c.adam_epsilon},
          {"expansion", c.expansion}};
}

AnalysisConfig analysis_from_json(const json& j) {
  check_object(j, "analysis");
  AnalysisConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "top_k") c.top_k = get<std::size_t>(v, key);
    else if (key == "sync_fraction") c.sync_fraction = get<double>(v, key);
    else if (key == "sync_select_by_abs") c.sync_select_by_abs = get<bool>(v, key);
    else if (key == "dataset_seed") c.dataset_seed = get<std::uint64_t>(v, key);
    else unknown_key("analysis", key);
  }
  return c;
}

InterventionConfig intervention_from_json(const json& j) {
  check_object(j, "intervention");
  InterventionConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "context_lengths") c.context_lengths = get<std::vector<std::uint32_t>>(v, key);
    else if (key == "window") c.window = get<std::size_t>(v, key);
    else if (key == "n_blocks") c.n_blocks = get<std::size_t>(v, key);
    else if (key == "unit_fraction") c.unit_fraction = get<double>(v, key);
    else if (key == "select_by_abs") c.select_by_abs = get<bool>(v, key);
    else if (key == "mode") c.mode = protocol::ablation_mode_from_string(get<std::string>(v, key));
    else if (key == "control_trials") c.control_trials = get<std::size_t>(v, key);
    else if (key == "seed") c.seed = get<std::uint64_t>(v, key);
    else unknown_key("intervention", key);
  }
  return c;
}

std::string adapter_from_json(const json& j) {
  check_object(j, "adapter");
  std::string address = "inproc";
  for (const auto& [key, v] : j.items()) {
    if (key == "address") address = get<std::string>(v, key);
    else unknown_key("adapter", key);
  }
  return address;
}

}  // namespace

std::vector<std::uint32_t> ExperimentConfig::default_blocks() {
  std::vector<std::uint32_t> b;
  for (std::uint32_t j = 0; j <= 60; j += 4) b.push_back(j);
  b.push_back(63);
  return b;
}

std::uint32_t ExperimentConfig::max_context() const {
  std::uint32_t m = 0;
  for (auto L : context_lengths) m = std::max(m, L);
  for (auto L : intervention.context_lengths) m = std::max(m, L);
  return m;
}

std::size_t ExperimentConfig::trajectory_states() const {
  return max_context() + std::max(horizon, intervention.window);
}

void ExperimentConfig::validate() const {
  require(!output_dir.empty(), ErrorCode::Config, "output_dir is required");
  require(!systems.empty(), ErrorCode::Config, "at least one system is required");
  require(std::set(systems.begin(), systems.end()).size() == systems.size(), ErrorCode::Config,
          "systems listed twice");
  require(n_trajectories >= 1, ErrorCode::Config, "n_trajectories must be positive");
  require(dt > 0.0, ErrorCode::Config, "dt must be positive");
  sampling_ranges.validate();
  require(!context_lengths.empty(), ErrorCode::Config, "context_lengths must not be empty");
  for (auto L : context_lengths) require(L >= 2, ErrorCode::Config, "context lengths must be >= 2");
  require(std::set(context_lengths.begin(), context_lengths.end()).size() == context_lengths.size(),
          ErrorCode::Config, "context length listed twice");
  require(horizon >= 1 && n_samples >= 1, ErrorCode::Config, "horizon and n_samples must be positive");
  tokenizer.validate();
  require(!blocks.empty(), ErrorCode::Config, "blocks must not be empty");
  require(std::set(blocks.begin(), blocks.end()).size() == blocks.size(), ErrorCode::Config,
          "block listed twice");
  sae.validate();
  require(analysis.top_k >= 1, ErrorCode::Config, "analysis.top_k must be positive");
  require(analysis.sync_fraction > 0.0 && analysis.sync_fraction <= 1.0, ErrorCode::Config,
          "analysis.sync_fraction must be in (0, 1]");
  for (auto L : intervention.context_lengths)
    require(std::find(context_lengths.begin(), context_lengths.end(), L) != context_lengths.end(),
            ErrorCode::Config,
            "intervention context length " + std::to_string(L) + " has no trained SAEs");
  require(intervention.window >= 1, ErrorCode::Config, "intervention.window must be positive");
  require(intervention.n_blocks >= 1, ErrorCode::Config, "intervention.n_blocks must be positive");
  require(intervention.unit_fraction > 0.0 && intervention.unit_fraction <= 1.0, ErrorCode::Config,
          "intervention.unit_fraction must be in (0, 1]");
  require(!adapter_address.empty(), ErrorCode::Config, "adapter.address is required");
  mock.validate();
  if (adapter_address == "inproc") {
    for (auto b : blocks)
      require(b < mock.n_blocks, ErrorCode::Config,
              "block " + std::to_string(b) + " outside the mock model");
  }
}

json ExperimentConfig::to_json() const {
  json systems_json = json::array();
  for (auto s : systems) systems_json.push_back(std::string(physics::to_string(s)));
  return {{"output_dir", output_dir.string()},
          {"systems", systems_json},
          {"n_trajectories", n_trajectories},
          {"seed", seed},
          {"dt", dt},
          {"sampling_ranges", sampling_ranges.to_json()},
          {"context_lengths", context_lengths},
          {"horizon", horizon},
          {"n_samples", n_samples},
          {"tokenizer", tokenizer.to_json()},
          {"blocks", blocks},
          {"sae", sae_to_json(sae)},
          {"analysis",
           {{"top_k", analysis.top_k},
            {"sync_fraction", analysis.sync_fraction},
            {"sync_select_by_abs", analysis.sync_select_by_abs},
            {"dataset_seed", analysis.dataset_seed}}},
          {"intervention",
           {{"context_lengths", intervention.context_lengths},
            {"window", intervention.window},
            {"n_blocks", intervention.n_blocks},
            {"unit_fraction", intervention.unit_fraction},
            {"select_by_abs", intervention.select_by_abs},
            {"mode", std::string(protocol::to_string(intervention.mode))},
            {"control_trials", intervention.control_trials},
            {"seed", intervention.seed}}},
          {"adapter", {{"address", adapter_address}}},
          {"mock", mock.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_object(j, "config");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "output_dir") {
      c.output_dir = get<std::string>(v, key);
    } else if (key == "systems") {
      c.systems.clear();
      for (const auto& s : v) {
        try {
          c.systems.push_back(physics::system_kind_from_string(get<std::string>(s, key)));
        } catch (const Error& e) {
          throw Error(ErrorCode::Config, e.what());
        }
      }
    } else if (key == "n_trajectories") {
      c.n_trajectories = get<std::size_t>(v, key);
    } else if (key == "seed") {
      c.seed = get<std::uint64_t>(v, key);
    } else if (key == "dt") {
      c.dt = get<double>(v, key);
    } else if (key == "sampling_ranges") {
      c.sampling_ranges = physics::SamplingRanges::from_json(v);
    } else if (key == "context_lengths") {
      c.context_lengths = get<std::vector<std::uint32_t>>(v, key);
    } else if (key == "horizon") {
      c.horizon = get<std::size_t>(v, key);
    } else if (key == "n_samples") {
      c.n_samples = get<std::size_t>(v, key);
    } else if (key == "tokenizer") {
      c.tokenizer = forecast::TokenizerSettings::from_json(v);
    } else if (key == "blocks") {
      c.blocks = get<std::vector<std::uint32_t>>(v, key);
    } else if (key == "sae") {
      c.sae = sae_from_json(v);
    } else if (key == "analysis") {
      c.analysis = analysis_from_json(v);
    } else if (key == "intervention") {
      c.intervention = intervention_from_json(v);
    } else if (key == "adapter") {
      c.adapter_address = adapter_from_json(v);
    } else if (key == "mock") {
      c.mock = mock::MockConfig::from_json(v);
    } else {
      unknown_key("config", key);
    }
  }
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Config) throw;
    throw Error(ErrorCode::Config, e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false, true);
  require(!j.is_discarded(), ErrorCode::Config, "config " + path.string() + " is not valid JSON");
  ExperimentConfig c = from_json(j);
  if (c.output_dir.is_relative())
    c.output_dir = std::filesystem::absolute(path).parent_path() / c.output_dir;
  c.output_dir = c.output_dir.lexically_normal();
  return c;
}

std::string ExperimentConfig::hash() const {
  // Where results land does not change what they are.
  json j = to_json();
  j.erase("output_dir");
  return hex64(fnv1a64(j.dump()));
}

void apply_seed_override(ExperimentConfig& config, std::uint64_t seed) {
  config.seed = combine_seed(seed, 1);
  config.sae.seed = combine_seed(seed, 2);
  config.analysis.dataset_seed = combine_seed(seed, 3);
  config.intervention.seed = combine_seed(seed, 4);
  config.mock.seed = combine_seed(seed, 5);
}

}  // namespace picl
