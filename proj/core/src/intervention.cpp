#include "picl/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"

namespace picl::intervention {

std::size_t InterventionSpec::total_units() const noexcept {
  std::size_t n = 0;
  for (const auto& [block, list] : units) n += list.size();
  return n;
}

nlohmann::json InterventionSpec::to_json() const {
  nlohmann::json u = nlohmann::json::object();
  for (const auto& [block, list] : units) u[std::to_string(block)] = list;
  return {{"context_length", context_length},
          {"blocks", blocks},
          {"units", u},
          {"mode", std::string(protocol::to_string(mode))},
          {"seed", seed},
          {"fewer_blocks", fewer_blocks}};
}

InterventionSpec InterventionSpec::from_json(const nlohmann::json& j) {
  InterventionSpec s;
  s.context_length = j.at("context_length").get<std::uint32_t>();
  s.blocks = j.at("blocks").get<std::vector<std::uint32_t>>();
  for (const auto& [key, list] : j.at("units").items())
    s.units[static_cast<std::uint32_t>(std::stoul(key))] = list.get<std::vector<std::uint32_t>>();
  s.mode = protocol::ablation_mode_from_string(j.at("mode").get<std::string>());
  s.seed = j.value("seed", std::uint64_t{0});
  s.fewer_blocks = j.value("fewer_blocks", false);
  for (auto b : s.blocks)
    require(s.units.count(b) == 1, ErrorCode::InvalidInput,
            "intervention spec lacks units for block " + std::to_string(b));
  return s;
}

InterventionSpec select_targets(const correlation::CorrelationMatrix& matrix,
                                const std::map<std::uint32_t, std::size_t>& code_dims,
                                const SelectionOptions& options) {
  require(options.n_blocks >= 1, ErrorCode::InvalidInput, "need at least one target block");
  struct Candidate {
    std::size_t pos;
    double mean;
  };
  std::vector<Candidate> candidates;
  for (std::size_t pos = 0; pos < matrix.n_blocks(); ++pos) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t u = 0; u < matrix.n_units(pos); ++u) {
      if (auto r = matrix.at(pos, u, options.quantity)) {
        sum += options.by_abs ? std::fabs(*r) : *r;
        ++n;
      }
    }
    if (n > 0) candidates.push_back({pos, sum / static_cast<double>(n)});
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](const auto& a, const auto& b) {
    if (a.mean != b.mean) return a.mean > b.mean;
    return matrix.blocks()[a.pos] < matrix.blocks()[b.pos];
  });

  InterventionSpec spec;
  spec.context_length = matrix.context_length();
  spec.fewer_blocks = candidates.size() < options.n_blocks;
  const std::size_t take = std::min(options.n_blocks, candidates.size());
  for (std::size_t c = 0; c < take; ++c) {
    const std::size_t pos = candidates[c].pos;
    const std::uint32_t block = matrix.blocks()[pos];
    std::vector<std::pair<double, std::uint32_t>> ranked;
    for (std::size_t u = 0; u < matrix.n_units(pos); ++u)
      if (auto r = matrix.at(pos, u, options.quantity))
        ranked.emplace_back(options.by_abs ? std::fabs(*r) : *r, static_cast<std::uint32_t>(u));
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const std::size_t k = correlation::selection_count(options.unit_fraction, matrix.n_units(pos));
    std::vector<std::uint32_t> chosen;
    for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) chosen.push_back(ranked[i].second);
    if (!code_dims.empty()) {
      auto it = code_dims.find(block);
      require(it != code_dims.end(), ErrorCode::MissingAlignment,
              "no SAE available for block " + std::to_string(block));
      for (auto u : chosen)
        require(u < it->second, ErrorCode::OutOfRange,
                "unit " + std::to_string(u) + " outside the SAE code of block " +
                    std::to_string(block));
    }
    spec.blocks.push_back(block);
    spec.units[block] = std::move(chosen);
  }
  return spec;
}

InterventionSpec random_control(const InterventionSpec& planted,
                                const std::map<std::uint32_t, std::size_t>& code_dims,
                                std::uint64_t seed) {
  InterventionSpec control = planted;
  control.seed = seed;
  for (const auto block : planted.blocks) {
    auto it = code_dims.find(block);
    require(it != code_dims.end(), ErrorCode::MissingAlignment,
            "no SAE available for block " + std::to_string(block));
    const auto& chosen = planted.units.at(block);
    const std::set<std::uint32_t> excluded(chosen.begin(), chosen.end());
    std::vector<std::uint32_t> pool;
    for (std::uint32_t u = 0; u < it->second; ++u)
      if (!excluded.count(u)) pool.push_back(u);
    require(pool.size() >= chosen.size(), ErrorCode::InvalidInput,
            "block " + std::to_string(block) + " has too few units for a control draw");
    Rng rng(combine_seed(seed, block));
    rng.shuffle(pool.begin(), pool.end());
    pool.resize(chosen.size());
    std::sort(pool.begin(), pool.end());
    control.units[block] = std::move(pool);
  }
  return control;
}

std::vector<float> ablate_residual(std::span<const float> x, const sae::SaeParams& p,
                                   std::span<const std::uint32_t> units, AblationMode mode) {
  require(x.size() == p.input_dim, ErrorCode::InvalidInput,
          "residual has dimension " + std::to_string(x.size()) + ", SAE expects " +
              std::to_string(p.input_dim));
  for (auto u : units)
    require(u < p.code_dim, ErrorCode::OutOfRange, "unit " + std::to_string(u) + " out of range");
  if (mode == AblationMode::DeltaPatch && units.empty()) return {x.begin(), x.end()};

  std::vector<float> code = sae::encode(p, x);
  if (mode == AblationMode::DeltaPatch) {
    std::vector<float> out(x.begin(), x.end());
    for (auto u : units) {
      const float c = code[u];
      if (c == 0.0f) continue;
      for (std::size_t k = 0; k < p.input_dim; ++k) out[k] -= c * p.decoder_weight(k, u);
    }
    return out;
  }
  for (auto u : units) code[u] = 0.0f;
  return sae::decode(p, std::span<const float>(code));
}

nlohmann::json InterventionResult::to_json() const {
  return {{"window", window},
          {"context_length", context_length},
          {"baseline_error", baseline_error},
          {"intervened_error", intervened_error},
          {"epsilon", epsilon},
          {"baseline_per_step", baseline_per_step},
          {"intervened_per_step", intervened_per_step},
          {"trajectory_ids", trajectory_ids},
          {"per_trajectory_epsilon", per_trajectory_epsilon},
          {"skipped_zero_baseline", skipped_zero_baseline},
          {"invalid_samples", invalid_samples},
          {"missing_steps", missing_steps}};
}

InterventionResult InterventionResult::from_json(const nlohmann::json& j) {
  InterventionResult r;
  r.window = j.at("window").get<std::size_t>();
  r.context_length = j.at("context_length").get<std::uint32_t>();
  r.baseline_error = j.at("baseline_error").get<double>();
  r.intervened_error = j.at("intervened_error").get<double>();
  const auto& eps = j.at("epsilon");
  r.epsilon = eps.is_null() ? std::numeric_limits<double>::quiet_NaN() : eps.get<double>();
  r.baseline_per_step = j.at("baseline_per_step").get<std::vector<double>>();
  r.intervened_per_step = j.at("intervened_per_step").get<std::vector<double>>();
  r.trajectory_ids = j.at("trajectory_ids").get<std::vector<std::string>>();
  for (const auto& e : j.at("per_trajectory_epsilon"))
    r.per_trajectory_epsilon.push_back(e.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                   : e.get<double>());
  r.skipped_zero_baseline = j.at("skipped_zero_baseline").get<std::size_t>();
  r.invalid_samples = j.at("invalid_samples").get<std::size_t>();
  r.missing_steps = j.at("missing_steps").get<std::size_t>();
  return r;
}

namespace {

std::vector<forecast::StateForecast> forecast_all(protocol::AdapterSession& session,
                                                  std::span<const forecast::TrajectoryRef> trajs,
                                                  const forecast::ForecastRequest& req) {
  std::vector<forecast::StateForecast> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) out.push_back(forecast::forecast_state(session, t, req));
  return out;
}

}  // namespace

InterventionResult run_intervention(protocol::AdapterSession& session, const InterventionSpec& spec,
                                    const std::map<std::uint32_t, std::string>& sae_paths,
                                    std::span<const forecast::TrajectoryRef> trajectories,
                                    const RunOptions& options) {
  require(!trajectories.empty(), ErrorCode::InvalidInput, "no trajectories to intervene on");
  require(options.window >= 1, ErrorCode::InvalidInput, "window must be positive");
  forecast::ForecastRequest req;
  req.history_start = forecast::history_start(spec.context_length, options.max_context);
  req.history_length = spec.context_length;
  req.horizon = options.window;
  req.n_samples = options.n_samples;
  req.seed = options.seed;
  req.tokenizer = options.tokenizer;
  req.oracle_hints = options.oracle_hints;

  session.clear();
  const auto clean = forecast_all(session, trajectories, req);
  for (const auto block : spec.blocks) {
    auto path = sae_paths.find(block);
    require(path != sae_paths.end(), ErrorCode::MissingAlignment,
            "no SAE checkpoint for block " + std::to_string(block));
    protocol::InterventionEdit edit;
    edit.block = block;
    edit.sae_path = path->second;
    edit.units = spec.units.at(block);
    edit.mode = spec.mode;
    session.intervene(edit);
  }
  std::vector<forecast::StateForecast> ablated;
  try {
    ablated = forecast_all(session, trajectories, req);
  } catch (...) {
    session.clear();
    throw;
  }
  session.clear();

  InterventionResult result;
  result.window = options.window;
  result.context_length = spec.context_length;
  result.baseline_per_step.assign(options.window, 0.0);
  result.intervened_per_step.assign(options.window, 0.0);
  const double n = static_cast<double>(trajectories.size());
  for (std::size_t t = 0; t < trajectories.size(); ++t) {
    const double base = clean[t].mean_error();
    const double inter = ablated[t].mean_error();
    result.baseline_error += base / n;
    result.intervened_error += inter / n;
    for (std::size_t i = 0; i < options.window; ++i) {
      result.baseline_per_step[i] += clean[t].errors[i] / n;
      result.intervened_per_step[i] += ablated[t].errors[i] / n;
    }
    result.invalid_samples += clean[t].invalid_samples + ablated[t].invalid_samples;
    result.missing_steps += clean[t].missing_steps + ablated[t].missing_steps;
    result.trajectory_ids.push_back(trajectories[t].id);
    if (base == 0.0) {
      result.per_trajectory_epsilon.push_back(std::numeric_limits<double>::quiet_NaN());
      ++result.skipped_zero_baseline;
    } else {
      result.per_trajectory_epsilon.push_back((inter - base) / base);
    }
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (double e : result.per_trajectory_epsilon) {
    if (std::isnan(e)) continue;
    sum += e;
    ++count;
  }
  result.epsilon = count > 0 ? sum / static_cast<double>(count)
                             : std::numeric_limits<double>::quiet_NaN();
  return result;
}

void write_result_table(const InterventionResult& result, const std::filesystem::path& path) {
  CsvTable table({"step", "baseline_error", "intervened_error"});
  for (std::size_t i = 0; i < result.window; ++i)
    table.row().cell(i).cell(result.baseline_per_step[i]).cell(result.intervened_per_step[i]);
  table.write(path);
  write_sidecar(path, result.to_json());
}

}  // namespace picl::intervention
