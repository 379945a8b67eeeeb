#include "picl/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/random.hpp"
#include "picl/tokenizer.hpp"

namespace picl::forecast {

double bounded_relative_error(std::span<const double> pred, std::span<const double> truth,
                              bool* both_zero) {
  require(pred.size() == truth.size(), ErrorCode::InvalidInput,
          "prediction and truth differ in dimension");
  double diff = 0.0, np = 0.0, nt = 0.0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double d = pred[k] - truth[k];
    diff += d * d;
    np += pred[k] * pred[k];
    nt += truth[k] * truth[k];
  }
  if (both_zero) *both_zero = false;
  if (np == 0.0 && nt == 0.0) {
    if (both_zero) *both_zero = true;
    return 0.0;
  }
  const double err = std::sqrt(diff) / (std::sqrt(np) + std::sqrt(nt));
  // Rounding can push the ratio a hair past 1 for antiparallel vectors.
  return std::clamp(err, 0.0, 1.0);
}

double median(std::vector<double> values) {
  require(!values.empty(), ErrorCode::InvalidInput, "median of an empty set");
  const std::size_t n = values.size();
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), mid);
  return lower + (upper - lower) / 2.0;
}

std::optional<double> median_aggregate(std::span<const std::optional<double>> samples) {
  std::vector<double> valid;
  for (const auto& s : samples)
    if (s && std::isfinite(*s)) valid.push_back(*s);
  if (valid.empty()) return std::nullopt;
  return median(std::move(valid));
}

void TokenizerSettings::validate() const {
  require(alpha > 0.0 && alpha <= 1.0, ErrorCode::Config, "tokenizer alpha must be in (0, 1]");
  require(beta >= 0.0, ErrorCode::Config, "tokenizer beta must be >= 0");
  require(precision >= 1 && precision <= 9, ErrorCode::Config,
          "tokenizer precision must be in [1, 9]");
}

nlohmann::json TokenizerSettings::to_json() const {
  return {{"alpha", alpha}, {"beta", beta}, {"precision", precision}};
}

TokenizerSettings TokenizerSettings::from_json(const nlohmann::json& j) {
  TokenizerSettings t;
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") {
      t.alpha = value.get<double>();
    } else if (key == "beta") {
      t.beta = value.get<double>();
    } else if (key == "precision") {
      t.precision = value.get<int>();
    } else {
      throw Error(ErrorCode::Config, "unknown tokenizer key '" + key + "'");
    }
  }
  t.validate();
  return t;
}

TrajectoryRef load_trajectory_ref(const std::filesystem::path& path) {
  TrajectoryRef ref;
  ref.path = std::filesystem::absolute(path);
  ref.trajectory = physics::read_trajectory(path);
  const auto meta = read_sidecar(path);
  ref.id = meta.value("trajectory_id", path.stem().string());
  return ref;
}

std::uint64_t channel_seed(std::uint64_t seed, std::string_view trajectory_id,
                           std::string_view channel) {
  std::string key(trajectory_id);
  key += '/';
  key += channel;
  return combine_seed(seed, fnv1a64(key));
}

double StateForecast::mean_error() const {
  require(!errors.empty(), ErrorCode::InvalidInput, "empty forecast");
  double s = 0.0;
  for (double e : errors) s += e;
  return s / static_cast<double>(errors.size());
}

StateForecast forecast_state(protocol::AdapterSession& session, const TrajectoryRef& ref,
                             const ForecastRequest& request) {
  const auto& traj = ref.trajectory;
  require(request.history_length >= 2, ErrorCode::InvalidInput, "history needs at least 2 steps");
  require(request.horizon >= 1 && request.n_samples >= 1, ErrorCode::InvalidInput,
          "horizon and sample count must be positive");
  const std::size_t window_start = request.history_start + request.history_length;
  require(window_start + request.horizon <= traj.size(), ErrorCode::OutOfRange,
          "trajectory " + ref.id + " is too short for the requested window");

  const auto names = physics::channel_names(traj.spec);
  const std::size_t n_channels = names.size();
  StateForecast out;
  out.predicted.assign(request.horizon,
                       std::vector<double>(n_channels, std::numeric_limits<double>::quiet_NaN()));

  for (std::size_t c = 0; c < n_channels; ++c) {
    const auto history =
        physics::channel_series(traj, c, request.history_start, request.history_length);
    const auto scaling =
        tokenizer::fit_scaling(history, request.tokenizer.alpha, request.tokenizer.beta);
    const auto digits = tokenizer::serialize(history, scaling, request.tokenizer.precision);

    protocol::GenerateRequest gen;
    gen.prompt = tokenizer::prompt_text(digits);
    gen.n_steps = request.horizon;
    gen.n_samples = request.n_samples;
    gen.seed = channel_seed(request.seed, ref.id, names[c]);
    if (request.oracle_hints) {
      gen.oracle = protocol::OracleHint{ref.path.string(), names[c], request.history_start,
                                        scaling.a,         scaling.b, request.tokenizer.precision};
    }
    const auto reply = session.generate(gen);
    require(reply.samples.size() == request.n_samples, ErrorCode::Protocol,
            "adapter returned " + std::to_string(reply.samples.size()) + " samples, expected " +
                std::to_string(request.n_samples));

    std::vector<std::vector<std::optional<double>>> per_step(request.horizon);
    for (const auto& text : reply.samples) {
      const auto cont = tokenizer::parse_continuation(text, request.horizon);
      out.invalid_samples += cont.invalid;
      out.total_samples += request.horizon;
      for (std::size_t i = 0; i < request.horizon; ++i) {
        if (cont.steps[i]) {
          per_step[i].push_back(
              tokenizer::dequantize(*cont.steps[i], scaling, request.tokenizer.precision));
        } else {
          per_step[i].push_back(std::nullopt);
        }
      }
    }
    for (std::size_t i = 0; i < request.horizon; ++i) {
      if (auto m = median_aggregate(per_step[i])) out.predicted[i][c] = *m;
    }
  }

  out.errors.resize(request.horizon);
  for (std::size_t i = 0; i < request.horizon; ++i) {
    const auto& pred = out.predicted[i];
    const bool missing =
        std::any_of(pred.begin(), pred.end(), [](double v) { return std::isnan(v); });
    if (missing) {
      out.errors[i] = 1.0;
      ++out.missing_steps;
      continue;
    }
    const auto truth = traj.states[window_start + i].flatten();
    bool both_zero = false;
    out.errors[i] = bounded_relative_error(pred, truth, &both_zero);
    if (both_zero) ++out.both_zero_steps;
  }
  return out;
}

void summarize(ErrorReport& report) {
  const std::size_t n = report.per_trajectory.size();
  report.mean.assign(report.horizon, std::numeric_limits<double>::quiet_NaN());
  report.std_error.assign(report.horizon, std::numeric_limits<double>::quiet_NaN());
  if (n == 0) return;
  for (std::size_t i = 0; i < report.horizon; ++i) {
    double s = 0.0;
    for (const auto& row : report.per_trajectory) s += row.at(i);
    const double mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (const auto& row : report.per_trajectory) ss += (row[i] - mean) * (row[i] - mean);
    report.mean[i] = mean;
    report.std_error[i] =
        n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n)) : 0.0;
  }
}

nlohmann::json ErrorReport::to_json() const {
  auto nan_safe = [](const std::vector<double>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return a;
  };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : per_trajectory) rows.push_back(r);
  return {{"system", system},
          {"context_length", context_length},
          {"horizon", horizon},
          {"mean", nan_safe(mean)},
          {"std_error", nan_safe(std_error)},
          {"trajectory_ids", trajectory_ids},
          {"per_trajectory", rows},
          {"n_requested", n_requested},
          {"failures", failures},
          {"missing_steps", missing_steps},
          {"invalid_samples", invalid_samples},
          {"total_samples", total_samples}};
}

ErrorReport ErrorReport::from_json(const nlohmann::json& j) {
  ErrorReport r;
  r.system = j.at("system").get<std::string>();
  r.context_length = j.at("context_length").get<std::uint32_t>();
  r.horizon = j.at("horizon").get<std::size_t>();
  r.trajectory_ids = j.at("trajectory_ids").get<std::vector<std::string>>();
  r.per_trajectory = j.at("per_trajectory").get<std::vector<std::vector<double>>>();
  r.n_requested = j.at("n_requested").get<std::size_t>();
  r.failures = j.at("failures").get<std::vector<std::string>>();
  r.missing_steps = j.at("missing_steps").get<std::size_t>();
  r.invalid_samples = j.at("invalid_samples").get<std::size_t>();
  r.total_samples = j.at("total_samples").get<std::size_t>();
  summarize(r);
  return r;
}

std::uint32_t SweepOptions::max_context() const {
  require(!context_lengths.empty(), ErrorCode::Config, "no context lengths");
  return *std::max_element(context_lengths.begin(), context_lengths.end());
}

std::size_t history_start(std::uint32_t context_length, std::uint32_t max_context) {
  require(context_length <= max_context, ErrorCode::InvalidInput,
          "context length exceeds the sweep maximum");
  return max_context - context_length;
}

std::vector<ErrorReport> sweep(protocol::AdapterSession& session,
                               const std::map<std::string, std::vector<TrajectoryRef>>& systems,
                               const SweepOptions& options) {
  options.tokenizer.validate();
  const std::uint32_t max_l = options.max_context();
  std::vector<ErrorReport> reports;
  for (const auto& [system, refs] : systems) {
    for (const std::uint32_t L : options.context_lengths) {
      ErrorReport report;
      report.system = system;
      report.context_length = L;
      report.horizon = options.horizon;
      report.n_requested = refs.size();
      ForecastRequest req;
      req.history_start = history_start(L, max_l);
      req.history_length = L;
      req.horizon = options.horizon;
      req.n_samples = options.n_samples;
      req.seed = options.seed;
      req.tokenizer = options.tokenizer;
      req.oracle_hints = options.oracle_hints;
      for (const auto& ref : refs) {
        try {
          const auto f = forecast_state(session, ref, req);
          report.trajectory_ids.push_back(ref.id);
          report.per_trajectory.push_back(f.errors);
          report.missing_steps += f.missing_steps;
          report.invalid_samples += f.invalid_samples;
          report.total_samples += f.total_samples;
        } catch (const Error& e) {
          report.failures.push_back(ref.id + ": " + e.what());
        }
      }
      summarize(report);
      reports.push_back(std::move(report));
    }
  }
  return reports;
}

void write_error_tables(std::span<const ErrorReport> reports, const std::filesystem::path& dir) {
  CsvTable first({"system", "context_length", "mean", "std_error", "n", "incomplete"});
  CsvTable steps({"system", "context_length", "step", "mean", "std_error", "n"});
  for (const auto& r : reports) {
    first.row()
        .cell(r.system)
        .cell(static_cast<long long>(r.context_length))
        .cell(r.mean.empty() ? std::numeric_limits<double>::quiet_NaN() : r.mean[0])
        .cell(r.std_error.empty() ? std::numeric_limits<double>::quiet_NaN() : r.std_error[0])
        .cell(r.n_completed())
        .cell(r.incomplete() ? 1 : 0);
    for (std::size_t i = 0; i < r.horizon; ++i) {
      steps.row()
          .cell(r.system)
          .cell(static_cast<long long>(r.context_length))
          .cell(i)
          .cell(r.mean[i])
          .cell(r.std_error[i])
          .cell(r.n_completed());
    }
  }
  first.write(dir / "first_step_error.csv");
  steps.write(dir / "per_step_error.csv");
}

}  // namespace picl::forecast
