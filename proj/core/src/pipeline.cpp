#include "picl/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <map>
#include <set>
#include <sstream>

#include "picl/error.hpp"
#include "picl/io.hpp"
#include "picl/mock_model.hpp"
#include "stages.hpp"

namespace picl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct StageInfo {
  Stage stage;
  std::string_view name;
  std::string_view output_dir;  // directory owned by the stage
  std::string_view summary;
};

constexpr std::array<StageInfo, 9> kStageInfo{{
    {Stage::Simulate, "simulate", "trajectories", "integrate sampled systems"},
    {Stage::Tokenize, "tokenize", "prompts", "scale and serialize each channel history"},
    {Stage::Capture, "capture", "activations", "capture residual streams through the adapter"},
    {Stage::TrainSae, "train-sae", "sae", "train one SAE per system, context length and block"},
    {Stage::Correlate, "correlate", "correlations", "correlate SAE codes with physical quantities"},
    {Stage::Sync, "sync", "sync", "synchronization strength over the top pairs"},
    {Stage::Intervene, "intervene", "intervention", "ablate top units and measure the error change"},
    {Stage::Evaluate, "evaluate", "evaluation", "forecast error sweep over context lengths"},
    {Stage::Report, "report", "report", "figure-shaped summary tables"},
}};

const StageInfo& info(Stage s) { return kStageInfo[static_cast<std::size_t>(s)]; }

std::string lstr(std::uint32_t L) { return "L" + std::to_string(L); }

std::vector<Stage> dependents_closure(Stage root) {
  std::vector<Stage> out;
  std::set<Stage> seen{root};
  bool grew = true;
  while (grew) {
    grew = false;
    for (auto s : kAllStages) {
      if (seen.count(s)) continue;
      for (auto d : dependencies(s)) {
        if (seen.count(d)) {
          seen.insert(s);
          out.push_back(s);
          grew = true;
          break;
        }
      }
    }
  }
  return out;
}

bool marker_valid(const Layout& layout, Stage stage, const std::string& hash) {
  const auto path = layout.stage_marker(stage);
  if (!fs::exists(path)) return false;
  const json m = json::parse(read_text_file(path), nullptr, false);
  if (m.is_discarded() || m.value("config_hash", std::string()) != hash) return false;
  return fs::exists(layout.root / info(stage).output_dir);
}

}  // namespace

std::string_view to_string(Stage stage) noexcept { return info(stage).name; }

Stage stage_from_string(std::string_view name) {
  for (const auto& i : kStageInfo)
    if (i.name == name) return i.stage;
  throw Error(ErrorCode::Config, "unknown stage '" + std::string(name) + "'");
}

std::vector<Stage> dependencies(Stage stage) {
  switch (stage) {
    case Stage::Simulate: return {};
    case Stage::Tokenize: return {Stage::Simulate};
    case Stage::Capture: return {Stage::Tokenize};
    case Stage::TrainSae: return {Stage::Capture};
    case Stage::Correlate: return {Stage::TrainSae};
    case Stage::Sync: return {Stage::Correlate};
    case Stage::Intervene: return {Stage::Correlate};
    case Stage::Evaluate: return {Stage::Simulate};
    case Stage::Report: return {Stage::Sync, Stage::Intervene, Stage::Evaluate};
  }
  return {};
}

std::vector<Stage> parse_stage_selection(std::string_view text) {
  std::set<Stage> chosen;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    std::string_view word = text.substr(start, comma - start);
    while (!word.empty() && word.front() == ' ') word.remove_prefix(1);
    while (!word.empty() && word.back() == ' ') word.remove_suffix(1);
    if (word == "all") {
      chosen.insert(kAllStages.begin(), kAllStages.end());
    } else if (!word.empty()) {
      chosen.insert(stage_from_string(word));
    }
    start = comma + 1;
  }
  return {chosen.begin(), chosen.end()};
}

std::string_view to_string(StageStatus status) noexcept {
  switch (status) {
    case StageStatus::Ran: return "ran";
    case StageStatus::Skipped: return "skipped";
    case StageStatus::Failed: return "failed";
    case StageStatus::Blocked: return "blocked";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Layout

fs::path Layout::trajectory(std::string_view system, std::string_view id) const {
  return root / "trajectories" / system / (std::string(id) + ".csv");
}

fs::path Layout::prompt(std::string_view system, std::uint32_t L, std::string_view id,
                        std::string_view channel) const {
  return root / "prompts" / system / lstr(L) /
         (std::string(id) + "_" + std::string(channel) + ".txt");
}

fs::path Layout::activation_dir(std::string_view system, std::uint32_t L) const {
  return root / "activations" / system / lstr(L);
}

fs::path Layout::activation(std::string_view system, std::uint32_t L, std::uint32_t block,
                            std::string_view id, std::string_view channel) const {
  return activation_dir(system, L) / ("block" + std::to_string(block)) /
         (std::string(id) + "_" + std::string(channel) + ".picl");
}

fs::path Layout::token_alignment(std::string_view system, std::uint32_t L, std::string_view id,
                                 std::string_view channel) const {
  return activation_dir(system, L) / "tokens" /
         (std::string(id) + "_" + std::string(channel) + ".tokens");
}

fs::path Layout::sae(std::string_view system, std::uint32_t L, std::uint32_t block) const {
  return sae_dir(system, L) / ("block" + std::to_string(block) + ".psae");
}

fs::path Layout::sae_dir(std::string_view system, std::uint32_t L) const {
  return root / "sae" / system / lstr(L);
}

fs::path Layout::correlations(std::string_view system, std::uint32_t L) const {
  return root / "correlations" / system / (lstr(L) + ".csv");
}

fs::path Layout::sync(std::string_view system, std::uint32_t L) const {
  return root / "sync" / system / (lstr(L) + ".csv");
}

fs::path Layout::intervention_dir(std::string_view system, std::uint32_t L) const {
  return root / "intervention" / system / lstr(L);
}

fs::path Layout::stage_marker(Stage stage) const {
  return root / ".picl" / "stages" / (std::string(to_string(stage)) + ".json");
}

std::string trajectory_id(physics::SystemKind kind, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", index);
  return std::string(physics::to_string(kind)) + "_" + buf;
}

// ---------------------------------------------------------------------------
// Prompts

PromptFile make_prompt(const physics::Trajectory& traj, std::string_view trajectory_id,
                       std::size_t channel, std::size_t history_start, std::size_t history_length,
                       const forecast::TokenizerSettings& settings) {
  settings.validate();
  const auto names = physics::channel_names(traj.spec);
  require(channel < names.size(), ErrorCode::OutOfRange, "channel index out of range");
  PromptFile p;
  p.trajectory_id = trajectory_id;
  p.channel = names[channel];
  p.history_start = history_start;
  p.history_length = history_length;
  const auto series = physics::channel_series(traj, channel, history_start, history_length);
  p.scaling = tokenizer::fit_scaling(series, settings.alpha, settings.beta);
  p.digits = tokenizer::serialize(series, p.scaling, settings.precision);
  return p;
}

void write_prompt(const fs::path& path, const PromptFile& prompt, const json& extra_meta) {
  write_file_atomic(path, prompt.prompt());
  json spans = json::array();
  json separators = json::array();
  for (const auto& s : prompt.digits.alignment) {
    spans.push_back({s.char_begin, s.char_end});
    separators.push_back(s.separator ? json(*s.separator) : json(nullptr));
  }
  json meta = extra_meta.is_object() ? extra_meta : json::object();
  meta["trajectory_id"] = prompt.trajectory_id;
  meta["channel"] = prompt.channel;
  meta["history_start"] = prompt.history_start;
  meta["history_length"] = prompt.history_length;
  meta["precision"] = prompt.digits.precision;
  meta["scaling"] = prompt.scaling.to_json();
  meta["char_spans"] = spans;
  meta["separators"] = separators;
  // Under per-character tokenization token spans coincide with char spans.
  meta["tokenization"] = "per_character";
  meta["token_spans"] = spans;
  write_sidecar(path, meta);
}

PromptFile read_prompt(const fs::path& path) {
  const json meta = read_sidecar(path);
  std::string text = read_text_file(path);
  if (!text.empty() && text.back() == ',') text.pop_back();
  PromptFile p;
  p.trajectory_id = meta.at("trajectory_id").get<std::string>();
  p.channel = meta.at("channel").get<std::string>();
  p.history_start = meta.at("history_start").get<std::size_t>();
  p.history_length = meta.at("history_length").get<std::size_t>();
  p.scaling = tokenizer::ScalingParams::from_json(meta.at("scaling"));
  p.digits = tokenizer::DigitSeries::from_text(std::move(text), meta.at("precision").get<int>());
  require(p.digits.size() == p.history_length, ErrorCode::Parse,
          "prompt " + path.string() + " does not hold " + std::to_string(p.history_length) +
              " steps");
  return p;
}

// ---------------------------------------------------------------------------
// Sessions

SessionFactory make_session_factory(const ExperimentConfig& config) {
  if (config.adapter_address == "inproc") {
    auto model = mock::MockModel::create(config.mock);
    auto counter = std::make_shared<std::atomic<int>>(0);
    return [model, counter] {
      std::shared_ptr<protocol::LineHandler> handler = model->new_session();
      auto transport = std::make_unique<protocol::InProcessTransport>(
          [handler](std::string_view line) { return handler->handle_line(line); });
      auto session = std::make_unique<protocol::AdapterSession>(
          std::move(transport), "picl-" + std::to_string(counter->fetch_add(1)));
      session->hello();
      return session;
    };
  }
  const std::string address = config.adapter_address;
  auto counter = std::make_shared<std::atomic<int>>(0);
  return [address, counter] {
    auto session = std::make_unique<protocol::AdapterSession>(
        protocol::connect(address), "picl-" + std::to_string(counter->fetch_add(1)));
    session->hello();
    return session;
  };
}

std::unique_ptr<protocol::AdapterSession> SessionPool::acquire() {
  {
    std::lock_guard lock(mutex_);
    if (!idle_.empty()) {
      auto s = std::move(idle_.back());
      idle_.pop_back();
      return s;
    }
  }
  return factory_();
}

void SessionPool::release(std::unique_ptr<protocol::AdapterSession> session) {
  if (!session) return;
  std::lock_guard lock(mutex_);
  idle_.push_back(std::move(session));
}

// ---------------------------------------------------------------------------
// Stage context

namespace detail {

SessionPool& StageContext::sessions() {
  std::lock_guard lock(pool_mutex_);
  if (!pool_) pool_ = std::make_unique<SessionPool>(session_factory);
  return *pool_;
}

void StageContext::record(const fs::path& path) {
  std::lock_guard lock(outputs_mutex);
  outputs.push_back(path);
}

void StageContext::produced(const fs::path& path, const json& seeds) {
  stamp_sidecar(path, stage, config_hash, seeds);
  record(path);
}

void StageContext::note(const std::string& line) {
  if (!log) return;
  std::lock_guard lock(outputs_mutex);
  *log << "  " << line << '\n';
}

}  // namespace detail

void stamp_sidecar(const fs::path& path, Stage stage, const std::string& config_hash,
                   const json& seeds) {
  const auto side = sidecar_path(path);
  json meta = fs::exists(side) ? read_sidecar(path) : json::object();
  meta["stage"] = to_string(stage);
  meta["config_hash"] = config_hash;
  meta["seeds"] = seeds;
  write_sidecar(path, meta);
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::string stage_for_path(const fs::path& relative) {
  const std::string top = relative.begin()->string();
  for (const auto& i : kStageInfo)
    if (i.output_dir == top) return std::string(i.name);
  return "";
}

}  // namespace

std::vector<ManifestEntry> write_manifest(const fs::path& root, const std::string& config_hash) {
  std::vector<ManifestEntry> entries;
  if (fs::exists(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), root);
      const std::string first = rel.begin()->string();
      if (first == ".picl" || rel == "manifest.json") continue;
      entries.push_back({rel.generic_string(), stage_for_path(rel), file_content_hash(e.path()),
                         e.file_size()});
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.path < b.path; });
  json files = json::array();
  for (const auto& e : entries)
    files.push_back({{"path", e.path}, {"stage", e.stage}, {"content_hash", e.content_hash},
                     {"bytes", e.bytes}});
  const json manifest = {{"config_hash", config_hash}, {"hash_function", "fnv1a64"},
                         {"files", files}};
  write_file_atomic(root / "manifest.json", manifest.dump(1) + "\n");
  return entries;
}

std::vector<ManifestEntry> read_manifest(const fs::path& root) {
  const json m = json::parse(read_text_file(root / "manifest.json"));
  std::vector<ManifestEntry> out;
  for (const auto& f : m.at("files"))
    out.push_back({f.at("path").get<std::string>(), f.at("stage").get<std::string>(),
                   f.at("content_hash").get<std::string>(), f.at("bytes").get<std::uintmax_t>()});
  return out;
}

// ---------------------------------------------------------------------------
// Scheduler

bool RunResult::ok() const noexcept {
  return std::none_of(outcomes.begin(), outcomes.end(), [](const auto& o) {
    return o.status == StageStatus::Failed || o.status == StageStatus::Blocked;
  });
}

const StageOutcome* RunResult::find(Stage stage) const {
  for (const auto& o : outcomes)
    if (o.stage == stage) return &o;
  return nullptr;
}

std::string describe_plan(const ExperimentConfig& config, std::span<const Stage> selection) {
  std::ostringstream out;
  out << "output: " << config.output_dir.string() << "\n";
  out << "config hash: " << config.hash() << "\n";
  out << "systems: " << config.systems.size() << ", trajectories per system: "
      << config.n_trajectories << ", context lengths: " << config.context_lengths.size()
      << ", blocks: " << config.blocks.size() << "\n";
  out << "SAEs to train: "
      << config.systems.size() * config.context_lengths.size() * config.blocks.size() << "\n";
  if (selection.empty()) out << "no stages selected\n";
  for (auto s : kAllStages) {
    const bool selected = std::find(selection.begin(), selection.end(), s) != selection.end();
    out << (selected ? "  [x] " : "  [ ] ") << to_string(s) << " - " << info(s).summary;
    const auto deps = dependencies(s);
    if (!deps.empty()) {
      out << " (after";
      for (auto d : deps) out << ' ' << to_string(d);
      out << ')';
    }
    out << "\n";
  }
  return out.str();
}

RunResult run(const ExperimentConfig& config, std::span<const Stage> selection,
              const RunOptions& options) {
  config.validate();
  RunResult result;
  if (selection.empty()) return result;

  Layout layout{fs::absolute(config.output_dir).lexically_normal()};
  const std::string hash = config.hash();
  fs::create_directories(layout.root);
  write_file_atomic(layout.root / ".picl" / "config.json", config.to_json().dump(2) + "\n");
  SessionFactory factory =
      options.session_factory ? options.session_factory : make_session_factory(config);

  std::set<Stage> selected(selection.begin(), selection.end());
  std::map<Stage, StageStatus> status;
  bool any_ran = false;

  for (auto stage : kAllStages) {
    if (!selected.count(stage)) continue;
    StageOutcome outcome;
    outcome.stage = stage;

    std::string blocker;
    for (auto dep : dependencies(stage)) {
      auto it = status.find(dep);
      if (it != status.end()) {
        if (it->second == StageStatus::Failed || it->second == StageStatus::Blocked)
          blocker = std::string(to_string(dep)) + " did not complete";
      } else if (!marker_valid(layout, dep, hash)) {
        blocker = std::string(to_string(dep)) + " has no outputs for this config; run it first";
      }
    }
    if (!blocker.empty()) {
      outcome.status = StageStatus::Blocked;
      outcome.message = blocker;
    } else if (!options.force && marker_valid(layout, stage, hash)) {
      outcome.status = StageStatus::Skipped;
      outcome.message = "outputs match config hash " + hash;
    } else {
      const auto started = std::chrono::steady_clock::now();
      if (options.log) *options.log << "[" << to_string(stage) << "] running\n";
      // Dependents must not be skipped against outputs this stage replaces.
      fs::remove(layout.stage_marker(stage));
      for (auto d : dependents_closure(stage)) fs::remove(layout.stage_marker(d));
      fs::remove_all(layout.root / info(stage).output_dir);
      detail::StageContext ctx{config, layout, hash};
      ctx.stage = stage;
      ctx.jobs = std::max<std::size_t>(1, options.jobs);
      ctx.log = options.log;
      ctx.session_factory = factory;
      try {
        switch (stage) {
          case Stage::Simulate: detail::run_simulate(ctx); break;
          case Stage::Tokenize: detail::run_tokenize(ctx); break;
          case Stage::Capture: detail::run_capture(ctx); break;
          case Stage::TrainSae: detail::run_train_sae(ctx); break;
          case Stage::Correlate: detail::run_correlate(ctx); break;
          case Stage::Sync: detail::run_sync(ctx); break;
          case Stage::Intervene: detail::run_intervene(ctx); break;
          case Stage::Evaluate: detail::run_evaluate(ctx); break;
          case Stage::Report: detail::run_report(ctx); break;
        }
        std::sort(ctx.outputs.begin(), ctx.outputs.end());
        outcome.status = StageStatus::Ran;
        outcome.outputs = ctx.outputs;
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        std::ostringstream msg;
        msg << ctx.outputs.size() << " outputs in " << secs << " s";
        outcome.message = msg.str();
        const json marker = {{"stage", to_string(stage)},
                             {"config_hash", hash},
                             {"outputs", ctx.outputs.size()}};
        write_file_atomic(layout.stage_marker(stage), marker.dump(1) + "\n");
      } catch (const std::exception& e) {
        outcome.status = StageStatus::Failed;
        outcome.message = e.what();
      }
      any_ran = true;
    }
    if (options.log)
      *options.log << "[" << to_string(stage) << "] " << to_string(outcome.status) << ": "
                   << outcome.message << "\n";
    status[stage] = outcome.status;
    result.outcomes.push_back(std::move(outcome));
  }
  if (any_ran || !fs::exists(layout.manifest())) write_manifest(layout.root, hash);
  return result;
}

}  // namespace picl::pipeline
