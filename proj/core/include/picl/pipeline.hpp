#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "picl/config.hpp"
#include "picl/forecast.hpp"
#include "picl/protocol.hpp"
#include "picl/tokenizer.hpp"

namespace picl::pipeline {

enum class Stage { Simulate, Tokenize, Capture, TrainSae, Correlate, Sync, Intervene, Evaluate, Report };

inline constexpr std::array<Stage, 9> kAllStages{Stage::Simulate,  Stage::Tokenize, Stage::Capture,
                                                 Stage::TrainSae,  Stage::Correlate, Stage::Sync,
                                                 Stage::Intervene, Stage::Evaluate, Stage::Report};

std::string_view to_string(Stage stage) noexcept;
Stage stage_from_string(std::string_view name);
/// Direct upstream stages.
std::vector<Stage> dependencies(Stage stage);
/// Comma-separated names or "all"; empty text selects nothing. Result is in
/// pipeline order without duplicates.
std::vector<Stage> parse_stage_selection(std::string_view text);

/// Output paths of an experiment directory.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path trajectory(std::string_view system, std::string_view id) const;
  std::filesystem::path prompt(std::string_view system, std::uint32_t L, std::string_view id,
                               std::string_view channel) const;
  std::filesystem::path activation_dir(std::string_view system, std::uint32_t L) const;
  std::filesystem::path activation(std::string_view system, std::uint32_t L, std::uint32_t block,
                                   std::string_view id, std::string_view channel) const;
  std::filesystem::path token_alignment(std::string_view system, std::uint32_t L,
                                        std::string_view id, std::string_view channel) const;
  std::filesystem::path sae(std::string_view system, std::uint32_t L, std::uint32_t block) const;
  std::filesystem::path sae_dir(std::string_view system, std::uint32_t L) const;
  std::filesystem::path correlations(std::string_view system, std::uint32_t L) const;
  std::filesystem::path sync(std::string_view system, std::uint32_t L) const;
  std::filesystem::path intervention_dir(std::string_view system, std::uint32_t L) const;
  std::filesystem::path evaluation_dir() const { return root / "evaluation"; }
  std::filesystem::path report_dir() const { return root / "report"; }
  std::filesystem::path stage_marker(Stage stage) const;
  std::filesystem::path manifest() const { return root / "manifest.json"; }
};

std::string trajectory_id(physics::SystemKind kind, std::size_t index);

// ---------------------------------------------------------------------------
// Prompts

struct PromptFile {
  std::string trajectory_id;
  std::string channel;
  std::size_t history_start = 0;
  std::size_t history_length = 0;
  tokenizer::ScalingParams scaling;
  tokenizer::DigitSeries digits;

  std::string prompt() const { return tokenizer::prompt_text(digits); }
};

PromptFile make_prompt(const physics::Trajectory& traj, std::string_view trajectory_id,
                       std::size_t channel, std::size_t history_start, std::size_t history_length,
                       const forecast::TokenizerSettings& settings);

/// Prompt text file plus sidecar with the fitted scaling and per-step
/// character spans (and token spans under per-character tokenization).
void write_prompt(const std::filesystem::path& path, const PromptFile& prompt,
                  const nlohmann::json& extra_meta = nlohmann::json::object());
PromptFile read_prompt(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Adapter sessions

using SessionFactory = std::function<std::unique_ptr<protocol::AdapterSession>()>;

/// "inproc" builds one in-process mock model shared by all sessions; other
/// addresses connect through protocol::connect. Sessions are greeted.
SessionFactory make_session_factory(const ExperimentConfig& config);

/// Hands out idle sessions to worker threads, creating them on demand.
class SessionPool {
 public:
  explicit SessionPool(SessionFactory factory) : factory_(std::move(factory)) {}

  template <typename Fn>
  auto with_session(Fn&& fn) {
    auto session = acquire();
    struct Release {
      SessionPool* pool;
      std::unique_ptr<protocol::AdapterSession>* s;
      ~Release() { pool->release(std::move(*s)); }
    } guard{this, &session};
    return fn(*session);
  }

 private:
  std::unique_ptr<protocol::AdapterSession> acquire();
  void release(std::unique_ptr<protocol::AdapterSession> session);

  SessionFactory factory_;
  std::mutex mutex_;
  std::vector<std::unique_ptr<protocol::AdapterSession>> idle_;
};

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  std::size_t jobs = 1;
  bool force = false;
  std::ostream* log = nullptr;
  /// Overrides make_session_factory, e.g. to inject a test adapter.
  SessionFactory session_factory;
};

enum class StageStatus { Ran, Skipped, Failed, Blocked };
std::string_view to_string(StageStatus status) noexcept;

struct StageOutcome {
  Stage stage = Stage::Simulate;
  StageStatus status = StageStatus::Ran;
  std::string message;
  std::vector<std::filesystem::path> outputs;
};

struct RunResult {
  std::vector<StageOutcome> outcomes;
  bool ok() const noexcept;
  const StageOutcome* find(Stage stage) const;
};

/// Human-readable plan: one line per selected stage with its dependencies.
std::string describe_plan(const ExperimentConfig& config, std::span<const Stage> selection);

/// Runs the selected stages in order. A stage whose marker matches the
/// config hash is skipped unless forced; a failure blocks its dependents
/// while independent stages still run. The manifest is rebuilt whenever any
/// stage ran. Empty selection does nothing.
RunResult run(const ExperimentConfig& config, std::span<const Stage> selection,
              const RunOptions& options);

struct ManifestEntry {
  std::string path;  // relative to the experiment root
  std::string stage;
  std::string content_hash;
  std::uintmax_t bytes = 0;
};

std::vector<ManifestEntry> write_manifest(const std::filesystem::path& root,
                                          const std::string& config_hash);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);

/// Merges stage, config hash and seeds into the sidecar of `path`.
void stamp_sidecar(const std::filesystem::path& path, Stage stage, const std::string& config_hash,
                   const nlohmann::json& seeds);

}  // namespace picl::pipeline
