#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "picl/config.hpp"
#include "picl/pipeline.hpp"

namespace picl::pipeline::detail {

struct StageContext {
  StageContext(const ExperimentConfig& c, Layout l, std::string hash)
      : config(c), layout(std::move(l)), config_hash(std::move(hash)) {}

  const ExperimentConfig& config;
  Layout layout;
  std::string config_hash;
  Stage stage = Stage::Simulate;
  std::size_t jobs = 1;
  std::ostream* log = nullptr;
  SessionFactory session_factory;

  std::vector<std::filesystem::path> outputs;
  std::mutex outputs_mutex;

  SessionPool& sessions();
  void record(const std::filesystem::path& path);
  /// Records `path` and stamps its sidecar.
  void produced(const std::filesystem::path& path, const nlohmann::json& seeds = nlohmann::json::object());
  void note(const std::string& line);

 private:
  std::unique_ptr<SessionPool> pool_;
  std::mutex pool_mutex_;
};

void run_simulate(StageContext& ctx);
void run_tokenize(StageContext& ctx);
void run_capture(StageContext& ctx);
void run_train_sae(StageContext& ctx);
void run_correlate(StageContext& ctx);
void run_sync(StageContext& ctx);
void run_intervene(StageContext& ctx);
void run_evaluate(StageContext& ctx);
void run_report(StageContext& ctx);

}  // namespace picl::pipeline::detail
