#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "picl/config.hpp"
#include "picl/correlation.hpp"
#include "picl/error.hpp"
#include "picl/forecast.hpp"
#include "picl/intervention.hpp"
#include "picl/io.hpp"
#include "picl/mock_model.hpp"
#include "picl/pipeline.hpp"
#include "picl/protocol.hpp"
#include "picl/random.hpp"
#include "picl/sae.hpp"

namespace fs = std::filesystem;
using namespace picl;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::size_t jobs = 1;
  bool force = false;
};

ExperimentConfig load_config(const Globals& g) {
  if (g.config_path.empty()) throw Error(ErrorCode::Config, "--config is required");
  auto config = ExperimentConfig::load(g.config_path);
  if (g.seed_override) apply_seed_override(config, *g.seed_override);
  return config;
}

int report_outcomes(const pipeline::RunResult& result) {
  for (const auto& o : result.outcomes)
    std::cout << pipeline::to_string(o.stage) << ": " << pipeline::to_string(o.status)
              << (o.message.empty() ? "" : " (" + o.message + ")") << "\n";
  return result.ok() ? EXIT_SUCCESS : EXIT_FAILURE;
}

int run_stages(const Globals& g, const std::vector<pipeline::Stage>& stages) {
  const auto config = load_config(g);
  if (stages.empty()) {
    std::cout << pipeline::describe_plan(config, stages);
    return EXIT_SUCCESS;
  }
  pipeline::RunOptions opt;
  opt.jobs = g.jobs;
  opt.force = g.force;
  opt.log = &std::cerr;
  return report_outcomes(pipeline::run(config, stages, opt));
}

int tokenize_standalone(const std::string& trajectory, const std::string& out_dir,
                        std::optional<std::size_t> start, std::optional<std::size_t> length,
                        const forecast::TokenizerSettings& settings) {
  const auto ref = forecast::load_trajectory_ref(trajectory);
  const auto& traj = ref.trajectory;
  const std::size_t s = start.value_or(0);
  require(s < traj.size(), ErrorCode::OutOfRange, "--start beyond the trajectory");
  const std::size_t n = length.value_or(traj.size() - s);
  const auto names = physics::channel_names(traj.spec);
  for (std::size_t ch = 0; ch < names.size(); ++ch) {
    const auto prompt = pipeline::make_prompt(traj, ref.id, ch, s, n, settings);
    const auto path = fs::path(out_dir) / (ref.id + "_" + names[ch] + ".txt");
    pipeline::write_prompt(path, prompt, {{"source", fs::absolute(trajectory).string()}});
    std::cout << path.string() << "\n";
  }
  return EXIT_SUCCESS;
}

struct InterveneArgs {
  std::string correlations;
  std::string sae_dir;
  std::string adapter = "inproc";
  std::vector<std::string> trajectories;
  std::size_t window = 16;
  std::string mode = "delta_patch";
  std::string out;
  std::size_t n_blocks = 4;
  double unit_fraction = 0.01;
  bool signed_selection = false;
  std::size_t n_samples = 10;
  std::uint64_t seed = 0;
  std::size_t controls = 0;
  std::optional<std::uint32_t> max_context;
  std::string mock_config;
};

int intervene_standalone(const InterveneArgs& a) {
  const auto matrix = correlation::read_matrix(a.correlations);
  std::map<std::uint32_t, std::size_t> code_dims;
  std::map<std::uint32_t, std::string> sae_paths;
  for (auto block : matrix.blocks()) {
    const auto path = fs::absolute(fs::path(a.sae_dir) / ("block" + std::to_string(block) + ".psae"));
    if (!fs::exists(path)) continue;
    code_dims[block] = sae::read_checkpoint(path).code_dim;
    sae_paths[block] = path.string();
  }
  auto spec = intervention::select_targets(matrix, code_dims, {a.n_blocks, a.unit_fraction, QuantityKind::TotalEnergy, !a.signed_selection});
  spec.mode = protocol::ablation_mode_from_string(a.mode);
  spec.seed = a.seed;
  if (spec.fewer_blocks)
    std::cerr << "note: only " << spec.blocks.size() << " candidate blocks available\n";

  std::vector<forecast::TrajectoryRef> refs;
  for (const auto& t : a.trajectories) refs.push_back(forecast::load_trajectory_ref(t));

  std::unique_ptr<protocol::AdapterSession> session;
  if (a.adapter == "inproc") {
    mock::MockConfig mc;
    if (!a.mock_config.empty())
      mc = mock::MockConfig::from_json(nlohmann::json::parse(read_text_file(a.mock_config)));
    auto model = mock::MockModel::create(mc);
    std::shared_ptr<protocol::LineHandler> handler = model->new_session();
    session = std::make_unique<protocol::AdapterSession>(
        std::make_unique<protocol::InProcessTransport>(
            [handler](std::string_view l) { return handler->handle_line(l); }),
        "picl-cli");
  } else {
    session = std::make_unique<protocol::AdapterSession>(protocol::connect(a.adapter), "picl-cli");
  }
  session->hello();

  intervention::RunOptions opt;
  opt.window = a.window;
  opt.n_samples = a.n_samples;
  opt.seed = a.seed;
  opt.max_context = a.max_context.value_or(matrix.context_length());
  const auto result = intervention::run_intervention(*session, spec, sae_paths, refs, opt);
  intervention::write_result_table(result, a.out);
  std::cout << "targets:";
  for (auto b : spec.blocks) std::cout << ' ' << b;
  std::cout << "\nbaseline_error " << format_double(result.baseline_error) << "\nintervened_error "
            << format_double(result.intervened_error) << "\nepsilon "
            << format_double(result.epsilon) << "\n";
  for (std::size_t t = 0; t < a.controls; ++t) {
    const auto control = intervention::random_control(spec, code_dims, combine_seed(a.seed, t));
    const auto r = intervention::run_intervention(*session, control, sae_paths, refs, opt);
    std::cout << "control " << t << " epsilon " << format_double(r.epsilon) << "\n";
  }
  session->bye();
  return EXIT_SUCCESS;
}

struct ServeArgs {
  std::string listen;
  bool stdio = false;
  std::size_t max_connections = 0;
  std::string mock_config;
};

int mock_serve(const Globals& g, const ServeArgs& a) {
  mock::MockConfig mc;
  if (!a.mock_config.empty()) {
    mc = mock::MockConfig::from_json(nlohmann::json::parse(read_text_file(a.mock_config)));
  } else if (!g.config_path.empty()) {
    mc = load_config(g).mock;
  }
  auto model = mock::MockModel::create(mc);
  if (a.stdio) {
    auto session = model->new_session();
    std::ios::sync_with_stdio(false);
    protocol::serve_stream(*session, std::cin, std::cout);
    return EXIT_SUCCESS;
  }
  if (a.listen.empty()) throw Error(ErrorCode::Config, "mock-serve needs --listen or --stdio");
  protocol::serve_socket([&] { return model->new_session(); }, a.listen, a.max_connections,
                         [&](std::uint16_t port) {
                           std::cerr << "listening on " << a.listen;
                           if (port != 0) std::cerr << " (port " << port << ")";
                           std::cerr << std::endl;
                         });
  return EXIT_SUCCESS;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"picl: physics in-context learning interpretability pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("-c,--config", g.config_path, "experiment config (JSON)");
  app.add_option("--seed-override", g.seed_override, "derive every seed from this value");
  app.add_option("-j,--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("-f,--force", g.force, "rerun stages even when outputs match the config");

  std::string stages_text;
  auto* run = app.add_subcommand("run", "run selected pipeline stages (no selection prints the plan)");
  run->add_option("-s,--stages", stages_text, "comma-separated stages, or 'all'");

  std::map<std::string, CLI::App*> stage_cmds;
  const std::map<pipeline::Stage, std::string> descriptions{
      {pipeline::Stage::Simulate, "simulate trajectories"},
      {pipeline::Stage::Capture, "capture residual streams through the adapter"},
      {pipeline::Stage::TrainSae, "train SAEs on captured activations"},
      {pipeline::Stage::Correlate, "correlate SAE codes with energies"},
      {pipeline::Stage::Sync, "synchronization strength tables"},
      {pipeline::Stage::Evaluate, "forecast error sweep"},
      {pipeline::Stage::Report, "write figure-shaped tables"}};
  for (const auto& [stage, text] : descriptions) {
    const std::string name(pipeline::to_string(stage));
    stage_cmds[name] = app.add_subcommand(name, text + " (uses --config)");
  }

  // tokenize: pipeline stage with --config, standalone with --trajectory.
  auto* tokenize = app.add_subcommand("tokenize", "serialize trajectory channels into prompts");
  std::string tok_traj, tok_out;
  std::optional<std::size_t> tok_start, tok_length;
  forecast::TokenizerSettings tok_settings;
  tokenize->add_option("--trajectory", tok_traj, "trajectory file (standalone mode)");
  tokenize->add_option("--out", tok_out, "output directory (standalone mode)");
  tokenize->add_option("--start", tok_start, "first history step");
  tokenize->add_option("--length", tok_length, "number of history steps");
  tokenize->add_option("--alpha", tok_settings.alpha, "scaling percentile");
  tokenize->add_option("--beta", tok_settings.beta, "scaling offset fraction");
  tokenize->add_option("--precision", tok_settings.precision, "digits per value");

  auto* intervene = app.add_subcommand("intervene", "ablate top SAE units and measure epsilon");
  InterveneArgs iv;
  intervene->add_option("--correlations", iv.correlations, "correlation matrix table");
  intervene->add_option("--sae-dir", iv.sae_dir, "directory holding block<j>.psae");
  intervene->add_option("--adapter", iv.adapter, "adapter address (inproc, tcp://, unix:, exec:)");
  intervene->add_option("--trajectory", iv.trajectories, "trajectory files");
  intervene->add_option("--window", iv.window, "prediction window");
  intervene->add_option("--mode", iv.mode, "delta_patch or full_replace");
  intervene->add_option("--out", iv.out, "result table path");
  intervene->add_option("--n-blocks", iv.n_blocks, "target blocks");
  intervene->add_option("--unit-fraction", iv.unit_fraction, "share of units ablated per block");
  intervene->add_flag("--signed", iv.signed_selection, "rank blocks and units by signed rho");
  intervene->add_option("--samples", iv.n_samples, "samples per generation");
  intervene->add_option("--seed", iv.seed, "sampling seed");
  intervene->add_option("--controls", iv.controls, "random-unit control trials");
  intervene->add_option("--max-context", iv.max_context,
                        "history ends at this step (default: the matrix context length)");
  intervene->add_option("--mock-config", iv.mock_config, "mock config for --adapter inproc");

  auto* serve = app.add_subcommand("mock-serve", "serve the mock model over the adapter protocol");
  ServeArgs sv;
  serve->add_option("--listen", sv.listen, "tcp://host:port or unix:/path");
  serve->add_flag("--stdio", sv.stdio, "serve one session on stdin/stdout");
  serve->add_option("--max-connections", sv.max_connections, "exit after this many sessions");
  serve->add_option("--mock-config", sv.mock_config, "mock config JSON (default: config's mock)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (run->parsed()) return run_stages(g, pipeline::parse_stage_selection(stages_text));
    for (const auto& [name, cmd] : stage_cmds)
      if (cmd->parsed()) return run_stages(g, {pipeline::stage_from_string(name)});
    if (tokenize->parsed()) {
      if (!tok_traj.empty()) {
        if (tok_out.empty()) throw Error(ErrorCode::Config, "--out is required with --trajectory");
        return tokenize_standalone(tok_traj, tok_out, tok_start, tok_length, tok_settings);
      }
      return run_stages(g, {pipeline::Stage::Tokenize});
    }
    if (intervene->parsed()) {
      if (!iv.correlations.empty()) {
        if (iv.sae_dir.empty() || iv.trajectories.empty() || iv.out.empty())
          throw Error(ErrorCode::Config,
                      "--correlations needs --sae-dir, --trajectory and --out as well");
        return intervene_standalone(iv);
      }
      return run_stages(g, {pipeline::Stage::Intervene});
    }
    if (serve->parsed()) return mock_serve(g, sv);
  } catch (const Error& e) {
    std::cerr << "picl: error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "picl: error: " << e.what() << "\n";
    return 2;
  }
  return EXIT_FAILURE;
}
