#include "stages.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "picl/activation_store.hpp"
#include "picl/correlation.hpp"
#include "picl/error.hpp"
#include "picl/forecast.hpp"
#include "picl/intervention.hpp"
#include "picl/io.hpp"
#include "picl/parallel.hpp"
#include "picl/random.hpp"
#include "picl/sae.hpp"

namespace picl::pipeline::detail {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string sys_name(physics::SystemKind kind) { return std::string(physics::to_string(kind)); }

std::uint64_t trajectory_seed(std::uint64_t seed, physics::SystemKind kind, std::size_t k) {
  return combine_seed(combine_seed(seed, fnv1a64(sys_name(kind))), k);
}

std::uint64_t sae_seed(std::uint64_t seed, physics::SystemKind kind, std::uint32_t L,
                       std::uint32_t block) {
  return combine_seed(seed, fnv1a64(sys_name(kind) + "/L" + std::to_string(L) + "/block" +
                                    std::to_string(block)));
}

std::vector<forecast::TrajectoryRef> load_refs(const StageContext& ctx, physics::SystemKind kind) {
  std::vector<forecast::TrajectoryRef> refs;
  for (std::size_t k = 0; k < ctx.config.n_trajectories; ++k)
    refs.push_back(forecast::load_trajectory_ref(
        ctx.layout.trajectory(sys_name(kind), trajectory_id(kind, k))));
  return refs;
}

std::vector<std::string> channels_of(physics::SystemKind kind) {
  // Channel names depend only on the system shape, which is fixed per kind.
  const auto spec = kind == physics::SystemKind::MassSpring1D
                        ? physics::SystemSpec::mass_spring({1, 1, 1}, {1, 1}, {1, 1})
                        : physics::SystemSpec::pendulum({1, 1, 1}, {1, 1}, {1, 1}, 9.8);
  return physics::channel_names(spec);
}

json token_alignment_json(const activations::PromptAlignment& a) {
  json tokens = json::array();
  for (const auto& t : a.tokens) tokens.push_back({t.first, t.last, t.representative});
  return {{"trajectory_id", a.trajectory_id},
          {"channel", a.channel},
          {"history_start", a.history_start},
          {"representative_rule", "last_token_of_number"},
          {"tokens", tokens}};
}

activations::PromptAlignment read_token_alignment(const fs::path& path) {
  const json j = json::parse(read_text_file(path));
  activations::PromptAlignment a;
  a.trajectory_id = j.at("trajectory_id").get<std::string>();
  a.channel = j.at("channel").get<std::string>();
  a.history_start = j.at("history_start").get<std::size_t>();
  for (const auto& t : j.at("tokens"))
    a.tokens.push_back({t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(),
                        t.at(2).get<std::size_t>()});
  return a;
}

struct Sources {
  std::map<std::string, physics::Trajectory> trajectories;
  std::map<std::pair<std::string, std::string>, activations::PromptAlignment> alignments;
  std::vector<std::pair<std::string, std::string>> order;  // (trajectory, channel)
};

Sources load_sources(const StageContext& ctx, physics::SystemKind kind, std::uint32_t L) {
  Sources s;
  const auto sys = sys_name(kind);
  for (std::size_t k = 0; k < ctx.config.n_trajectories; ++k) {
    const auto id = trajectory_id(kind, k);
    s.trajectories.emplace(id, physics::read_trajectory(ctx.layout.trajectory(sys, id)));
    for (const auto& ch : channels_of(kind)) {
      s.alignments.emplace(std::pair{id, ch},
                           read_token_alignment(ctx.layout.token_alignment(sys, L, id, ch)));
      s.order.emplace_back(id, ch);
    }
  }
  return s;
}

activations::ActivationDataset load_dataset(const StageContext& ctx, physics::SystemKind kind,
                                            std::uint32_t L, std::uint32_t block,
                                            const Sources& sources) {
  std::vector<activations::ActivationTensor> tensors;
  tensors.reserve(sources.order.size());
  for (const auto& [id, ch] : sources.order)
    tensors.push_back(activations::read_tensor(ctx.layout.activation(sys_name(kind), L, block, id, ch)));
  return activations::build_dataset(tensors, sources.trajectories, sources.alignments,
                                    ctx.config.analysis.dataset_seed);
}

struct Cell {
  physics::SystemKind kind;
  std::uint32_t L;
};

std::vector<Cell> cells(const ExperimentConfig& c, const std::vector<std::uint32_t>& lengths) {
  std::vector<Cell> out;
  for (auto kind : c.systems)
    for (auto L : lengths) out.push_back({kind, L});
  return out;
}

forecast::SweepOptions sweep_options(const ExperimentConfig& c) {
  forecast::SweepOptions o;
  o.context_lengths = c.context_lengths;
  o.horizon = c.horizon;
  o.n_samples = c.n_samples;
  o.seed = c.seed;
  o.tokenizer = c.tokenizer;
  return o;
}

std::string join_units(const std::vector<std::uint32_t>& units) {
  std::string s;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (i) s += ';';
    s += std::to_string(units[i]);
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

void run_simulate(StageContext& ctx) {
  const auto& c = ctx.config;
  const std::size_t n_steps = c.trajectory_states() - 1;
  const std::size_t total = c.systems.size() * c.n_trajectories;
  parallel_for(total, ctx.jobs, [&](std::size_t job) {
    const auto kind = c.systems[job / c.n_trajectories];
    const std::size_t k = job % c.n_trajectories;
    const auto id = trajectory_id(kind, k);
    const std::uint64_t base = trajectory_seed(c.seed, kind, k);
    // A draw that diverges is replaced by the next attempt's draw.
    for (std::uint64_t attempt = 0;; ++attempt) {
      require(attempt < 16, ErrorCode::Divergence, "no stable system found for " + id);
      const std::uint64_t seed = attempt == 0 ? base : combine_seed(base, attempt);
      const auto [spec, init] = physics::sample_system(seed, kind, c.sampling_ranges);
      physics::Trajectory traj;
      try {
        traj = physics::integrate(spec, init, c.dt, n_steps);
      } catch (const DivergenceError&) {
        continue;
      } catch (const Error& e) {
        if (e.code() == ErrorCode::SingularConfiguration) continue;
        throw;
      }
      const auto path = ctx.layout.trajectory(sys_name(kind), id);
      physics::write_trajectory(path, traj, {{"trajectory_id", id}, {"attempt", attempt}});
      ctx.produced(path, {{"config", c.seed}, {"system", seed}});
      return;
    }
  });
}

void run_tokenize(StageContext& ctx) {
  const auto& c = ctx.config;
  const std::uint32_t max_l = c.max_context();
  const std::size_t total = c.systems.size() * c.n_trajectories;
  parallel_for(total, ctx.jobs, [&](std::size_t job) {
    const auto kind = c.systems[job / c.n_trajectories];
    const auto id = trajectory_id(kind, job % c.n_trajectories);
    const auto traj = physics::read_trajectory(ctx.layout.trajectory(sys_name(kind), id));
    const auto names = physics::channel_names(traj.spec);
    for (auto L : c.context_lengths) {
      for (std::size_t ch = 0; ch < names.size(); ++ch) {
        const auto prompt =
            make_prompt(traj, id, ch, forecast::history_start(L, max_l), L, c.tokenizer);
        const auto path = ctx.layout.prompt(sys_name(kind), L, id, names[ch]);
        write_prompt(path, prompt);
        ctx.produced(path, {{"config", c.seed}});
      }
    }
  });
}

void run_capture(StageContext& ctx) {
  const auto& c = ctx.config;
  struct Job {
    physics::SystemKind kind;
    std::uint32_t L;
    std::string id;
    std::string channel;
  };
  std::vector<Job> jobs;
  for (auto kind : c.systems)
    for (auto L : c.context_lengths)
      for (std::size_t k = 0; k < c.n_trajectories; ++k)
        for (const auto& ch : channels_of(kind)) jobs.push_back({kind, L, trajectory_id(kind, k), ch});

  parallel_for(jobs.size(), ctx.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto sys = sys_name(job.kind);
    const auto prompt_path = ctx.layout.prompt(sys, job.L, job.id, job.channel);
    const auto prompt = read_prompt(prompt_path);

    protocol::CaptureRequest req;
    req.prompt = prompt.prompt();
    req.blocks = c.blocks;
    req.output_dir = ctx.layout.activation_dir(sys, job.L).string();
    req.basename = job.id + "_" + job.channel;
    req.context_length = job.L;
    req.trajectory_id = job.id;
    req.channel = job.channel;
    req.seed = c.seed;
    req.oracle = protocol::OracleHint{
        fs::absolute(ctx.layout.trajectory(sys, job.id)).string(), job.channel,
        prompt.history_start, prompt.scaling.a, prompt.scaling.b, prompt.digits.precision};

    const auto reply = ctx.sessions().with_session([&](protocol::AdapterSession& s) {
      const auto& server = *s.server();
      for (auto b : c.blocks)
        require(b < server.n_blocks, ErrorCode::Config,
                "block " + std::to_string(b) + " outside the adapter's " +
                    std::to_string(server.n_blocks) + "-block model");
      return s.capture(req);
    });
    require(reply.files.size() == c.blocks.size(), ErrorCode::Protocol,
            "adapter returned " + std::to_string(reply.files.size()) + " tensor files");

    activations::PromptAlignment align;
    align.trajectory_id = job.id;
    align.channel = job.channel;
    align.history_start = prompt.history_start;
    align.tokens = tokenizer::align_tokens(prompt.digits, reply.token_lengths);

    for (const auto& f : reply.files) {
      const fs::path expected = ctx.layout.activation(sys, job.L, f.block, job.id, job.channel);
      require(fs::equivalent(f.path, expected), ErrorCode::Protocol,
              "adapter wrote " + f.path + ", expected " + expected.string());
      const auto t = activations::read_tensor(expected);
      require(t.hidden_dim == reply.hidden_dim && t.seq_len == reply.token_lengths.size() &&
                  t.block_index == f.block && t.context_length == job.L,
              ErrorCode::Protocol, "tensor " + f.path + " disagrees with the capture reply");
      ctx.produced(expected, {{"config", c.seed}, {"capture", req.seed}});
    }
    const auto tokens_path = ctx.layout.token_alignment(sys, job.L, job.id, job.channel);
    write_file_atomic(tokens_path, token_alignment_json(align).dump() + "\n");
    ctx.record(tokens_path);
  });
}

void run_train_sae(StageContext& ctx) {
  const auto& c = ctx.config;
  struct Job {
    physics::SystemKind kind;
    std::uint32_t L;
    std::uint32_t block;
  };
  std::vector<Job> jobs;
  for (auto kind : c.systems)
    for (auto L : c.context_lengths)
      for (auto b : c.blocks) jobs.push_back({kind, L, b});

  std::map<std::pair<physics::SystemKind, std::uint32_t>, Sources> sources;
  for (const auto& cell : cells(c, c.context_lengths))
    sources.emplace(std::pair{cell.kind, cell.L}, load_sources(ctx, cell.kind, cell.L));

  parallel_for(jobs.size(), ctx.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    const auto& src = sources.at({job.kind, job.L});
    const auto dataset = load_dataset(ctx, job.kind, job.L, job.block, src);
    sae::TrainConfig tc = c.sae;
    tc.seed = sae_seed(c.sae.seed, job.kind, job.L, job.block);
    const auto [params, report] = sae::train(dataset, tc);
    const auto path = ctx.layout.sae(sys_name(job.kind), job.L, job.block);
    sae::write_checkpoint(params, path);
    const auto& last = report.epochs.back();
    write_sidecar(path, {{"system", sys_name(job.kind)},
                         {"context_length", job.L},
                         {"block", job.block},
                         {"input_dim", params.input_dim},
                         {"code_dim", params.code_dim},
                         {"n_samples", dataset.size()},
                         {"epochs", tc.epochs},
                         {"learning_rate", tc.learning_rate},
                         {"sparsity_weight", tc.sparsity_weight},
                         {"batch_size", tc.batch_size},
                         {"final_loss", last.total},
                         {"active_fraction", report.active_fraction}});
    ctx.produced(path, {{"sae", tc.seed}, {"dataset", c.analysis.dataset_seed}});
    const auto curve = path.parent_path() / ("block" + std::to_string(job.block) + "_loss.csv");
    sae::write_loss_curve(report, curve);
    ctx.produced(curve, {{"sae", tc.seed}});
  });
}

void run_correlate(StageContext& ctx) {
  const auto& c = ctx.config;
  const auto all = cells(c, c.context_lengths);
  parallel_for(all.size(), ctx.jobs, [&](std::size_t i) {
    const auto [kind, L] = all[i];
    const auto sys = sys_name(kind);
    const auto src = load_sources(ctx, kind, L);
    std::vector<std::vector<float>> codes;
    std::vector<correlation::LabelRow> labels;
    std::vector<std::size_t> code_dims;
    for (auto block : c.blocks) {
      const auto dataset = load_dataset(ctx, kind, L, block, src);
      const auto params = sae::read_checkpoint(ctx.layout.sae(sys, L, block));
      require(params.input_dim == dataset.hidden_dim, ErrorCode::InvalidInput,
              "SAE for block " + std::to_string(block) + " does not match its activations");
      if (labels.empty()) {
        labels.reserve(dataset.size());
        for (std::size_t s = 0; s < dataset.size(); ++s)
          labels.push_back({dataset.label(s, QuantityKind::TotalEnergy),
                            dataset.label(s, QuantityKind::KineticEnergy),
                            dataset.label(s, QuantityKind::PotentialEnergy),
                            dataset.label(s, QuantityKind::RandomBaseline)});
      } else {
        require(dataset.size() == labels.size(), ErrorCode::InvalidInput,
                "blocks disagree on the sample set");
      }
      codes.push_back(sae::encode_all(params, dataset.residuals));
      code_dims.push_back(params.code_dim);
    }
    std::vector<correlation::BlockCodes> blocks;
    for (std::size_t b = 0; b < c.blocks.size(); ++b)
      blocks.push_back({c.blocks[b], code_dims[b], codes[b]});
    const auto matrix = correlation::correlate_all(blocks, labels, L);
    const auto matrix_path = ctx.layout.correlations(sys, L);
    correlation::write_matrix(matrix, matrix_path);
    ctx.produced(matrix_path, {{"dataset", c.analysis.dataset_seed}});

    CsvTable top({"quantity", "rank", "block", "unit", "rho", "abs_rho"});
    CsvTable blockwise({"block", "quantity", "max_abs_rho", "mean_top_abs_rho", "defined_units"});
    for (auto q : kAllQuantities) {
      const auto t = correlation::top_k(matrix, q, c.analysis.top_k);
      for (std::size_t r = 0; r < t.entries.size(); ++r) {
        const auto& e = t.entries[r];
        top.row()
            .cell(picl::to_string(q))
            .cell(r + 1)
            .cell(static_cast<long long>(e.block))
            .cell(static_cast<long long>(e.unit))
            .cell(e.rho)
            .cell(e.abs_rho);
      }
      const auto bt = correlation::blockwise_top(matrix, q, c.analysis.top_k);
      for (const auto& b : bt) {
        blockwise.row()
            .cell(static_cast<long long>(b.block))
            .cell(picl::to_string(q))
            .cell(b.max_abs())
            .cell(b.mean_abs())
            .cell(b.top_abs.size());
      }
    }
    const auto dir = matrix_path.parent_path();
    const auto stem = matrix_path.stem().string();
    top.write(dir / (stem + "_top.csv"));
    ctx.produced(dir / (stem + "_top.csv"), {{"dataset", c.analysis.dataset_seed}});
    blockwise.write(dir / (stem + "_blockwise.csv"));
    ctx.produced(dir / (stem + "_blockwise.csv"), {{"dataset", c.analysis.dataset_seed}});
  });
}

void run_sync(StageContext& ctx) {
  const auto& c = ctx.config;
  for (const auto& [kind, L] : cells(c, c.context_lengths)) {
    const auto sys = sys_name(kind);
    const auto matrix = correlation::read_matrix(ctx.layout.correlations(sys, L));
    correlation::SyncOptions opt;
    opt.fraction = c.analysis.sync_fraction;
    opt.select_by_abs = c.analysis.sync_select_by_abs;
    const auto report = correlation::sync_report(matrix, opt);
    CsvTable table({"quantity", "strength", "n_selected", "fraction", "select_by_abs"});
    for (auto q : kAllQuantities) {
      const auto& s = report.strength[index_of(q)];
      table.row()
          .cell(picl::to_string(q))
          .cell(s ? *s : std::numeric_limits<double>::quiet_NaN())
          .cell(report.selected.size())
          .cell(report.fraction)
          .cell(opt.select_by_abs ? 1 : 0);
    }
    const auto path = ctx.layout.sync(sys, L);
    table.write(path);
    ctx.produced(path, {{"dataset", c.analysis.dataset_seed}});

    CsvTable selected({"block", "unit", "rho_total_energy"});
    const auto pos_of = [&](std::uint32_t block) { return matrix.block_position(block); };
    for (const auto& p : report.selected) {
      selected.row()
          .cell(static_cast<long long>(p.block))
          .cell(static_cast<long long>(p.unit))
          .cell(*matrix.at(pos_of(p.block), p.unit, QuantityKind::TotalEnergy));
    }
    const auto sel_path = path.parent_path() / (path.stem().string() + "_selected.csv");
    selected.write(sel_path);
    ctx.produced(sel_path, {{"dataset", c.analysis.dataset_seed}});
  }
}

void run_intervene(StageContext& ctx) {
  const auto& c = ctx.config;
  const auto all = cells(c, c.intervention.context_lengths);
  parallel_for(all.size(), ctx.jobs, [&](std::size_t i) {
    const auto [kind, L] = all[i];
    const auto sys = sys_name(kind);
    const auto matrix = correlation::read_matrix(ctx.layout.correlations(sys, L));
    std::map<std::uint32_t, std::size_t> code_dims;
    std::map<std::uint32_t, std::string> sae_paths;
    for (auto block : matrix.blocks()) {
      const auto path = ctx.layout.sae(sys, L, block);
      code_dims[block] = sae::read_checkpoint(path).code_dim;
      sae_paths[block] = fs::absolute(path).string();
    }
    auto spec = intervention::select_targets(
        matrix, code_dims, {c.intervention.n_blocks, c.intervention.unit_fraction, QuantityKind::TotalEnergy,
         c.intervention.select_by_abs});
    spec.mode = c.intervention.mode;
    spec.seed = c.intervention.seed;
    const auto dir = ctx.layout.intervention_dir(sys, L);

    CsvTable targets({"rank", "block", "units"});
    for (std::size_t r = 0; r < spec.blocks.size(); ++r)
      targets.row().cell(r + 1).cell(static_cast<long long>(spec.blocks[r])).cell(
          join_units(spec.units.at(spec.blocks[r])));
    targets.write(dir / "targets.csv");
    write_sidecar(dir / "targets.csv", {{"spec", spec.to_json()}});
    ctx.produced(dir / "targets.csv", {{"intervention", spec.seed}});

    const auto refs = load_refs(ctx, kind);
    intervention::RunOptions opt;
    opt.window = c.intervention.window;
    opt.n_samples = c.n_samples;
    opt.seed = c.seed;
    opt.max_context = c.max_context();
    opt.tokenizer = c.tokenizer;

    CsvTable summary({"kind", "trial", "baseline_error", "intervened_error", "epsilon", "units"});
    auto run_one = [&](const intervention::InterventionSpec& s, const std::string& name,
                       const std::string& kind_label, long long trial) {
      const auto result = ctx.sessions().with_session([&](protocol::AdapterSession& session) {
        return intervention::run_intervention(session, s, sae_paths, refs, opt);
      });
      const auto path = dir / (name + ".csv");
      intervention::write_result_table(result, path);
      ctx.produced(path, {{"generation", opt.seed}, {"control", s.seed}});
      std::string units;
      for (auto b : s.blocks) {
        if (!units.empty()) units += ' ';
        units += std::to_string(b) + ":" + join_units(s.units.at(b));
      }
      summary.row()
          .cell(kind_label)
          .cell(trial)
          .cell(result.baseline_error)
          .cell(result.intervened_error)
          .cell(result.epsilon)
          .cell(units);
      return result.epsilon;
    };
    const double planted = run_one(spec, "planted", "planted", -1);
    std::size_t wins = 0;
    for (std::size_t t = 0; t < c.intervention.control_trials; ++t) {
      const auto control =
          intervention::random_control(spec, code_dims, combine_seed(c.intervention.seed, t));
      const double eps = run_one(control, "control_" + std::to_string(t), "control",
                                 static_cast<long long>(t));
      if (planted > eps) ++wins;
    }
    summary.write(dir / "summary.csv");
    write_sidecar(dir / "summary.csv", {{"planted_epsilon", planted},
                                        {"planted_wins", wins},
                                        {"control_trials", c.intervention.control_trials},
                                        {"fewer_blocks", spec.fewer_blocks}});
    ctx.produced(dir / "summary.csv", {{"intervention", c.intervention.seed}});
  });
}

void run_evaluate(StageContext& ctx) {
  const auto& c = ctx.config;
  const auto opts = sweep_options(c);
  std::vector<std::vector<forecast::ErrorReport>> per_system(c.systems.size());
  parallel_for(c.systems.size(), ctx.jobs, [&](std::size_t i) {
    const auto kind = c.systems[i];
    std::map<std::string, std::vector<forecast::TrajectoryRef>> systems{
        {sys_name(kind), load_refs(ctx, kind)}};
    per_system[i] = ctx.sessions().with_session(
        [&](protocol::AdapterSession& s) { return forecast::sweep(s, systems, opts); });
  });
  std::vector<forecast::ErrorReport> reports;
  for (auto& r : per_system)
    for (auto& e : r) reports.push_back(std::move(e));

  const auto dir = ctx.layout.evaluation_dir();
  forecast::write_error_tables(reports, dir);
  ctx.produced(dir / "first_step_error.csv", {{"generation", c.seed}});
  ctx.produced(dir / "per_step_error.csv", {{"generation", c.seed}});
  for (const auto& r : reports) {
    CsvTable t({"trajectory_id", "step", "error"});
    for (std::size_t k = 0; k < r.per_trajectory.size(); ++k)
      for (std::size_t s = 0; s < r.horizon; ++s)
        t.row().cell(r.trajectory_ids[k]).cell(s).cell(r.per_trajectory[k][s]);
    const auto path = dir / (r.system + "_L" + std::to_string(r.context_length) + ".csv");
    t.write(path);
    write_sidecar(path, r.to_json());
    ctx.produced(path, {{"generation", c.seed}});
    if (r.incomplete())
      ctx.note(r.system + " L" + std::to_string(r.context_length) + ": " +
               std::to_string(r.failures.size()) + " trajectories failed");
  }
}

void run_report(StageContext& ctx) {
  const auto& c = ctx.config;
  const auto dir = ctx.layout.report_dir();
  const auto nan = std::numeric_limits<double>::quiet_NaN();

  // Fig. 2: forecast error against history length.
  CsvTable fig2_first({"system", "context_length", "first_step_error", "std_error", "n", "incomplete"});
  CsvTable fig2_steps({"system", "context_length", "step", "error", "std_error"});
  for (const auto& [kind, L] : cells(c, c.context_lengths)) {
    const auto path = ctx.layout.evaluation_dir() / (sys_name(kind) + "_L" + std::to_string(L) + ".csv");
    const auto r = forecast::ErrorReport::from_json(read_sidecar(path));
    fig2_first.row()
        .cell(r.system)
        .cell(static_cast<long long>(L))
        .cell(r.n_completed() ? r.mean[0] : nan)
        .cell(r.n_completed() ? r.std_error[0] : nan)
        .cell(r.n_completed())
        .cell(r.incomplete() ? 1 : 0);
    for (std::size_t s = 0; s < r.horizon; ++s)
      fig2_steps.row().cell(r.system).cell(static_cast<long long>(L)).cell(s).cell(r.mean[s]).cell(
          r.std_error[s]);
  }

  // Fig. 3: top correlations and synchronization; Fig. 4: per-block strength.
  CsvTable fig3_top({"system", "context_length", "quantity", "rank", "block", "unit", "rho"});
  CsvTable fig3_sync({"system", "context_length", "quantity", "strength", "n_selected"});
  CsvTable fig4({"system", "context_length", "block", "quantity", "max_abs_rho", "mean_top_abs_rho"});
  for (const auto& [kind, L] : cells(c, c.context_lengths)) {
    const auto sys = sys_name(kind);
    const auto matrix = correlation::read_matrix(ctx.layout.correlations(sys, L));
    for (auto q : kAllQuantities) {
      const auto t = correlation::top_k(matrix, q, c.analysis.top_k);
      for (std::size_t r = 0; r < t.entries.size(); ++r)
        fig3_top.row()
            .cell(sys)
            .cell(static_cast<long long>(L))
            .cell(short_label(q))
            .cell(r + 1)
            .cell(static_cast<long long>(t.entries[r].block))
            .cell(static_cast<long long>(t.entries[r].unit))
            .cell(t.entries[r].rho);
      for (const auto& b : correlation::blockwise_top(matrix, q, c.analysis.top_k))
        fig4.row()
            .cell(sys)
            .cell(static_cast<long long>(L))
            .cell(static_cast<long long>(b.block))
            .cell(short_label(q))
            .cell(b.max_abs())
            .cell(b.mean_abs());
    }
    std::istringstream sync(read_text_file(ctx.layout.sync(sys, L)));
    std::string line;
    std::getline(sync, line);
    while (std::getline(sync, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      fig3_sync.row()
          .cell(sys)
          .cell(static_cast<long long>(L))
          .cell(short_label(quantity_from_string(f.at(0))))
          .cell(f.at(1))
          .cell(f.at(2));
    }
  }

  // Fig. 5: intervention effect.
  CsvTable fig5({"system", "context_length", "kind", "trial", "baseline_error",
                 "intervened_error", "epsilon"});
  CsvTable fig5_summary({"system", "context_length", "epsilon_planted", "epsilon_control_mean",
                         "planted_wins", "control_trials", "target_blocks"});
  for (const auto& [kind, L] : cells(c, c.intervention.context_lengths)) {
    const auto sys = sys_name(kind);
    const auto idir = ctx.layout.intervention_dir(sys, L);
    std::istringstream in(read_text_file(idir / "summary.csv"));
    std::string line;
    std::getline(in, line);
    double control_sum = 0.0;
    std::size_t control_n = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      fig5.row().cell(sys).cell(static_cast<long long>(L)).cell(f.at(0)).cell(f.at(1)).cell(
          f.at(2)).cell(f.at(3)).cell(f.at(4));
      if (f.at(0) == "control") {
        control_sum += std::stod(f.at(4));
        ++control_n;
      }
    }
    const auto meta = read_sidecar(idir / "summary.csv");
    const auto spec =
        intervention::InterventionSpec::from_json(read_sidecar(idir / "targets.csv").at("spec"));
    std::string blocks;
    for (auto b : spec.blocks) blocks += (blocks.empty() ? "" : ";") + std::to_string(b);
    fig5_summary.row()
        .cell(sys)
        .cell(static_cast<long long>(L))
        .cell(meta.at("planted_epsilon").get<double>())
        .cell(control_n ? control_sum / static_cast<double>(control_n) : nan)
        .cell(meta.at("planted_wins").get<std::size_t>())
        .cell(meta.at("control_trials").get<std::size_t>())
        .cell(blocks);
  }

  const std::pair<const char*, const CsvTable*> tables[] = {
      {"fig2_first_step_error.csv", &fig2_first}, {"fig2_per_step_error.csv", &fig2_steps},
      {"fig3_top_correlations.csv", &fig3_top},   {"fig3_sync_strength.csv", &fig3_sync},
      {"fig4_blockwise.csv", &fig4},              {"fig5_intervention.csv", &fig5},
      {"fig5_summary.csv", &fig5_summary}};
  for (const auto& [name, table] : tables) {
    table->write(dir / name);
    ctx.produced(dir / name, {{"config", c.seed}});
  }
}

}  // namespace picl::pipeline::detail
