#include "groklab/cli.hpp"

#include <CLI11.hpp>
#include <atomic>
#include <csignal>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <unistd.h>

#include "groklab/dynamics.hpp"
#include "groklab/errors.hpp"
#include "groklab/harness.hpp"
#include "groklab/model.hpp"
#include "groklab/numerics.hpp"
#include "groklab/tasks.hpp"
#include "groklab/trainer.hpp"

namespace groklab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_interrupt(int) { g_interrupted.store(true); }

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_epochs;

  void apply(harness::SweepConfig& cfg) const {
    if (seed) cfg.seeds = {*seed};
    if (max_epochs) cfg.train.max_epochs = *max_epochs;
    cfg.validate();
  }
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Replace the config's seed list with this seed");
  cmd->add_option("--max-epochs", o.max_epochs, "Override train.max_epochs");
}

const char* kConfigHelp = R"(Config files are TOML. Every key is optional; defaults:
  [sweep]      name = "sweep", seeds = [0], jobs = 1, runs_dir = "runs"
  [task]       kind = "mod_add" (mod_add | mod_poly2 | random_memo | multitask),
               modulus = 113, d_train = [3000], n_memo = 3000, commutative = false
  [model]      d_h = [64], n_layers = [1], n_heads = 4, d_mlp = 0 (means 4*d_h),
               partitioned_ffn = false, init_scale = 1.0
  [train]      learning_rate = 0.001, beta1 = 0.9, beta2 = 0.98, epsilon = 1e-8,
               weight_decay = 1.0, decay_embeddings = true, max_epochs = 50000,
               eval_every = 10, stop_val_acc = 0.999, stop_patience = 100,
               save_checkpoint = true
  [thresholds] train_perfect = 0.995, generalized = 0.95, negligible = 0.05,
               grok_delay = 1000, dip_depth = 0.1, plateau_window = 50,
               plateau_tolerance = 0.02
Exit status: 0 success, 1 input error, 2 runtime failure.)";

int cmd_run(const fs::path& config, const fs::path& out_dir, const Overrides& o, bool quiet,
            std::ostream& out) {
  auto cfg = harness::load_sweep_config(config);
  o.apply(cfg);
  const auto specs = harness::expand(cfg);
  if (specs.size() != 1) {
    throw ConfigError("run expects a config with a single grid point and seed, '" +
                      config.string() + "' expands to " + std::to_string(specs.size()) +
                      " runs (use sweep)");
  }
  if (!quiet) out << "training run " << specs[0].id() << " into " << out_dir.string() << "\n";
  const auto done = harness::execute_run(specs[0], out_dir, cfg.thresholds, &g_interrupted);
  if (!done) throw Error("interrupted before the run finished");
  const auto sweep = harness::load_sweep(out_dir);
  const auto& summary = sweep.runs.front().summary;
  out << summary.value("label", std::string("unclassified")) << "\n";
  if (!quiet) out << summary.at("final").dump() << "\n";
  return done->status == harness::RunStatus::diverged ? 2 : 0;
}

int cmd_sweep(const fs::path& config, const fs::path& out_dir, std::size_t jobs,
              std::optional<std::size_t> max_runs, const Overrides& o, bool quiet,
              std::ostream& out) {
  auto cfg = harness::load_sweep_config(config);
  o.apply(cfg);
  harness::SweepOptions options;
  options.jobs = jobs;
  options.max_new_runs = max_runs;
  options.cancel = &g_interrupted;
  if (!quiet) options.log = [&out](const std::string& line) { out << line << std::endl; };
  const auto r = harness::run_sweep(cfg, out_dir, options);
  out << json{{"total", r.total},       {"trained", r.trained}, {"skipped", r.skipped},
              {"failed", r.failed},     {"diverged", r.diverged},
              {"remaining", r.remaining}}
             .dump()
      << "\n";
  return r.failed > 0 ? 2 : 0;
}

int cmd_classify(const fs::path& run_dir, const std::optional<fs::path>& thresholds_file,
                 std::ostream& out) {
  dynamics::Thresholds th;
  if (thresholds_file) {
    th = harness::load_sweep_config(*thresholds_file).thresholds;
  } else {
    const auto sweep = harness::load_sweep(run_dir);
    th = sweep.thresholds;
  }
  const auto path = fs::is_directory(run_dir) ? run_dir / "metrics.csv" : run_dir;
  const auto trace = trainer::load_metrics_csv(path);
  const auto label = dynamics::classify(trace, th);
  out << dynamics::to_string(label.label) << "\n" << dynamics::to_json(label).dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t d_h, std::size_t layers, std::uint32_t modulus, std::size_t batch,
                  std::uint64_t seed, double step, double tolerance, bool partitioned,
                  std::ostream& out) {
  model::ModelConfig cfg;
  cfg.d_h = d_h;
  cfg.n_layers = layers;
  cfg.modulus = modulus;
  cfg.init_seed = seed;
  cfg.partitioned_ffn = partitioned;
  cfg.validate();
  const auto ds = partitioned ? tasks::gen_multitask(modulus, batch / 2, batch - batch / 2, seed)
                              : tasks::gen_mod_add(modulus, batch, seed);
  const auto enc = model::encode(ds.train, modulus);
  std::vector<std::size_t> labels;
  for (const auto& e : ds.train) labels.push_back(e.label);
  const auto mask = model::ExpertMask::by_operator();

  const auto params = model::init_parameters(cfg);
  std::vector<numerics::ParamBlock> blocks;
  for (const auto& t : params.tensors) blocks.push_back({t.shape, t.values});
  const numerics::ScalarFunction loss = [&](numerics::Tape& tape,
                                            std::span<const numerics::DiffArray> leaves) {
    const auto fr = model::forward_leaves(tape, leaves, cfg, enc, partitioned ? &mask : nullptr);
    return numerics::cross_entropy(fr.logits, labels);
  };
  numerics::GradCheckOptions options;
  options.step = step;
  options.seed = seed;
  const auto r = numerics::grad_check(loss, blocks, options);
  const bool pass = r.max_relative_error < tolerance;
  out << std::setprecision(6) << "max_relative_error " << r.max_relative_error << "\n"
      << "checked " << r.checked << " rejected " << r.rejected << " of "
      << model::count_parameters(cfg) << " parameters\n"
      << (pass ? "PASS" : "FAIL") << " (tolerance " << tolerance << ")\n";
  return pass ? 0 : 2;
}

int cmd_estimate(const std::string& what, const fs::path& sweep_dir,
                 const std::optional<fs::path>& capacity_sweep, double threshold, double baseline,
                 std::ostream& out) {
  const auto sweep = harness::load_sweep(sweep_dir);
  if (sweep.runs.empty()) throw InputError("'" + sweep_dir.string() + "' has no finished runs");
  std::vector<dynamics::RunOutcome> outcomes;
  for (const auto& r : sweep.runs) outcomes.push_back(r.outcome);
  json result;
  if (what == "d-crit") {
    std::vector<dynamics::CapacityRun> cap;
    if (capacity_sweep) {
      for (const auto& r : harness::load_sweep(*capacity_sweep).runs) {
        cap.push_back({r.outcome.d_h, r.outcome.final_train_acc, r.outcome.d_train});
      }
    }
    const auto pd = dynamics::build_phase_diagram(outcomes, sweep.thresholds, cap);
    result["d_crit"] = json::array();
    for (const auto& [d_h, dc] : pd.d_crit) {
      result["d_crit"].push_back({{"d_h", d_h}, {"d_crit", dc ? json(*dc) : json()}});
    }
    if (capacity_sweep) {
      result["capacity_crossing_d_h"] = pd.crossing_d_h ? json(*pd.crossing_d_h) : json("outside grid");
    }
  } else {
    const auto tmp = fs::temp_directory_path() /
                     ("groklab-estimate-" + std::to_string(::getpid()));
    harness::ReportOptions options;
    options.emergence_threshold = threshold;
    options.emergence_baseline = baseline;
    const auto kind = what == "capacity" ? harness::ReportKind::capacity : harness::ReportKind::emergence;
    try {
      result = harness::emit_report(sweep_dir, kind, tmp, options);
    } catch (...) {
      fs::remove_all(tmp);
      throw;
    }
    fs::remove_all(tmp);
  }
  out << result.dump(2) << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"groklab: train small transformers on modular arithmetic and analyse how they "
               "memorize and generalize"};
  app.footer(kConfigHelp);
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Less progress output");

  fs::path config, out_dir, sweep_dir, run_dir;
  Overrides overrides;

  auto* run = app.add_subcommand("run", "Train one configuration and write its run directory");
  run->add_option("--config", config, "TOML config with a single grid point")->required();
  run->add_option("--out", out_dir, "Run directory to create")->required();
  add_overrides(run, overrides);

  std::size_t jobs = 0;
  std::optional<std::size_t> max_runs;
  auto* sweep = app.add_subcommand("sweep", "Train every grid point and seed of a config");
  sweep->add_option("--config", config, "TOML sweep config")->required();
  sweep->add_option("--out", out_dir, "Sweep directory (finished runs are reused)")->required();
  sweep->add_option("--jobs", jobs, "Concurrent runs (default: sweep.jobs from the config)");
  sweep->add_option("--max-runs", max_runs, "Train at most this many new runs, then stop");
  add_overrides(sweep, overrides);

  std::optional<fs::path> thresholds_file;
  auto* classify = app.add_subcommand("classify", "Label the training dynamics of a finished run");
  classify->add_option("--run", run_dir, "Run directory or metrics.csv")->required();
  classify->add_option("--thresholds", thresholds_file,
                       "TOML file with a [thresholds] table (default: the run's own)");

  std::string report_kind;
  harness::ReportOptions report_options;
  std::optional<std::string> run_id;
  std::optional<fs::path> capacity_sweep;
  auto* report = app.add_subcommand("report", "Write CSV, SVG and verdict.json for a sweep");
  report->add_option("kind", report_kind,
                     "phase_diagram | double_descent | capacity | emergence | trace")
      ->required()
      ->check(CLI::IsMember({"phase_diagram", "double_descent", "capacity", "emergence", "trace"}));
  report->add_option("--sweep", sweep_dir, "Sweep or run directory")->required();
  report->add_option("--out", out_dir, "Report directory")->required();
  report->add_option("--delta", report_options.dip_delta, "Minimum double-descent dip")
      ->capture_default_str();
  report->add_option("--threshold", report_options.emergence_threshold,
                     "Accuracy that counts as emerged")
      ->capture_default_str();
  report->add_option("--baseline", report_options.emergence_baseline,
                     "Reference parameter count (0: 1-layer d_h=64 model)")
      ->capture_default_str();
  report->add_option("--run-id", run_id, "Run to plot for trace reports on multi-run sweeps");
  report->add_option("--capacity-sweep", capacity_sweep,
                     "Capacity sweep intersected with D_crit in phase diagrams");

  std::size_t gc_d_h = 8, gc_layers = 1, gc_batch = 16;
  std::uint32_t gc_modulus = 113;
  std::uint64_t gc_seed = 0;
  double gc_step = 1e-5, gc_tol = 1e-4;
  bool gc_partitioned = false;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Compare reverse-mode gradients with central finite differences");
  gradcheck->add_option("--d-h", gc_d_h, "Hidden size")->capture_default_str();
  gradcheck->add_option("--layers", gc_layers, "Transformer layers")->capture_default_str();
  gradcheck->add_option("--modulus", gc_modulus, "Modulus P")->capture_default_str();
  gradcheck->add_option("--batch", gc_batch, "Examples in the loss")->capture_default_str();
  gradcheck->add_option("--seed", gc_seed, "Seed for data, init and subsampling")
      ->capture_default_str();
  gradcheck->add_option("--step", gc_step, "Finite-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc_tol, "Pass below this relative error")
      ->capture_default_str();
  gradcheck->add_flag("--partitioned", gc_partitioned, "Check the operator-routed MLP");

  std::string estimate_kind;
  double est_threshold = 0.95, est_baseline = 0.0;
  auto* estimate = app.add_subcommand("estimate", "Print curve estimates for a sweep as JSON");
  estimate->add_option("quantity", estimate_kind, "d-crit | capacity | emergence")
      ->required()
      ->check(CLI::IsMember({"d-crit", "capacity", "emergence"}));
  estimate->add_option("--sweep", sweep_dir, "Sweep directory")->required();
  estimate->add_option("--capacity-sweep", capacity_sweep, "Capacity sweep for the d-crit crossing");
  estimate->add_option("--threshold", est_threshold, "Emergence accuracy threshold")
      ->capture_default_str();
  estimate->add_option("--baseline", est_baseline, "Emergence reference parameter count")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  auto previous = std::signal(SIGINT, on_interrupt);
  int code = 0;
  try {
    if (*run) {
      code = cmd_run(config, out_dir, overrides, quiet, out);
    } else if (*sweep) {
      code = cmd_sweep(config, out_dir, jobs, max_runs, overrides, quiet, out);
    } else if (*classify) {
      code = cmd_classify(run_dir, thresholds_file, out);
    } else if (*report) {
      report_options.run_id = run_id;
      report_options.capacity_sweep = capacity_sweep;
      const auto verdict = harness::emit_report(sweep_dir, harness::parse_report_kind(report_kind),
                                                out_dir, report_options);
      out << verdict.dump(2) << "\n";
    } else if (*gradcheck) {
      code = cmd_gradcheck(gc_d_h, gc_layers, gc_modulus, gc_batch, gc_seed, gc_step, gc_tol,
                           gc_partitioned, out);
    } else if (*estimate) {
      code = cmd_estimate(estimate_kind, sweep_dir, capacity_sweep, est_threshold, est_baseline, out);
    }
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    code = 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = 2;
  }
  std::signal(SIGINT, previous);
  return code;
}

}  // namespace groklab
