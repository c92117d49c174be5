#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "groklab/errors.hpp"
#include "groklab/harness.hpp"
#include "groklab/svg.hpp"

using namespace groklab;
using namespace groklab::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("groklab_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Four fast runs: P = 13, two sizes, two seeds.
constexpr const char* kTiny = R"(
[sweep]
name = "tiny"
seeds = [0, 1]

[task]
kind = "mod_add"
modulus = 13
d_train = [60, 90]

[model]
d_h = [8]

[train]
max_epochs = 40
)";

}  // namespace

TEST_CASE("config: defaults and explicit values") {
  const auto d = parse_sweep_config("");
  CHECK(d.task.modulus == 113);
  CHECK(d.model.d_h == std::vector<std::size_t>{64});
  CHECK(d.train.max_epochs == 50000);
  CHECK(d.train.weight_decay == 1.0);

  const auto c = parse_sweep_config(R"(
[sweep]
name = "x"
seeds = [3, 4]
jobs = 2
[task]
kind = "multitask"
modulus = 31
d_train = 100
n_memo = 50
[model]
d_h = [8, 16]
n_layers = [1, 2]
partitioned_ffn = true
[train]
learning_rate = 0.01
max_epochs = 7
[thresholds]
grok_delay = 5
)");
  CHECK(c.name == "x");
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.task.kind == tasks::TaskKind::multitask);
  CHECK(c.task.d_train == std::vector<std::size_t>{100});
  CHECK(c.model.n_layers.size() == 2);
  CHECK(c.model.partitioned_ffn);
  CHECK(c.train.learning_rate == 0.01);
  CHECK(c.thresholds.grok_delay == 5);
}

TEST_CASE("config: errors") {
  CHECK_THROWS_AS(parse_sweep_config("[model]\nwidth = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("[optimizer]\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("[model]\nd_h = \"big\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("[model]\nd_h = []\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("[model]\nd_h = [10]\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("[sweep]\nseeds = [1, 1]\n"), ConfigError);
  CHECK_THROWS_AS(parse_sweep_config("[task]\nkind = \"mod_mul\"\n"), InputError);
  CHECK_THROWS_AS(parse_sweep_config("[model]\npartitioned_ffn = true\n"), ConfigError);
  try {
    parse_sweep_config("[sweep]\nname = \"a\"\nseeds = [1,\n", "bad.toml");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.toml:") != std::string::npos);
  }
  try {
    load_sweep_config("/nonexistent/sweep.toml");
    FAIL("expected an input error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/sweep.toml") != std::string::npos);
  }
}

TEST_CASE("run ids are stable and sensitive to every field") {
  const auto runs = expand(parse_sweep_config(kTiny));
  REQUIRE(runs.size() == 4);
  const auto id = runs[0].id();
  CHECK(std::regex_match(id, std::regex("[0-9a-f]{16}")));
  CHECK(RunSpec::from_json(runs[0].to_json()).id() == id);
  CHECK(runs[1].id() != id);
  auto lr = runs[0];
  lr.train.learning_rate = 2e-3;
  CHECK(lr.id() != id);
  auto ckpt = runs[0];
  ckpt.train.save_checkpoint = false;
  CHECK(ckpt.id() == id);
}

TEST_CASE("expand: grid order and seed application") {
  auto cfg = parse_sweep_config(R"(
[sweep]
seeds = [0, 1, 2]
[task]
d_train = [100, 200]
[model]
d_h = [8, 16]
)");
  const auto runs = expand(cfg);
  REQUIRE(runs.size() == 12);
  CHECK(runs[0].model.d_h == 8);
  CHECK(runs[0].d_train == 100);
  CHECK(runs[2].seed == 2);
  CHECK(runs[3].d_train == 200);
  CHECK(runs[6].model.d_h == 16);
  for (const auto& r : runs) {
    CHECK(r.model.init_seed == r.seed);
    CHECK(r.train.seed == r.seed);
    CHECK(r.n_memo == 0);
  }
  CHECK(make_dataset(runs[2]).train == tasks::gen_mod_add(113, 100, 2).train);
}

TEST_CASE("sweep: idempotent and resumable") {
  const auto root = scratch("sweep");
  const auto cfg = parse_sweep_config(kTiny);

  const auto first = run_sweep(cfg, root / "a");
  CHECK(first.total == 4);
  CHECK(first.trained == 4);
  CHECK(first.failed == 0);
  const auto again = run_sweep(cfg, root / "a");
  CHECK(again.trained == 0);
  CHECK(again.skipped == 4);

  SweepOptions partial;
  partial.max_new_runs = 2;
  const auto half = run_sweep(cfg, root / "b", partial);
  CHECK(half.trained == 2);
  CHECK(half.remaining == 2);
  const auto rest = run_sweep(cfg, root / "b");
  CHECK(rest.trained == 2);
  CHECK(rest.skipped == 2);

  CHECK(slurp(root / "a" / "aggregate.csv") == slurp(root / "b" / "aggregate.csv"));
  const auto id = expand(cfg)[3].id();
  CHECK(slurp(root / "a" / "runs" / id / "metrics.csv") ==
        slurp(root / "b" / "runs" / id / "metrics.csv"));
  CHECK(slurp(root / "a" / "runs" / id / "summary.json") ==
        slurp(root / "b" / "runs" / id / "summary.json"));

  const auto loaded = load_sweep(root / "a");
  CHECK(loaded.runs.size() == 4);
  CHECK(loaded.missing.empty());
  CHECK(fs::exists(root / "a" / "runs" / id / "checkpoint" / "params.bin"));
  CHECK(slurp(root / "a" / "aggregate.csv")
            .starts_with("d_h,n_layers,d_train,n_seeds,mean_val_acc,ci95_low,ci95_high,"
                         "majority_label\n"));
}

TEST_CASE("sweep: shared runs directory") {
  const auto root = scratch("shared");
  auto cfg = parse_sweep_config(kTiny);
  cfg.runs_dir = "../runs";
  run_sweep(cfg, root / "one");
  auto narrower = cfg;
  narrower.seeds = {1};
  const auto r = run_sweep(narrower, root / "two");
  CHECK(r.trained == 0);
  CHECK(r.skipped == 2);
  CHECK(load_sweep(root / "two").runs.size() == 2);
}

TEST_CASE("execute_run refuses to replace foreign directories") {
  const auto root = scratch("foreign");
  std::ofstream(root / "notes.txt") << "keep me";
  const auto spec = expand(parse_sweep_config(kTiny))[0];
  CHECK_THROWS_AS(execute_run(spec, root), InputError);
  CHECK(fs::exists(root / "notes.txt"));
}

TEST_CASE("reports: empty sweep writes nothing") {
  const auto root = scratch("empty");
  SweepOptions none;
  none.max_new_runs = 0;
  run_sweep(parse_sweep_config(kTiny), root / "s", none);
  CHECK_THROWS_AS(emit_report(root / "s", ReportKind::phase_diagram, root / "out"), InputError);
  CHECK((!fs::exists(root / "out") || fs::is_empty(root / "out")));
}

TEST_CASE("reports: files, verdicts and byte stability") {
  const auto root = scratch("report");
  run_sweep(parse_sweep_config(kTiny), root / "s");

  const auto v = emit_report(root / "s", ReportKind::phase_diagram, root / "pd");
  CHECK(fs::exists(root / "pd" / "phase_diagram.csv"));
  CHECK(fs::exists(root / "pd" / "phase_diagram.svg"));
  CHECK(fs::exists(root / "pd" / "verdict.json"));
  CHECK(v.contains("d_crit"));
  CHECK(nlohmann::json::parse(slurp(root / "pd" / "verdict.json")) == v);
  emit_report(root / "s", ReportKind::phase_diagram, root / "pd2");
  CHECK(slurp(root / "pd" / "phase_diagram.svg") == slurp(root / "pd2" / "phase_diagram.svg"));
  CHECK(slurp(root / "pd" / "phase_diagram.csv") == slurp(root / "pd2" / "phase_diagram.csv"));

  const auto dd = emit_report(root / "s", ReportKind::double_descent, root / "dd");
  CHECK(fs::exists(root / "dd" / "curves.csv"));
  CHECK(fs::exists(root / "dd" / "double_descent.svg"));
  CHECK(dd.contains("curves"));

  CHECK_THROWS_AS(emit_report(root / "s", ReportKind::trace, root / "tr"), InputError);
  ReportOptions opt;
  opt.run_id = expand(parse_sweep_config(kTiny))[0].id();
  const auto tr = emit_report(root / "s", ReportKind::trace, root / "tr", opt);
  CHECK(fs::exists(root / "tr" / "trace.svg"));
  CHECK(fs::exists(root / "tr" / "norm.svg"));
  CHECK(tr.contains("label"));

  CHECK_THROWS_AS(emit_report(root / "s", ReportKind::capacity, root / "cap"), InputError);
  CHECK(parse_report_kind("emergence") == ReportKind::emergence);
  CHECK_THROWS_AS(parse_report_kind("histogram"), InputError);
}

TEST_CASE("svg output is deterministic and escaped") {
  svg::LinePlot plot;
  plot.title = "a < b & c";
  plot.x_label = "d_h";
  plot.y_label = "val_acc";
  plot.series.push_back({"s", {1, 2, 3}, {0.1, 0.5, 0.9}, {}, {}});
  const auto a = svg::line_plot(plot);
  CHECK(a == svg::line_plot(plot));
  CHECK(a.starts_with("<svg"));
  CHECK(a.find("a &lt; b &amp; c") != std::string::npos);
  CHECK(a.find("a < b") == std::string::npos);
}
