#include "groklab/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "groklab/errors.hpp"
#include "groklab/svg.hpp"

namespace groklab::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- TOML configs -----------------------------------------------------------

namespace {

// Reads typed keys from one TOML table and rejects keys nobody asked for,
// so a misspelt option fails loudly instead of silently keeping its default.
class Section {
 public:
  Section(const toml::table* table, std::string name, const std::string& origin)
      : table_(table), name_(std::move(name)), origin_(origin) {}

  template <typename T>
  void read(const std::string& key, T& out) {
    const toml::node* node = lookup(key);
    if (node == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!node->is_boolean()) fail(key, "expected true or false");
      out = **node->as_boolean();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!node->is_string()) fail(key, "expected a string");
      out = **node->as_string();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (node->is_floating_point()) {
        out = **node->as_floating_point();
      } else if (node->is_integer()) {
        out = static_cast<T>(**node->as_integer());
      } else {
        fail(key, "expected a number");
      }
    } else {
      out = static_cast<T>(non_negative(key, *node));
    }
  }

  template <typename T>
  void read_list(const std::string& key, std::vector<T>& out) {
    const toml::node* node = lookup(key);
    if (node == nullptr) return;
    out.clear();
    if (const auto* arr = node->as_array()) {
      for (const auto& item : *arr) out.push_back(static_cast<T>(non_negative(key, item)));
    } else {
      out.push_back(static_cast<T>(non_negative(key, *node)));
    }
  }

  void finish() const {
    if (table_ == nullptr) return;
    for (const auto& [key, node] : *table_) {
      if (!used_.count(std::string(key.str()))) {
        throw ConfigError(origin_ + ": unknown key '" + name_ + "." + std::string(key.str()) + "'");
      }
    }
  }

 private:
  const toml::node* lookup(const std::string& key) {
    used_.insert(key);
    return table_ == nullptr ? nullptr : table_->get(key);
  }

  std::int64_t non_negative(const std::string& key, const toml::node& node) const {
    if (!node.is_integer()) fail(key, "expected a non-negative integer");
    const std::int64_t v = **node.as_integer();
    if (v < 0) fail(key, "expected a non-negative integer");
    return v;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(origin_ + ": " + name_ + "." + key + ": " + what);
  }

  const toml::table* table_;
  std::string name_;
  const std::string& origin_;
  std::set<std::string> used_;
};

}  // namespace

void SweepConfig::validate() const {
  auto fail = [&](const std::string& what) { throw ConfigError("sweep '" + name + "': " + what); };
  if (task.d_train.empty()) fail("task.d_train is empty");
  if (model.d_h.empty()) fail("model.d_h is empty");
  if (model.n_layers.empty()) fail("model.n_layers is empty");
  if (seeds.empty()) fail("sweep.seeds is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    fail("sweep.seeds contains duplicates");
  }
  if (jobs == 0) fail("sweep.jobs must be at least 1");
  if (task.modulus < 2) fail("task.modulus must be at least 2");
  for (std::size_t n : task.d_train) {
    if (n == 0) fail("task.d_train entries must be positive");
  }
  for (std::size_t layers : model.n_layers) {
    for (std::size_t d_h : model.d_h) {
      model::ModelConfig m;
      m.n_layers = layers;
      m.d_h = d_h;
      m.n_heads = model.n_heads;
      m.d_mlp = model.d_mlp;
      m.modulus = task.modulus;
      m.partitioned_ffn = model.partitioned_ffn;
      m.init_scale = model.init_scale;
      m.validate();
    }
  }
  if (model.partitioned_ffn && task.kind != tasks::TaskKind::multitask) {
    fail("model.partitioned_ffn needs task.kind = \"multitask\"");
  }
  train.validate();
  thresholds.validate();
}

SweepConfig parse_sweep_config(std::string_view text, const std::string& origin) {
  toml::table root;
  try {
    root = toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << origin << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(msg.str());
  }
  static const std::set<std::string> known = {"sweep", "task", "model", "train", "thresholds"};
  for (const auto& [key, node] : root) {
    if (!known.count(std::string(key.str()))) {
      throw ConfigError(origin + ": unknown section '" + std::string(key.str()) + "'");
    }
    if (!node.is_table()) {
      throw ConfigError(origin + ": '" + std::string(key.str()) + "' must be a table");
    }
  }
  SweepConfig cfg;
  {
    Section s(root["sweep"].as_table(), "sweep", origin);
    s.read("name", cfg.name);
    s.read_list("seeds", cfg.seeds);
    s.read("jobs", cfg.jobs);
    std::string runs_dir = cfg.runs_dir.string();
    s.read("runs_dir", runs_dir);
    cfg.runs_dir = runs_dir;
    s.finish();
  }
  {
    Section s(root["task"].as_table(), "task", origin);
    std::string kind(tasks::to_string(cfg.task.kind));
    s.read("kind", kind);
    try {
      cfg.task.kind = tasks::parse_task_kind(kind);
    } catch (const InputError& e) {
      throw ConfigError(origin + ": task.kind: " + e.what());
    }
    s.read("modulus", cfg.task.modulus);
    s.read_list("d_train", cfg.task.d_train);
    s.read("n_memo", cfg.task.n_memo);
    s.read("commutative", cfg.task.commutative);
    s.finish();
  }
  {
    Section s(root["model"].as_table(), "model", origin);
    s.read_list("d_h", cfg.model.d_h);
    s.read_list("n_layers", cfg.model.n_layers);
    s.read("n_heads", cfg.model.n_heads);
    s.read("d_mlp", cfg.model.d_mlp);
    s.read("partitioned_ffn", cfg.model.partitioned_ffn);
    s.read("init_scale", cfg.model.init_scale);
    s.finish();
  }
  {
    Section s(root["train"].as_table(), "train", origin);
    auto& t = cfg.train;
    s.read("learning_rate", t.learning_rate);
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("epsilon", t.epsilon);
    s.read("weight_decay", t.weight_decay);
    s.read("decay_embeddings", t.decay_embeddings);
    s.read("max_epochs", t.max_epochs);
    s.read("eval_every", t.eval_every);
    s.read("stop_val_acc", t.stop_val_acc);
    s.read("stop_patience", t.stop_patience);
    s.read("save_checkpoint", t.save_checkpoint);
    s.finish();
  }
  {
    Section s(root["thresholds"].as_table(), "thresholds", origin);
    auto& th = cfg.thresholds;
    s.read("train_perfect", th.train_perfect);
    s.read("generalized", th.generalized);
    s.read("negligible", th.negligible);
    s.read("grok_delay", th.grok_delay);
    s.read("dip_depth", th.dip_depth);
    s.read("plateau_window", th.plateau_window);
    s.read("plateau_tolerance", th.plateau_tolerance);
    s.finish();
  }
  cfg.validate();
  return cfg;
}

SweepConfig load_sweep_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read config file '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_sweep_config(text.str(), path.string());
}

json to_json(const SweepConfig& cfg) {
  return {{"name", cfg.name},
          {"task",
           {{"kind", tasks::to_string(cfg.task.kind)},
            {"modulus", cfg.task.modulus},
            {"d_train", cfg.task.d_train},
            {"n_memo", cfg.task.n_memo},
            {"commutative", cfg.task.commutative}}},
          {"model",
           {{"d_h", cfg.model.d_h},
            {"n_layers", cfg.model.n_layers},
            {"n_heads", cfg.model.n_heads},
            {"d_mlp", cfg.model.d_mlp},
            {"partitioned_ffn", cfg.model.partitioned_ffn},
            {"init_scale", cfg.model.init_scale}}},
          {"train", trainer::to_json(cfg.train)},
          {"thresholds", dynamics::to_json(cfg.thresholds)},
          {"seeds", cfg.seeds},
          {"jobs", cfg.jobs},
          {"runs_dir", cfg.runs_dir.string()}};
}

// ---- runs -------------------------------------------------------------------

json RunSpec::to_json() const {
  return {{"model", model::to_json(model)},
          {"task",
           {{"kind", tasks::to_string(kind)},
            {"d_train", d_train},
            {"n_memo", n_memo},
            {"commutative", commutative}}},
          {"train", trainer::to_json(train)},
          {"seed", seed}};
}

RunSpec RunSpec::from_json(const json& j) {
  RunSpec spec;
  try {
    spec.model = model::model_config_from_json(j.at("model"));
    const auto& task = j.at("task");
    spec.kind = tasks::parse_task_kind(task.at("kind").get<std::string>());
    spec.d_train = task.at("d_train").get<std::size_t>();
    spec.n_memo = task.value("n_memo", std::size_t{0});
    spec.commutative = task.value("commutative", false);
    spec.train = trainer::train_config_from_json(j.at("train"));
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw InputError(std::string("run config: ") + e.what());
  }
  return spec;
}

std::string RunSpec::id() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<RunSpec> expand(const SweepConfig& cfg) {
  cfg.validate();
  std::vector<RunSpec> out;
  for (std::size_t layers : cfg.model.n_layers) {
    for (std::size_t d_h : cfg.model.d_h) {
      for (std::size_t d_train : cfg.task.d_train) {
        for (std::uint64_t seed : cfg.seeds) {
          RunSpec spec;
          spec.model.n_layers = layers;
          spec.model.d_h = d_h;
          spec.model.n_heads = cfg.model.n_heads;
          spec.model.d_mlp = cfg.model.d_mlp;
          spec.model.modulus = cfg.task.modulus;
          spec.model.partitioned_ffn = cfg.model.partitioned_ffn;
          spec.model.init_scale = cfg.model.init_scale;
          spec.model.init_seed = seed;
          spec.kind = cfg.task.kind;
          spec.d_train = d_train;
          // Fields a task ignores stay at zero so they do not split run ids.
          spec.n_memo = cfg.task.kind == tasks::TaskKind::multitask ? cfg.task.n_memo : 0;
          spec.commutative =
              cfg.task.kind == tasks::TaskKind::random_memo && cfg.task.commutative;
          spec.train = cfg.train;
          spec.train.seed = seed;
          spec.seed = seed;
          out.push_back(spec);
        }
      }
    }
  }
  return out;
}

tasks::Dataset make_dataset(const RunSpec& spec) {
  const auto p = spec.model.modulus;
  switch (spec.kind) {
    case tasks::TaskKind::mod_add: return tasks::gen_mod_add(p, spec.d_train, spec.seed);
    case tasks::TaskKind::mod_poly2: return tasks::gen_mod_poly2(p, spec.d_train, spec.seed);
    case tasks::TaskKind::random_memo:
      return tasks::gen_random_memo(p, spec.seed, tasks::Operator::plus, spec.commutative,
                                    spec.d_train);
    case tasks::TaskKind::multitask:
      return tasks::gen_multitask(p, spec.d_train, spec.n_memo, spec.seed);
  }
  throw InputError("unknown task kind");
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::pending: return "pending";
    case RunStatus::running: return "running";
    case RunStatus::done: return "done";
    case RunStatus::diverged: return "diverged";
    case RunStatus::failed: return "failed";
  }
  return "pending";
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + tmp.string() + "'");
    out << contents;
    if (!out.flush()) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(); }

json record_json(const trainer::EvalRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"val_loss", optional_json(r.val_loss)},
          {"train_acc", r.train_acc},
          {"val_acc", optional_json(r.val_acc)},
          {"param_norm", r.param_norm},
          {"memo_acc", optional_json(r.memo_acc)}};
}

std::optional<dynamics::DynamicsLabel> try_classify(const trainer::RunTrace& trace,
                                                    const dynamics::Thresholds& th) {
  if (trace.records.size() < 2) return std::nullopt;
  return dynamics::classify(trace, th);
}

}  // namespace

bool run_complete(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_regular_file(dir / "summary.json", ec) || !fs::is_regular_file(dir / "config.json", ec)) {
    return false;
  }
  try {
    trainer::load_metrics_csv(dir / "metrics.csv");
  } catch (const Error&) {
    return false;
  }
  return true;
}

std::optional<RunManifest> execute_run(const RunSpec& spec, const fs::path& dir,
                                       const dynamics::Thresholds& th,
                                       const std::atomic<bool>* cancel) {
  const std::string id = spec.id();
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !fs::exists(dir / "config.json", ec)) {
    throw InputError("refusing to replace '" + dir.string() + "': not a run directory");
  }
  const tasks::Dataset ds = make_dataset(spec);
  model::Parameters final_params;
  trainer::Progress progress;
  if (cancel != nullptr) progress = [cancel](const trainer::EvalRecord&) { return !cancel->load(); };
  const trainer::RunTrace trace = trainer::train_run(spec.model, ds, spec.train, progress,
                                                     &final_params);
  const bool reached_end = !trace.records.empty() &&
                           trace.records.back().epoch == spec.train.max_epochs;
  if (cancel != nullptr && cancel->load() && !trace.stopped_early && !trace.diverged &&
      !reached_end) {
    return std::nullopt;
  }

  const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
  fs::create_directories(parent);
  const fs::path stage = parent / (".stage-" + id + "-" + dir.filename().string());
  fs::remove_all(stage);
  fs::create_directories(stage);

  json config = {{"id", id}, {"spec", spec.to_json()}, {"thresholds", dynamics::to_json(th)}};
  write_file_atomic(stage / "config.json", config.dump(2) + "\n");
  {
    std::ostringstream csv;
    trainer::write_metrics_csv(trace, csv);
    write_file_atomic(stage / "metrics.csv", csv.str());
  }
  const auto label = try_classify(trace, th);
  std::optional<double> best_val;
  for (const auto& r : trace.records) {
    if (r.val_acc && (!best_val || *r.val_acc > *best_val)) best_val = r.val_acc;
  }
  const RunStatus status = trace.diverged ? RunStatus::diverged : RunStatus::done;
  json summary = {
      {"id", id},
      {"status", to_string(status)},
      {"diverged", trace.diverged},
      {"stopped_early", trace.stopped_early},
      {"evaluations", trace.records.size()},
      {"final", trace.records.empty() ? json() : record_json(trace.records.back())},
      {"best_val_acc", optional_json(best_val)},
      {"label", label ? std::string(dynamics::to_string(label->label)) : "unclassified"},
      {"evidence", label ? dynamics::to_json(*label) : json()},
      {"param_count", model::count_parameters(spec.model)},
      {"embedding_param_count", model::count_embedding_parameters(spec.model)},
      {"task", trace.config.at("task")}};
  if (spec.train.save_checkpoint && !trace.diverged) {
    model::save_checkpoint(final_params, spec.model, stage / "checkpoint");
  }
  // summary.json marks completion, so it is written last.
  write_file_atomic(stage / "summary.json", summary.dump(2) + "\n");

  fs::remove_all(dir);
  fs::rename(stage, dir);
  return RunManifest{id, status, dir, std::nullopt};
}

// ---- sweeps -----------------------------------------------------------------

namespace {

fs::path runs_root(const fs::path& sweep_dir, const fs::path& runs_dir) {
  return runs_dir.is_absolute() ? runs_dir : sweep_dir / runs_dir;
}

// All manifest appends go through one object so lines never interleave.
class ManifestWriter {
 public:
  explicit ManifestWriter(const fs::path& path) : out_(path, std::ios::app | std::ios::binary) {
    if (!out_) throw InputError("cannot open '" + path.string() + "' for appending");
  }
  void append(const json& event) {
    std::lock_guard lock(mutex_);
    out_ << event.dump() << '\n';
    out_.flush();
  }

 private:
  std::mutex mutex_;
  std::ofstream out_;
};

// `runs_dir` as written in the config, so the path resolves from the sweep.
json run_event(const RunSpec& spec, const std::string& id, RunStatus status,
               const fs::path& runs_dir) {
  return {{"id", id},
          {"status", to_string(status)},
          {"dir", (runs_dir / id).generic_string()},
          {"d_h", spec.model.d_h},
          {"n_layers", spec.model.n_layers},
          {"d_train", spec.d_train},
          {"seed", spec.seed}};
}

std::string number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 12);
  return std::string(buf, res.ptr);
}

}  // namespace

SweepResult run_sweep(const SweepConfig& cfg, const fs::path& out_dir, const SweepOptions& options) {
  const auto specs = expand(cfg);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw InputError("cannot create sweep directory '" + out_dir.string() + "'");
  }
  const fs::path root = runs_root(out_dir, cfg.runs_dir);
  fs::create_directories(root, ec);
  if (ec) throw InputError("cannot create run directory '" + root.string() + "'");

  std::vector<std::string> ids;
  for (const auto& s : specs) ids.push_back(s.id());
  write_file_atomic(out_dir / "sweep.json",
                    json{{"config", to_json(cfg)}, {"runs", ids}}.dump(2) + "\n");

  std::mutex log_mutex;
  auto log = [&](const std::string& line) {
    if (!options.log) return;
    std::lock_guard lock(log_mutex);
    options.log(line);
  };

  SweepResult result;
  result.dir = out_dir;
  result.total = specs.size();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (run_complete(root / ids[i])) {
      ++result.skipped;
    } else {
      todo.push_back(i);
    }
  }
  log("sweep '" + cfg.name + "': " + std::to_string(specs.size()) + " runs, " +
      std::to_string(result.skipped) + " already finished");

  ManifestWriter manifest(out_dir / "manifest.jsonl");
  std::map<std::string, std::string> errors;
  std::mutex result_mutex;
  std::atomic<std::size_t> next{0}, started{0};
  const std::size_t budget = options.max_new_runs.value_or(todo.size());

  auto worker = [&] {
    for (;;) {
      if (options.cancel != nullptr && options.cancel->load()) return;
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      if (started.fetch_add(1) >= budget) return;
      const RunSpec& spec = specs[todo[k]];
      const std::string& id = ids[todo[k]];
      manifest.append(run_event(spec, id, RunStatus::running, cfg.runs_dir));
      log("run " + id + " d_h=" + std::to_string(spec.model.d_h) + " layers=" +
          std::to_string(spec.model.n_layers) + " d_train=" + std::to_string(spec.d_train) +
          " seed=" + std::to_string(spec.seed));
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto done = execute_run(spec, root / id, cfg.thresholds, options.cancel);
        if (!done) {
          manifest.append(run_event(spec, id, RunStatus::pending, cfg.runs_dir));
          continue;
        }
        auto event = run_event(spec, id, done->status, cfg.runs_dir);
        event["wall_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        manifest.append(event);
        std::lock_guard lock(result_mutex);
        ++result.trained;
        if (done->status == RunStatus::diverged) ++result.diverged;
      } catch (const std::exception& e) {
        auto event = run_event(spec, id, RunStatus::failed, cfg.runs_dir);
        event["error"] = e.what();
        manifest.append(event);
        log("run " + id + " failed: " + e.what());
        std::lock_guard lock(result_mutex);
        ++result.failed;
        errors[id] = e.what();
      }
    }
  };

  const std::size_t jobs = std::max<std::size_t>(
      1, std::min(options.jobs != 0 ? options.jobs : cfg.jobs, std::max<std::size_t>(todo.size(), 1)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  json failures = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto it = errors.find(ids[i]);
    if (it != errors.end()) {
      failures.push_back({{"id", ids[i]}, {"status", "failed"}, {"error", it->second}});
      continue;
    }
    const fs::path dir = root / ids[i];
    if (!run_complete(dir)) continue;
    std::ifstream in(dir / "summary.json");
    const json summary = json::parse(in, nullptr, false);
    if (!summary.is_discarded() && summary.value("diverged", false)) {
      failures.push_back({{"id", ids[i]}, {"status", "diverged"}, {"error", nullptr}});
    }
  }
  write_file_atomic(out_dir / "failures.json", failures.dump(2) + "\n");

  std::size_t finished = 0;
  for (const auto& id : ids) finished += run_complete(root / id);
  result.remaining = specs.size() - finished - errors.size();
  if (finished > 0) write_aggregate(load_sweep(out_dir), out_dir / "aggregate.csv");
  log("sweep '" + cfg.name + "': trained " + std::to_string(result.trained) + ", failed " +
      std::to_string(result.failed) + ", remaining " + std::to_string(result.remaining));
  return result;
}

// ---- loading ----------------------------------------------------------------

namespace {

LoadedRun load_run(const fs::path& dir, const dynamics::Thresholds& th) {
  std::ifstream in(dir / "config.json");
  const json config = json::parse(in, nullptr, false);
  if (config.is_discarded()) throw InputError("malformed '" + (dir / "config.json").string() + "'");
  std::ifstream sin(dir / "summary.json");
  const json summary = json::parse(sin, nullptr, false);
  if (summary.is_discarded()) throw InputError("malformed '" + (dir / "summary.json").string() + "'");

  LoadedRun run;
  run.spec = RunSpec::from_json(config.at("spec"));
  run.id = config.value("id", run.spec.id());
  run.dir = dir;
  run.summary = summary;
  const auto trace = trainer::load_metrics_csv(dir / "metrics.csv");
  auto& o = run.outcome;
  o.d_h = run.spec.model.d_h;
  o.n_layers = run.spec.model.n_layers;
  o.d_train = run.spec.d_train;
  o.seed = run.spec.seed;
  o.param_count = model::count_parameters(run.spec.model);
  if (!trace.records.empty()) {
    o.final_train_acc = trace.records.back().train_acc;
    o.final_val_acc = trace.records.back().val_acc;
  }
  if (const auto label = try_classify(trace, th)) o.label = label->label;
  return run;
}

}  // namespace

LoadedSweep load_sweep(const fs::path& dir) {
  LoadedSweep out;
  std::error_code ec;
  if (fs::is_regular_file(dir / "sweep.json", ec)) {
    std::ifstream in(dir / "sweep.json");
    const json sweep = json::parse(in, nullptr, false);
    if (sweep.is_discarded() || !sweep.contains("config") || !sweep.contains("runs")) {
      throw InputError("malformed '" + (dir / "sweep.json").string() + "'");
    }
    out.config = sweep["config"];
    out.thresholds = dynamics::thresholds_from_json(out.config.value("thresholds", json::object()));
    const fs::path root = runs_root(dir, out.config.value("runs_dir", std::string("runs")));
    for (const auto& id_json : sweep["runs"]) {
      const auto id = id_json.get<std::string>();
      if (run_complete(root / id)) {
        out.runs.push_back(load_run(root / id, out.thresholds));
      } else {
        out.missing.push_back(id);
      }
    }
    return out;
  }
  if (run_complete(dir)) {
    std::ifstream in(dir / "config.json");
    const json config = json::parse(in, nullptr, false);
    if (!config.is_discarded() && config.contains("thresholds")) {
      out.thresholds = dynamics::thresholds_from_json(config["thresholds"]);
    }
    out.config = config;
    out.runs.push_back(load_run(dir, out.thresholds));
    return out;
  }
  throw InputError("'" + dir.string() + "' is neither a sweep nor a finished run directory");
}

namespace {

std::vector<dynamics::RunOutcome> outcomes_of(const LoadedSweep& sweep) {
  std::vector<dynamics::RunOutcome> out;
  for (const auto& r : sweep.runs) out.push_back(r.outcome);
  return out;
}

std::string opt_number(bool present, double v) { return present ? number(v) : std::string(); }

}  // namespace

void write_aggregate(const LoadedSweep& sweep, const fs::path& path) {
  const auto cells = dynamics::aggregate_cells(outcomes_of(sweep));
  std::string csv = "d_h,n_layers,d_train,n_seeds,mean_val_acc,ci95_low,ci95_high,majority_label\n";
  for (const auto& c : cells) {
    const bool has = c.val_acc.n > 0;
    csv += std::to_string(c.d_h) + "," + std::to_string(c.n_layers) + "," +
           std::to_string(c.d_train) + "," + std::to_string(c.runs.size()) + "," +
           opt_number(has, c.val_acc.mean) + "," + opt_number(has, c.val_acc.low) + "," +
           opt_number(has, c.val_acc.high) + "," + std::string(dynamics::to_string(c.majority)) +
           "\n";
  }
  write_file_atomic(path, csv);
}

// ---- reports ----------------------------------------------------------------

std::string_view to_string(ReportKind k) {
  switch (k) {
    case ReportKind::phase_diagram: return "phase_diagram";
    case ReportKind::double_descent: return "double_descent";
    case ReportKind::capacity: return "capacity";
    case ReportKind::emergence: return "emergence";
    case ReportKind::trace: return "trace";
  }
  return "trace";
}

ReportKind parse_report_kind(std::string_view s) {
  for (auto k : {ReportKind::phase_diagram, ReportKind::double_descent, ReportKind::capacity,
                 ReportKind::emergence, ReportKind::trace}) {
    if (to_string(k) == s) return k;
  }
  throw InputError("unknown report kind '" + std::string(s) +
                   "' (expected phase_diagram, double_descent, capacity, emergence or trace)");
}

namespace {

using Files = std::vector<std::pair<std::string, std::string>>;

char label_letter(dynamics::Dynamics d) {
  switch (d) {
    case dynamics::Dynamics::progression: return 'P';
    case dynamics::Dynamics::ungrokking: return 'U';
    case dynamics::Dynamics::grokking: return 'G';
    case dynamics::Dynamics::semi_grokking: return 'S';
    case dynamics::Dynamics::unclassified: return '?';
  }
  return '?';
}

json missing_json(const LoadedSweep& sweep) { return sweep.missing; }

json phase_report(const LoadedSweep& sweep, const ReportOptions& options, Files& files) {
  std::vector<std::pair<std::size_t, std::size_t>> expected;
  if (sweep.config.contains("model") && sweep.config.contains("task")) {
    for (std::size_t d_h : sweep.config["model"].value("d_h", std::vector<std::size_t>{})) {
      for (std::size_t n : sweep.config["task"].value("d_train", std::vector<std::size_t>{})) {
        expected.emplace_back(d_h, n);
      }
    }
  }
  std::vector<dynamics::CapacityRun> capacity_runs;
  if (options.capacity_sweep) {
    for (const auto& r : load_sweep(*options.capacity_sweep).runs) {
      capacity_runs.push_back({r.outcome.d_h, r.outcome.final_train_acc, r.outcome.d_train});
    }
  }
  const auto outcomes = outcomes_of(sweep);
  const auto pd = dynamics::build_phase_diagram(outcomes, sweep.thresholds, capacity_runs, expected);

  std::string csv = "d_h,n_layers,d_train,n_seeds,mean_val_acc,label\n";
  std::vector<std::size_t> xs, ys;
  for (const auto& c : pd.cells) {
    const bool has = !c.missing && c.val_acc.n > 0;
    csv += std::to_string(c.d_h) + "," + std::to_string(c.n_layers) + "," +
           std::to_string(c.d_train) + "," + std::to_string(c.runs.size()) + "," +
           opt_number(has, c.val_acc.mean) + "," +
           (c.missing ? std::string("missing") : std::string(dynamics::to_string(c.majority))) +
           "\n";
    xs.push_back(c.d_train);
    ys.push_back(c.d_h);
  }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());

  svg::Heatmap map;
  map.title = "Final validation accuracy by model and dataset size";
  map.x_label = "training examples";
  map.y_label = "hidden size";
  for (auto x : xs) map.x_ticks.push_back(std::to_string(x));
  for (auto y : ys) map.y_ticks.push_back(std::to_string(y));
  map.values.assign(xs.size() * ys.size(), std::nan(""));
  map.cell_text.assign(xs.size() * ys.size(), "");
  for (const auto& c : pd.cells) {
    if (c.missing || c.val_acc.n == 0) continue;
    const auto xi = std::lower_bound(xs.begin(), xs.end(), c.d_train) - xs.begin();
    const auto yi = std::lower_bound(ys.begin(), ys.end(), c.d_h) - ys.begin();
    const std::size_t k = static_cast<std::size_t>(yi) * xs.size() + static_cast<std::size_t>(xi);
    map.values[k] = c.val_acc.mean;
    char text[32];
    std::snprintf(text, sizeof text, "%c %.2f", label_letter(c.majority), c.val_acc.mean);
    map.cell_text[k] = text;
  }

  json d_crit = json::array();
  for (const auto& [d_h, dc] : pd.d_crit) {
    d_crit.push_back({{"d_h", d_h}, {"d_crit", dc ? json(*dc) : json()}});
  }
  json missing_cells = json::array();
  for (const auto& c : pd.cells) {
    if (c.missing) missing_cells.push_back({{"d_h", c.d_h}, {"d_train", c.d_train}});
  }
  json verdict = {{"kind", "phase_diagram"},
                  {"d_crit", d_crit},
                  {"missing_cells", missing_cells},
                  {"missing_runs", missing_json(sweep)}};
  if (options.capacity_sweep) {
    verdict["capacity_crossing_d_h"] =
        pd.crossing_d_h ? json(*pd.crossing_d_h) : json("outside grid");
  }
  files.emplace_back("phase_diagram.csv", csv);
  files.emplace_back("phase_diagram.svg", svg::heatmap(map));
  return verdict;
}

json double_descent_report(const LoadedSweep& sweep, const ReportOptions& options, Files& files) {
  const auto cells = dynamics::aggregate_cells(outcomes_of(sweep));
  std::map<std::pair<std::size_t, std::size_t>, std::vector<const dynamics::PhaseCell*>> curves;
  for (const auto& c : cells) {
    if (c.val_acc.n > 0) curves[{c.n_layers, c.d_train}].push_back(&c);
  }
  if (curves.empty()) throw InputError("double_descent report: no runs with validation accuracy");
  std::string csv = "n_layers,d_train,d_h,n_seeds,mean_val_acc,ci95_low,ci95_high\n";
  svg::LinePlot plot;
  plot.title = "Validation accuracy against hidden size";
  plot.x_label = "hidden size";
  plot.y_label = "final validation accuracy";
  json verdicts = json::array();
  for (const auto& [key, points] : curves) {
    svg::Series s;
    s.name = "D=" + std::to_string(key.second) + (curves.size() > 1 && key.first != 1
                                                       ? " L=" + std::to_string(key.first)
                                                       : "");
    std::vector<dynamics::CurvePoint> curve;
    for (const auto* c : points) {
      csv += std::to_string(c->n_layers) + "," + std::to_string(c->d_train) + "," +
             std::to_string(c->d_h) + "," + std::to_string(c->runs.size()) + "," +
             number(c->val_acc.mean) + "," + number(c->val_acc.low) + "," +
             number(c->val_acc.high) + "\n";
      s.x.push_back(static_cast<double>(c->d_h));
      s.y.push_back(c->val_acc.mean);
      s.band_low.push_back(c->val_acc.low);
      s.band_high.push_back(c->val_acc.high);
      curve.push_back({static_cast<double>(c->d_h), c->val_acc.mean});
    }
    plot.series.push_back(std::move(s));
    json v = {{"n_layers", key.first}, {"d_train", key.second}, {"dip_depth", dynamics::dip_depth(curve)}};
    if (curve.size() < 3) {
      v["verdict"] = "insufficient";
    } else {
      const auto dd = dynamics::detect_double_descent(curve, options.dip_delta);
      v["verdict"] = dd.detected ? "detected" : "none";
      if (dd.detected) {
        v["size_low"] = dd.size_low;
        v["size_high"] = dd.size_high;
        v["depth"] = dd.depth;
        v["dip_min"] = dd.dip_min;
      }
    }
    verdicts.push_back(v);
  }
  files.emplace_back("curves.csv", csv);
  files.emplace_back("double_descent.svg", svg::line_plot(plot));
  return {{"kind", "double_descent"},
          {"delta", options.dip_delta},
          {"curves", verdicts},
          {"missing_runs", missing_json(sweep)}};
}

json capacity_report(const LoadedSweep& sweep, Files& files) {
  std::vector<dynamics::CapacityRun> runs;
  std::size_t full_set = 0;
  for (const auto& r : sweep.runs) {
    if (r.spec.kind != tasks::TaskKind::random_memo) {
      throw InputError("capacity report: run " + r.id + " is not a random-label run");
    }
    const std::size_t p = r.spec.model.modulus;
    full_set = p * p;
    runs.push_back({r.outcome.d_h, r.outcome.final_train_acc, r.outcome.d_train});
  }
  const auto points = dynamics::estimate_capacity(runs, full_set);
  std::string csv =
      "d_h,n_seeds,mean_capacity,capacity_ci95_low,capacity_ci95_high,mean_train_acc,acc_ci95_low,"
      "acc_ci95_high\n";
  svg::Series s;
  s.name = "memorized examples";
  json pts = json::array();
  bool increasing = true;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    csv += std::to_string(p.d_h) + "," + std::to_string(p.capacity.n) + "," +
           number(p.capacity.mean) + "," + number(p.capacity.low) + "," + number(p.capacity.high) +
           "," + number(p.accuracy.mean) + "," + number(p.accuracy.low) + "," +
           number(p.accuracy.high) + "\n";
    s.x.push_back(static_cast<double>(p.d_h));
    s.y.push_back(p.capacity.mean);
    s.band_low.push_back(p.capacity.low);
    s.band_high.push_back(p.capacity.high);
    pts.push_back({{"d_h", p.d_h},
                   {"n_seeds", p.capacity.n},
                   {"mean_capacity", p.capacity.mean},
                   {"ci95_half_width", p.capacity.half_width()},
                   {"mean_train_acc", p.accuracy.mean}});
    if (i > 0 && !(p.capacity.mean > points[i - 1].capacity.mean)) increasing = false;
  }
  svg::LinePlot plot;
  plot.title = "Memorization capacity against hidden size";
  plot.x_label = "hidden size";
  plot.y_label = "memorized examples";
  plot.y_low = 0.0;
  plot.y_high = static_cast<double>(full_set);
  plot.series.push_back(std::move(s));
  files.emplace_back("curves.csv", csv);
  files.emplace_back("capacity.svg", svg::line_plot(plot));
  return {{"kind", "capacity"},
          {"set_size", full_set},
          {"points", pts},
          {"strictly_increasing", increasing},
          {"missing_runs", missing_json(sweep)}};
}

json emergence_report(const LoadedSweep& sweep, const ReportOptions& options, Files& files) {
  struct Point {
    std::size_t n_layers, d_h, params, non_embedding;
    std::vector<double> val, memo;
  };
  std::map<std::pair<std::size_t, std::size_t>, Point> by_size;
  std::uint32_t modulus = 113;
  for (const auto& r : sweep.runs) {
    modulus = r.spec.model.modulus;
    auto& p = by_size[{r.spec.model.n_layers, r.spec.model.d_h}];
    p.n_layers = r.spec.model.n_layers;
    p.d_h = r.spec.model.d_h;
    p.params = model::count_parameters(r.spec.model);
    p.non_embedding = p.params - model::count_embedding_parameters(r.spec.model);
    if (r.outcome.final_val_acc) p.val.push_back(*r.outcome.final_val_acc);
    const auto& fin = r.summary.value("final", json::object());
    if (fin.contains("memo_acc") && fin["memo_acc"].is_number()) {
      p.memo.push_back(fin["memo_acc"].get<double>());
    }
  }
  std::vector<Point> points;
  for (auto& [k, p] : by_size) {
    if (!p.val.empty()) points.push_back(p);
  }
  if (points.empty()) throw InputError("emergence report: no runs with validation accuracy");
  std::sort(points.begin(), points.end(),
            [](const Point& a, const Point& b) { return a.params < b.params; });

  model::ModelConfig base;
  base.modulus = modulus;
  const double baseline = options.emergence_baseline > 0
                              ? options.emergence_baseline
                              : static_cast<double>(model::count_parameters(base));
  const double baseline_non_embedding =
      static_cast<double>(model::count_parameters(base) - model::count_embedding_parameters(base));

  std::string csv = "n_layers,d_h,param_count,non_embedding_params,n_seeds,best_val_acc,mean_val_acc,mean_memo_acc\n";
  std::vector<dynamics::CurvePoint> curve;
  svg::Series best, mean;
  best.name = "best seed";
  mean.name = "seed mean";
  for (const auto& p : points) {
    const double b = *std::max_element(p.val.begin(), p.val.end());
    const double m = dynamics::mean_ci95(p.val).mean;
    csv += std::to_string(p.n_layers) + "," + std::to_string(p.d_h) + "," +
           std::to_string(p.params) + "," + std::to_string(p.non_embedding) + "," +
           std::to_string(p.val.size()) + "," + number(b) + "," + number(m) + "," +
           opt_number(!p.memo.empty(), p.memo.empty() ? 0.0 : dynamics::mean_ci95(p.memo).mean) +
           "\n";
    curve.push_back({static_cast<double>(p.params), b});
    best.x.push_back(static_cast<double>(p.params));
    best.y.push_back(b);
    mean.x.push_back(static_cast<double>(p.params));
    mean.y.push_back(m);
  }
  const auto em = dynamics::estimate_emergence(curve, options.emergence_threshold, baseline);
  json verdict = {{"kind", "emergence"},
                  {"threshold", options.emergence_threshold},
                  {"baseline_params", baseline},
                  {"baseline_non_embedding_params", baseline_non_embedding},
                  {"emerged", em.has_value()},
                  {"missing_runs", missing_json(sweep)}};
  if (em) {
    verdict["param_count"] = em->param_count;
    verdict["ratio"] = em->ratio;
    for (const auto& p : points) {
      if (static_cast<double>(p.params) == em->param_count) {
        verdict["non_embedding_params"] = p.non_embedding;
        verdict["ratio_non_embedding"] = static_cast<double>(p.non_embedding) / baseline_non_embedding;
      }
    }
  } else {
    verdict["param_count"] = nullptr;
    verdict["ratio"] = nullptr;
  }
  svg::LinePlot plot;
  plot.title = "Validation accuracy against parameter count";
  plot.x_label = "parameters";
  plot.y_label = "final validation accuracy";
  plot.log_x = true;
  plot.series = {best, mean};
  files.emplace_back("curves.csv", csv);
  files.emplace_back("emergence.svg", svg::line_plot(plot));
  return verdict;
}

json trace_report(const LoadedSweep& sweep, const ReportOptions& options, Files& files) {
  const LoadedRun* run = nullptr;
  if (options.run_id) {
    for (const auto& r : sweep.runs) {
      if (r.id == *options.run_id) run = &r;
    }
    if (run == nullptr) throw InputError("trace report: no finished run '" + *options.run_id + "'");
  } else if (sweep.runs.size() == 1) {
    run = &sweep.runs.front();
  } else {
    throw InputError("trace report: sweep has " + std::to_string(sweep.runs.size()) +
                     " runs; pick one with --run-id");
  }
  const auto trace = trainer::load_metrics_csv(run->dir / "metrics.csv");
  std::ostringstream csv;
  trainer::write_metrics_csv(trace, csv);

  // Keep plots a manageable size: at most ~1000 points per series.
  const std::size_t stride = std::max<std::size_t>(1, trace.records.size() / 1000);
  svg::Series train, val, memo, norm;
  train.name = "train";
  val.name = "validation";
  memo.name = "memorization";
  norm.name = "parameter norm";
  for (std::size_t i = 0; i < trace.records.size(); ++i) {
    if (i % stride != 0 && i + 1 != trace.records.size()) continue;
    const auto& r = trace.records[i];
    const double e = static_cast<double>(r.epoch);
    train.x.push_back(e);
    train.y.push_back(r.train_acc);
    if (r.val_acc) {
      val.x.push_back(e);
      val.y.push_back(*r.val_acc);
    }
    if (r.memo_acc) {
      memo.x.push_back(e);
      memo.y.push_back(*r.memo_acc);
    }
    norm.x.push_back(e);
    norm.y.push_back(r.param_norm);
  }
  svg::LinePlot acc;
  acc.title = "Accuracy during training (run " + run->id + ")";
  acc.x_label = "epoch";
  acc.y_label = "accuracy";
  acc.series.push_back(train);
  if (!val.x.empty()) acc.series.push_back(val);
  if (!memo.x.empty()) acc.series.push_back(memo);
  svg::LinePlot norm_plot;
  norm_plot.title = "Parameter norm during training (run " + run->id + ")";
  norm_plot.x_label = "epoch";
  norm_plot.y_label = "L2 norm";
  norm_plot.y_low = norm_plot.y_high = 0.0;
  norm_plot.series.push_back(norm);

  files.emplace_back("curves.csv", csv.str());
  files.emplace_back("trace.svg", svg::line_plot(acc));
  files.emplace_back("norm.svg", svg::line_plot(norm_plot));
  json verdict = {{"kind", "trace"}, {"id", run->id}};
  if (const auto label = try_classify(trace, sweep.thresholds)) {
    verdict["label"] = dynamics::to_string(label->label);
    verdict["evidence"] = dynamics::to_json(*label);
  } else {
    verdict["label"] = "unclassified";
    verdict["evidence"] = nullptr;
  }
  return verdict;
}

}  // namespace

json emit_report(const fs::path& sweep_dir, ReportKind kind, const fs::path& out_dir,
                 const ReportOptions& options) {
  const LoadedSweep sweep = load_sweep(sweep_dir);
  if (sweep.runs.empty()) {
    throw InputError("'" + sweep_dir.string() + "' has no finished runs (" +
                     std::to_string(sweep.missing.size()) + " missing)");
  }
  // Everything is rendered in memory first so a failure leaves no files.
  Files files;
  json verdict;
  switch (kind) {
    case ReportKind::phase_diagram: verdict = phase_report(sweep, options, files); break;
    case ReportKind::double_descent: verdict = double_descent_report(sweep, options, files); break;
    case ReportKind::capacity: verdict = capacity_report(sweep, files); break;
    case ReportKind::emergence: verdict = emergence_report(sweep, options, files); break;
    case ReportKind::trace: verdict = trace_report(sweep, options, files); break;
  }
  files.emplace_back("verdict.json", verdict.dump(2) + "\n");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw InputError("cannot create report directory '" + out_dir.string() + "'");
  for (const auto& [name, contents] : files) write_file_atomic(out_dir / name, contents);
  return verdict;
}

}  // namespace groklab::harness
