#include "groklab/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <istream>
#include <mutex>
#include <ostream>
#include <sstream>

#include "groklab/errors.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace groklab::trainer {

using model::Parameters;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    fail("betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (eval_every == 0) fail("eval_every must be at least 1");
  if (stop_patience == 0) fail("stop_patience must be at least 1");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"epsilon", cfg.epsilon},
          {"weight_decay", cfg.weight_decay},
          {"decay_embeddings", cfg.decay_embeddings},
          {"max_epochs", cfg.max_epochs},
          {"eval_every", cfg.eval_every},
          {"stop_val_acc", cfg.stop_val_acc},
          {"stop_patience", cfg.stop_patience},
          {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.epsilon = j.value("epsilon", cfg.epsilon);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.decay_embeddings = j.value("decay_embeddings", cfg.decay_embeddings);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.stop_val_acc = j.value("stop_val_acc", cfg.stop_val_acc);
    cfg.stop_patience = j.value("stop_patience", cfg.stop_patience);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

AdamWState AdamWState::like(const Parameters& params) {
  AdamWState s;
  for (const auto& t : params.tensors) {
    s.m.emplace_back(t.values.size(), 0.0);
    s.v.emplace_back(t.values.size(), 0.0);
  }
  return s;
}

void adamw_step(Parameters& params, const Parameters& grads, AdamWState& state,
                const TrainConfig& cfg) {
  if (grads.tensors.size() != params.tensors.size() || state.m.size() != params.tensors.size()) {
    throw DimensionError("adamw_step: parameter, gradient and state layouts differ");
  }
  for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
    const auto& g = grads.tensors[i];
    if (g.values.size() != params.tensors[i].values.size()) {
      throw DimensionError("adamw_step: gradient shape mismatch for " + g.name);
    }
    for (double x : g.values) {
      if (!std::isfinite(x)) throw NumericError("non-finite gradient in " + g.name);
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.learning_rate;

  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& p = params.tensors[i];
    const auto& g = grads.tensors[i].values;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool embedding = p.name == "token_embed" || p.name == "pos_embed";
    const double decay = (embedding && !cfg.decay_embeddings) ? 1.0 : 1.0 - lr * cfg.weight_decay;
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      p.values[j] *= decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      p.values[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

double argmax_accuracy(std::span<const double> logits, std::size_t classes,
                       std::span<const std::uint32_t> labels) {
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const double* row = logits.data() + r * classes;
    // max_element returns the first maximum: ties go to the lowest class.
    const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    if (best == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

constexpr std::size_t kEvalChunk = 2048;

// Each epoch allocates and frees the same multi-megabyte activation buffers.
// Above glibc's default mmap threshold every one of them is a fresh mapping
// that gets page-faulted in again, which roughly doubles the step time.
void tune_allocator() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

std::vector<std::size_t> labels_of(std::span<const tasks::Example> xs) {
  std::vector<std::size_t> out;
  out.reserve(xs.size());
  for (const auto& e : xs) out.push_back(e.label);
  return out;
}

std::vector<std::uint32_t> labels32_of(std::span<const tasks::Example> xs) {
  std::vector<std::uint32_t> out;
  out.reserve(xs.size());
  for (const auto& e : xs) out.push_back(e.label);
  return out;
}

bool all_finite(const Parameters& params) {
  for (const auto& t : params.tensors) {
    for (double v : t.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

EvalResult evaluate(const Parameters& params, const model::ModelConfig& cfg,
                    std::span<const tasks::Example> examples) {
  if (examples.empty()) throw InputError("evaluate: no examples");
  tune_allocator();
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += kEvalChunk) {
    const auto chunk = examples.subspan(start, std::min(kEvalChunk, examples.size() - start));
    numerics::Tape tape;
    const auto fr = model::run_model(tape, params, cfg, model::encode(chunk, cfg.modulus));
    const auto labels = labels_of(chunk);
    loss_sum += numerics::cross_entropy(fr.logits, labels).item() *
                static_cast<double>(chunk.size());
    const auto l32 = labels32_of(chunk);
    correct += static_cast<std::size_t>(
        std::llround(argmax_accuracy(fr.logits.values(), cfg.classes(), l32) *
                     static_cast<double>(chunk.size())));
  }
  const double n = static_cast<double>(examples.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

const EvalRecord& RunTrace::final_record() const {
  if (records.empty()) throw InputError("trace has no records");
  return records.back();
}

RunTrace train_run(const model::ModelConfig& model_cfg, const tasks::Dataset& ds,
                   const TrainConfig& cfg, const Progress& progress,
                   model::Parameters* final_params) {
  model_cfg.validate();
  cfg.validate();
  if (ds.train.empty()) throw InputError("train_run: empty training split");
  if (ds.modulus != model_cfg.modulus) {
    throw ConfigError("train_run: dataset modulus " + std::to_string(ds.modulus) +
                      " differs from model modulus " + std::to_string(model_cfg.modulus));
  }
  tune_allocator();
  const auto started = std::chrono::steady_clock::now();

  RunTrace trace;
  trace.eval_every = cfg.eval_every;
  trace.has_val = !ds.val.empty();
  std::vector<std::size_t> memo_rows;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    if (ds.train[i].tag == tasks::Tag::memo) memo_rows.push_back(i);
  }
  trace.has_memo = ds.kind == tasks::TaskKind::multitask && !memo_rows.empty();

  Parameters params = model::init_parameters(model_cfg);
  AdamWState state = AdamWState::like(params);
  const model::TokenBatch batch = model::encode(ds.train, ds.modulus);
  const auto labels = labels_of(ds.train);
  const auto labels32 = labels32_of(ds.train);
  std::vector<std::uint32_t> memo_labels;
  for (std::size_t r : memo_rows) memo_labels.push_back(labels32[r]);
  const std::size_t classes = model_cfg.classes();

  std::size_t streak = 0;
  for (std::size_t epoch = 0;; ++epoch) {
    numerics::Tape tape;
    model::ForwardResult fr;
    numerics::DiffArray loss;
    try {
      fr = model::run_model(tape, params, model_cfg, batch, true);
      loss = numerics::cross_entropy(fr.logits, labels);
    } catch (const NumericError&) {
      trace.diverged = true;
      break;
    }

    const bool final_epoch = epoch == cfg.max_epochs;
    if (epoch % cfg.eval_every == 0 || final_epoch) {
      EvalRecord rec;
      rec.epoch = epoch;
      rec.train_loss = loss.item();
      const auto logits = fr.logits.values();
      rec.train_acc = argmax_accuracy(logits, classes, labels32);
      if (trace.has_val) {
        const auto val = evaluate(params, model_cfg, ds.val);
        rec.val_loss = val.loss;
        rec.val_acc = val.accuracy;
      }
      if (trace.has_memo) {
        std::vector<double> memo_logits;
        memo_logits.reserve(memo_rows.size() * classes);
        for (std::size_t r : memo_rows) {
          memo_logits.insert(memo_logits.end(), logits.begin() + r * classes,
                             logits.begin() + (r + 1) * classes);
        }
        rec.memo_acc = argmax_accuracy(memo_logits, classes, memo_labels);
      }
      rec.param_norm = model::param_norm(params);
      trace.records.push_back(rec);

      const double watched = rec.val_acc.value_or(rec.train_acc);
      streak = watched >= cfg.stop_val_acc ? streak + 1 : 0;
      if (streak >= cfg.stop_patience && !final_epoch) {
        trace.stopped_early = true;
        break;
      }
      if (progress && !progress(rec)) break;
    }
    if (final_epoch) break;

    tape.backward(loss);
    try {
      adamw_step(params, model::collect_gradients(fr, params), state, cfg);
    } catch (const NumericError&) {
      trace.diverged = true;
      break;
    }
    if (!all_finite(params)) {
      trace.diverged = true;
      break;
    }
  }

  trace.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  trace.config = {{"model", model::to_json(model_cfg)},
                  {"train", to_json(cfg)},
                  {"task",
                   {{"kind", tasks::to_string(ds.kind)},
                    {"modulus", ds.modulus},
                    {"n_train", ds.train.size()},
                    {"n_val", ds.val.size()},
                    {"n_memo", memo_rows.size()},
                    {"seed", ds.seed}}}};
  if (final_params != nullptr) *final_params = std::move(params);
  return trace;
}

// ---- metrics.csv -----------------------------------------------------------

namespace {

void put_number(std::ostream& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 12);
  out.write(buf, res.ptr - buf);
}

void put_optional(std::ostream& out, const std::optional<double>& v) {
  if (v) put_number(out, *v);
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    fields.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

double parse_number(std::string_view s, std::size_t lineno) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw InputError("metrics.csv line " + std::to_string(lineno) + ": bad number '" +
                     std::string(s) + "'");
  }
  return v;
}

std::optional<double> parse_optional(std::string_view s, std::size_t lineno) {
  if (s.empty()) return std::nullopt;
  return parse_number(s, lineno);
}

constexpr std::string_view kHeader = "epoch,train_loss,val_loss,train_acc,val_acc,param_norm";

}  // namespace

void write_metrics_csv(const RunTrace& trace, std::ostream& out) {
  out << kHeader;
  if (trace.has_memo) out << ",memo_acc";
  out << '\n';
  for (const auto& r : trace.records) {
    out << r.epoch << ',';
    put_number(out, r.train_loss);
    out << ',';
    put_optional(out, r.val_loss);
    out << ',';
    put_number(out, r.train_acc);
    out << ',';
    put_optional(out, r.val_acc);
    out << ',';
    put_number(out, r.param_norm);
    if (trace.has_memo) {
      out << ',';
      put_optional(out, r.memo_acc);
    }
    out << '\n';
  }
}

RunTrace read_metrics_csv(std::istream& in) {
  RunTrace trace;
  std::string line;
  if (!std::getline(in, line)) throw InputError("metrics.csv is empty");
  if (line == kHeader) {
    trace.has_memo = false;
  } else if (line == std::string(kHeader) + ",memo_acc") {
    trace.has_memo = true;
  } else {
    throw InputError("metrics.csv: unexpected header '" + line + "'");
  }
  const std::size_t width = trace.has_memo ? 7 : 6;
  std::size_t lineno = 1;
  bool any_val = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != width) {
      throw InputError("metrics.csv line " + std::to_string(lineno) + ": expected " +
                       std::to_string(width) + " fields");
    }
    EvalRecord r;
    const double epoch = parse_number(f[0], lineno);
    if (epoch < 0 || epoch != std::floor(epoch)) {
      throw InputError("metrics.csv line " + std::to_string(lineno) + ": bad epoch");
    }
    r.epoch = static_cast<std::size_t>(epoch);
    r.train_loss = parse_number(f[1], lineno);
    r.val_loss = parse_optional(f[2], lineno);
    r.train_acc = parse_number(f[3], lineno);
    r.val_acc = parse_optional(f[4], lineno);
    r.param_norm = parse_number(f[5], lineno);
    if (trace.has_memo) r.memo_acc = parse_optional(f[6], lineno);
    if (!trace.records.empty() && r.epoch <= trace.records.back().epoch) {
      throw InputError("metrics.csv line " + std::to_string(lineno) +
                       ": epochs are not strictly increasing");
    }
    any_val = any_val || r.val_acc.has_value();
    trace.records.push_back(r);
  }
  trace.has_val = any_val;
  if (trace.records.size() >= 2) {
    trace.eval_every = trace.records[1].epoch - trace.records[0].epoch;
  }
  return trace;
}

RunTrace load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return read_metrics_csv(in);
}

}  // namespace groklab::trainer
