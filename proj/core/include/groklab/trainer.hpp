#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "groklab/model.hpp"
#include "groklab/tasks.hpp"

namespace groklab::trainer {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 1.0;
  /// When false, token and position embeddings are not decayed.
  bool decay_embeddings = true;
  std::size_t max_epochs = 50'000;
  std::size_t eval_every = 10;
  /// Stop once val_acc >= stop_val_acc for stop_patience consecutive
  /// evaluations. Runs without a validation split apply the rule to
  /// train_acc instead.
  double stop_val_acc = 0.999;
  std::size_t stop_patience = 100;
  std::uint64_t seed = 0;
  bool save_checkpoint = true;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static AdamWState like(const model::Parameters& params);
};

/// One decoupled-decay AdamW update:
///   θ ← θ − lr·wd·θ;  m, v ← moments of g;  θ ← θ − lr·m̂/(√v̂ + ε).
/// Throws NumericError naming the tensor when a gradient is not finite.
void adamw_step(model::Parameters& params, const model::Parameters& grads, AdamWState& state,
                const TrainConfig& cfg);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class)
/// without recording gradients. Examples are processed in fixed-size chunks.
EvalResult evaluate(const model::Parameters& params, const model::ModelConfig& cfg,
                    std::span<const tasks::Example> examples);

/// Accuracy of a [rows×classes] logit buffer against labels.
double argmax_accuracy(std::span<const double> logits, std::size_t classes,
                       std::span<const std::uint32_t> labels);

struct EvalRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double train_acc = 0.0;
  std::optional<double> val_acc;
  double param_norm = 0.0;
  std::optional<double> memo_acc;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct RunTrace {
  std::vector<EvalRecord> records;
  bool has_val = true;
  bool has_memo = false;
  bool diverged = false;
  bool stopped_early = false;
  std::size_t eval_every = 10;
  double wall_seconds = 0.0;
  /// Model, task and train configs plus seeds.
  nlohmann::json config;

  const EvalRecord& final_record() const;
};

/// Called after every evaluation; returning false stops the run.
using Progress = std::function<bool(const EvalRecord&)>;

/// Full-batch training on ds.train; evaluation every cfg.eval_every epochs
/// and at the final epoch. A non-finite loss or update truncates the trace
/// and sets `diverged`.
RunTrace train_run(const model::ModelConfig& model_cfg, const tasks::Dataset& ds,
                   const TrainConfig& cfg, const Progress& progress = {},
                   model::Parameters* final_params = nullptr);

/// Header `epoch,train_loss,val_loss,train_acc,val_acc,param_norm`
/// (+ `,memo_acc` when traced), 12 significant digits, absent values empty.
void write_metrics_csv(const RunTrace& trace, std::ostream& out);
RunTrace read_metrics_csv(std::istream& in);
RunTrace load_metrics_csv(const std::filesystem::path& path);

}  // namespace groklab::trainer
