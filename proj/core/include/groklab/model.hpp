#pragma once

// Simplified decoder-only transformer for [a, op, b] sequences.
//
// Layout: token + learned position embeddings; per layer a causal multi-head
// self-attention block and a ReLU MLP, each with a residual connection; no
// biases and no layer norm. Logits are read from the final position through
// the unembedding, one class per residue.

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "groklab/numerics.hpp"
#include "groklab/tasks.hpp"

namespace groklab::model {

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t d_h = 64;
  std::size_t n_heads = 4;
  /// 0 means 4·d_h.
  std::size_t d_mlp = 0;
  std::uint32_t modulus = 113;
  std::size_t seq_len = 3;
  bool partitioned_ffn = false;
  std::uint64_t init_seed = 0;
  /// Multiplies the 1/sqrt(fan_in) initialization standard deviation.
  double init_scale = 1.0;

  std::size_t mlp_width() const { return d_mlp == 0 ? 4 * d_h : d_mlp; }
  std::size_t vocab_size() const { return modulus + tasks::kOperatorCount; }
  std::size_t classes() const { return modulus; }
  std::size_t d_head() const { return d_h / n_heads; }

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Tensor {
  std::string name;
  numerics::Shape shape;
  std::vector<double> values;
};

/// Learnable weights in a fixed flattening order:
///   token_embed [V×d_h], pos_embed [S×d_h],
///   per layer l: layer{l}.W_Q, .W_K, .W_V, .W_O [d_h×d_h],
///                layer{l}.W_in [d_h×d_mlp], layer{l}.W_out [d_mlp×d_h],
///   unembed [d_h×P].
/// Activations multiply from the left (x·W); head h of W_Q/W_K/W_V uses
/// columns [h·d_head, (h+1)·d_head) and the matching rows of W_O.
struct Parameters {
  std::vector<Tensor> tensors;

  std::size_t size() const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  std::vector<double> flatten() const;
  /// A tensor-for-tensor copy with every entry set to `value`.
  Parameters filled(double value) const;
};

/// Tensor names and shapes for a config, in flattening order.
std::vector<std::pair<std::string, numerics::Shape>> parameter_layout(const ModelConfig& cfg);

/// I.i.d. Gaussian entries with standard deviation init_scale/sqrt(fan_in);
/// the embeddings use fan_in = d_h. Deterministic in cfg.init_seed.
Parameters init_parameters(const ModelConfig& cfg);

std::size_t count_parameters(const ModelConfig& cfg);
/// Token/position embeddings plus unembedding.
std::size_t count_embedding_parameters(const ModelConfig& cfg);

/// Euclidean norm over every learnable entry.
double param_norm(const Parameters& params);

/// Packed token ids, `seq_len` per sequence.
struct TokenBatch {
  std::vector<std::size_t> tokens;
  std::size_t seq_len = 3;

  std::size_t size() const { return seq_len == 0 ? 0 : tokens.size() / seq_len; }
};

TokenBatch encode(std::span<const tasks::Example> examples, std::uint32_t modulus);

/// Which half of the MLP intermediate dimension an operator routes to.
enum class Half { first, second, both };

struct ExpertMask {
  std::map<tasks::Operator, Half> routes;

  /// '+' to the first half, '-' to the second.
  static ExpertMask by_operator();
  /// Every operator keeps the whole MLP; equivalent to the dense model.
  static ExpertMask all_active();
};

struct ForwardResult {
  numerics::DiffArray logits;  ///< [B×P]
  /// One leaf per parameter tensor, in flattening order.
  std::vector<numerics::DiffArray> params;
  /// Per-layer attention weights, laid out as numerics::head_scores output.
  std::vector<numerics::DiffArray> attention;
};

/// Builds the forward graph on `tape`. With `track_gradients` the parameter
/// leaves are differentiable.
ForwardResult forward(numerics::Tape& tape, const Parameters& params, const ModelConfig& cfg,
                      const TokenBatch& batch, bool track_gradients = false);

/// As forward, but MLP activations outside each example's assigned half
/// (chosen by its operator token) are forced to zero. Requires
/// cfg.partitioned_ffn.
ForwardResult forward_partitioned(numerics::Tape& tape, const Parameters& params,
                                  const ModelConfig& cfg, const TokenBatch& batch,
                                  const ExpertMask& mask, bool track_gradients = false);

/// Builds the graph on caller-owned parameter leaves (in flattening order),
/// e.g. for gradient checking. A non-null mask applies partitioned routing.
ForwardResult forward_leaves(numerics::Tape& tape, std::span<const numerics::DiffArray> leaves,
                             const ModelConfig& cfg, const TokenBatch& batch,
                             const ExpertMask* mask = nullptr);

/// forward or forward_partitioned(by_operator) depending on the config.
ForwardResult run_model(numerics::Tape& tape, const Parameters& params, const ModelConfig& cfg,
                        const TokenBatch& batch, bool track_gradients = false);

/// Gradients of the leaves in `result`, shaped like `like`. Call after
/// tape.backward().
Parameters collect_gradients(const ForwardResult& result, const Parameters& like);

/// params.bin holds little-endian float64 values in flattening order;
/// params.json records the config and the (name, shape, offset) table.
void save_checkpoint(const Parameters& params, const ModelConfig& cfg,
                     const std::filesystem::path& dir);
Parameters load_checkpoint(const std::filesystem::path& dir, ModelConfig* cfg_out = nullptr);

}  // namespace groklab::model
