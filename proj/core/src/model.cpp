#include "groklab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "groklab/errors.hpp"
#include "groklab/rng.hpp"

namespace groklab::model {

using numerics::DiffArray;
using numerics::Shape;
using numerics::Tape;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (d_h == 0) fail("d_h must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (d_h % n_heads != 0) {
    fail("d_h = " + std::to_string(d_h) + " is not divisible by n_heads = " +
         std::to_string(n_heads));
  }
  if (modulus < 2) fail("modulus must be at least 2");
  if (seq_len != 3) fail("seq_len must be 3 ([a, op, b])");
  if (partitioned_ffn && mlp_width() % 2 != 0) fail("partitioned_ffn requires an even d_mlp");
  if (!(init_scale > 0.0) || !std::isfinite(init_scale)) fail("init_scale must be positive");
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},   {"d_h", cfg.d_h},
          {"n_heads", cfg.n_heads},     {"d_mlp", cfg.mlp_width()},
          {"modulus", cfg.modulus},     {"seq_len", cfg.seq_len},
          {"vocab_size", cfg.vocab_size()},
          {"partitioned_ffn", cfg.partitioned_ffn},
          {"init_seed", cfg.init_seed}, {"init_scale", cfg.init_scale}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.d_h = j.at("d_h").get<std::size_t>();
    cfg.n_heads = j.value("n_heads", cfg.n_heads);
    cfg.d_mlp = j.value("d_mlp", std::size_t{0});
    cfg.modulus = j.at("modulus").get<std::uint32_t>();
    cfg.seq_len = j.value("seq_len", cfg.seq_len);
    cfg.partitioned_ffn = j.value("partitioned_ffn", false);
    cfg.init_seed = j.value("init_seed", std::uint64_t{0});
    cfg.init_scale = j.value("init_scale", 1.0);
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

// ---- parameters ------------------------------------------------------------

std::size_t Parameters::size() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

const Tensor& Parameters::at(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw InputError("no parameter tensor named '" + std::string(name) + "'");
}

Tensor& Parameters::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

std::vector<double> Parameters::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  for (const auto& t : tensors) flat.insert(flat.end(), t.values.begin(), t.values.end());
  return flat;
}

Parameters Parameters::filled(double value) const {
  Parameters out = *this;
  for (auto& t : out.tensors) std::fill(t.values.begin(), t.values.end(), value);
  return out;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_h, m = cfg.mlp_width();
  std::vector<std::pair<std::string, Shape>> layout;
  layout.emplace_back("token_embed", Shape{cfg.vocab_size(), d});
  layout.emplace_back("pos_embed", Shape{cfg.seq_len, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (const char* w : {"W_Q", "W_K", "W_V", "W_O"}) layout.emplace_back(p + w, Shape{d, d});
    layout.emplace_back(p + "W_in", Shape{d, m});
    layout.emplace_back(p + "W_out", Shape{m, d});
  }
  layout.emplace_back("unembed", Shape{d, cfg.classes()});
  return layout;
}

Parameters init_parameters(const ModelConfig& cfg) {
  Rng rng(derive_seed(cfg.init_seed, Stream::init));
  Parameters params;
  for (auto& [name, shape] : parameter_layout(cfg)) {
    // Embedding tables are indexed, not multiplied, so fan_in is taken as d_h.
    const bool embedding = name == "token_embed" || name == "pos_embed";
    const double fan_in = static_cast<double>(embedding ? cfg.d_h : shape[0]);
    const double stddev = cfg.init_scale / std::sqrt(fan_in);
    Tensor t{name, shape, std::vector<double>(numerics::element_count(shape))};
    for (double& v : t.values) v = stddev * rng.normal();
    params.tensors.push_back(std::move(t));
  }
  return params;
}

std::size_t count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_h;
  const std::size_t per_layer = 4 * d * d + 2 * d * cfg.mlp_width();
  return count_embedding_parameters(cfg) + cfg.n_layers * per_layer;
}

std::size_t count_embedding_parameters(const ModelConfig& cfg) {
  cfg.validate();
  return (cfg.vocab_size() + cfg.seq_len) * cfg.d_h + cfg.d_h * cfg.classes();
}

double param_norm(const Parameters& params) {
  double sum = 0.0;
  for (const auto& t : params.tensors) {
    for (double v : t.values) {
      if (!std::isfinite(v)) throw NumericError("param_norm: non-finite entry in " + t.name);
      sum += v * v;
    }
  }
  return std::sqrt(sum);
}

// ---- forward ---------------------------------------------------------------

TokenBatch encode(std::span<const tasks::Example> examples, std::uint32_t modulus) {
  TokenBatch batch;
  batch.tokens.reserve(examples.size() * 3);
  for (const auto& e : examples) {
    batch.tokens.push_back(e.a);
    batch.tokens.push_back(tasks::operator_token(e.op, modulus));
    batch.tokens.push_back(e.b);
  }
  return batch;
}

ExpertMask ExpertMask::by_operator() {
  return {{{tasks::Operator::plus, Half::first}, {tasks::Operator::minus, Half::second}}};
}

ExpertMask ExpertMask::all_active() {
  return {{{tasks::Operator::plus, Half::both}, {tasks::Operator::minus, Half::both}}};
}

namespace {

// Per-row 0/1 gate over the MLP intermediate dimension. `rows_per_example`
// is seq_len for inner layers and 1 for the final-position layer.
std::vector<double> mlp_gate(const TokenBatch& batch, const ModelConfig& cfg,
                             const ExpertMask& mask, std::size_t rows_per_example) {
  const std::size_t width = cfg.mlp_width(), half = width / 2;
  std::vector<double> gate(batch.size() * rows_per_example * width, 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t token = batch.tokens[b * batch.seq_len + 1];
    if (token < cfg.modulus || token >= cfg.vocab_size()) {
      throw RoutingError("example " + std::to_string(b) + " has no operator token");
    }
    const auto op = static_cast<tasks::Operator>(token - cfg.modulus);
    const auto it = mask.routes.find(op);
    if (it == mask.routes.end()) {
      throw RoutingError("operator '" + std::string(tasks::to_string(op)) +
                         "' has no expert assignment");
    }
    std::size_t lo = 0, hi = width;
    if (it->second == Half::first) hi = half;
    if (it->second == Half::second) lo = half;
    for (std::size_t r = 0; r < rows_per_example; ++r) {
      double* row = gate.data() + (b * rows_per_example + r) * width;
      std::fill(row + lo, row + hi, 1.0);
    }
  }
  return gate;
}

void check_batch(const ModelConfig& cfg, const TokenBatch& batch) {
  if (batch.seq_len != cfg.seq_len || batch.tokens.size() % cfg.seq_len != 0) {
    throw DimensionError("token batch does not hold whole sequences of length " +
                         std::to_string(cfg.seq_len));
  }
  if (batch.size() == 0) throw InputError("forward: empty batch");
}

ForwardResult build_graph(Tape& tape, std::vector<DiffArray> leaves, const ModelConfig& cfg,
                          const TokenBatch& batch, const ExpertMask* mask) {
  ForwardResult out;
  out.params = std::move(leaves);

  const std::size_t B = batch.size(), S = cfg.seq_len, H = cfg.n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head()));

  std::vector<std::size_t> positions(B * S);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % S;
  std::vector<std::size_t> last_rows(B);
  for (std::size_t b = 0; b < B; ++b) last_rows[b] = b * S + S - 1;

  // Layer-0 activations depend only on (token, position). For large batches
  // the embedding sum and the first projections are computed once per
  // (position, token) pair and gathered, which is the same function at a
  // fraction of the cost.
  const std::size_t V = cfg.vocab_size();
  const bool tabulate = V < B;
  std::vector<std::size_t> table_rows(B * S), table_last(B);
  DiffArray x_table;
  if (tabulate) {
    std::vector<std::size_t> tab_tokens(S * V), tab_positions(S * V);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t t = 0; t < V; ++t) {
        tab_tokens[s * V + t] = t;
        tab_positions[s * V + t] = s;
      }
    }
    x_table = numerics::add(numerics::embedding_gather(out.params[0], tab_tokens),
                            numerics::embedding_gather(out.params[1], tab_positions));
    for (std::size_t i = 0; i < B * S; ++i) table_rows[i] = (i % S) * V + batch.tokens[i];
    for (std::size_t b = 0; b < B; ++b) table_last[b] = table_rows[last_rows[b]];
  }

  DiffArray x;
  if (!tabulate || cfg.n_layers > 1) {
    x = tabulate ? numerics::embedding_gather(x_table, table_rows)
                 : numerics::add(numerics::embedding_gather(out.params[0], batch.tokens),
                                 numerics::embedding_gather(out.params[1], positions));
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto w = std::span(out.params).subspan(2 + 6 * l, 6);
    // Only the final position feeds the readout, so the last layer computes
    // queries, attention output and MLP for that position alone.
    const bool last = l + 1 == cfg.n_layers;
    const std::size_t q_len = last ? 1 : S;

    DiffArray xq, q, k, v;
    if (l == 0 && tabulate) {
      const auto& q_rows = last ? table_last : table_rows;
      xq = numerics::embedding_gather(x_table, q_rows);
      q = numerics::embedding_gather(numerics::matmul(x_table, w[0]), q_rows);
      k = numerics::embedding_gather(numerics::matmul(x_table, w[1]), table_rows);
      v = numerics::embedding_gather(numerics::matmul(x_table, w[2]), table_rows);
    } else {
      xq = last ? numerics::embedding_gather(x, last_rows) : x;
      q = numerics::matmul(xq, w[0]);
      k = numerics::matmul(x, w[1]);
      v = numerics::matmul(x, w[2]);
    }
    const DiffArray weights =
        numerics::softmax_rows(numerics::head_scores(q, k, H, S, q_len, attn_scale, true));
    out.attention.push_back(weights);
    const DiffArray attn = numerics::matmul(numerics::head_mix(weights, v, H, S, q_len), w[3]);
    const DiffArray resid = numerics::add(xq, attn);

    DiffArray hidden = numerics::relu(numerics::matmul(resid, w[4]));
    if (mask != nullptr) {
      const DiffArray gate = tape.constant(hidden.shape(), mlp_gate(batch, cfg, *mask, q_len));
      hidden = numerics::multiply(hidden, gate);
    }
    x = numerics::add(resid, numerics::matmul(hidden, w[5]));
  }
  out.logits = numerics::matmul(x, out.params.back());
  return out;
}

ForwardResult build(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                    const TokenBatch& batch, const ExpertMask* mask, bool track) {
  cfg.validate();
  check_batch(cfg, batch);
  const auto layout = parameter_layout(cfg);
  if (params.tensors.size() != layout.size()) {
    throw DimensionError("parameters do not match the model config");
  }
  std::vector<DiffArray> leaves;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.shape != layout[i].second) {
      throw DimensionError("parameter " + t.name + " has shape " + numerics::to_string(t.shape) +
                           ", expected " + numerics::to_string(layout[i].second));
    }
    leaves.push_back(track ? tape.variable(t.shape, t.values) : tape.constant(t.shape, t.values));
  }
  return build_graph(tape, std::move(leaves), cfg, batch, mask);
}

}  // namespace

ForwardResult forward(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                      const TokenBatch& batch, bool track_gradients) {
  return build(tape, params, cfg, batch, nullptr, track_gradients);
}

ForwardResult forward_leaves(Tape& tape, std::span<const DiffArray> leaves, const ModelConfig& cfg,
                             const TokenBatch& batch, const ExpertMask* mask) {
  cfg.validate();
  check_batch(cfg, batch);
  const auto layout = parameter_layout(cfg);
  if (leaves.size() != layout.size()) {
    throw DimensionError("expected " + std::to_string(layout.size()) + " parameter leaves, got " +
                         std::to_string(leaves.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (leaves[i].shape() != layout[i].second) {
      throw DimensionError("leaf " + std::to_string(i) + " has shape " +
                           numerics::to_string(leaves[i].shape()) + ", expected " +
                           numerics::to_string(layout[i].second));
    }
  }
  if (mask != nullptr && !cfg.partitioned_ffn) {
    throw ConfigError("an expert mask requires partitioned_ffn = true");
  }
  return build_graph(tape, std::vector<DiffArray>(leaves.begin(), leaves.end()), cfg, batch, mask);
}

ForwardResult forward_partitioned(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                                  const TokenBatch& batch, const ExpertMask& mask,
                                  bool track_gradients) {
  if (!cfg.partitioned_ffn) {
    throw ConfigError("forward_partitioned requires partitioned_ffn = true");
  }
  return build(tape, params, cfg, batch, &mask, track_gradients);
}

ForwardResult run_model(Tape& tape, const Parameters& params, const ModelConfig& cfg,
                        const TokenBatch& batch, bool track_gradients) {
  if (cfg.partitioned_ffn) {
    return forward_partitioned(tape, params, cfg, batch, ExpertMask::by_operator(),
                               track_gradients);
  }
  return forward(tape, params, cfg, batch, track_gradients);
}

Parameters collect_gradients(const ForwardResult& result, const Parameters& like) {
  Parameters grads = like;
  for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
    const auto g = result.params.at(i).gradient();
    if (g.size() != grads.tensors[i].values.size()) {
      throw InputError("collect_gradients: no gradient for " + grads.tensors[i].name);
    }
    std::copy(g.begin(), g.end(), grads.tensors[i].values.begin());
  }
  return grads;
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const Parameters& params, const ModelConfig& cfg,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "groklab-params-v1";
  manifest["dtype"] = "float64-le";
  manifest["config"] = to_json(cfg);
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : params.tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  manifest["count"] = offset;

  std::ofstream bin(dir / "params.bin", std::ios::binary);
  for (const auto& t : params.tensors) {
    for (double v : t.values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  std::ofstream(dir / "params.json") << manifest.dump(2) << '\n';
  if (!bin) throw Error("failed writing checkpoint to " + dir.string());
}

Parameters load_checkpoint(const std::filesystem::path& dir, ModelConfig* cfg_out) {
  std::ifstream js(dir / "params.json");
  if (!js) throw InputError("missing " + (dir / "params.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("params.json: " + std::string(e.what()));
  }
  const ModelConfig cfg = model_config_from_json(manifest.at("config"));
  const auto layout = parameter_layout(cfg);
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw InputError("missing " + (dir / "params.bin").string());
  Parameters params;
  for (const auto& [name, shape] : layout) {
    Tensor t{name, shape, std::vector<double>(numerics::element_count(shape))};
    for (double& v : t.values) {
      std::uint64_t bits = 0;
      if (!bin.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
        throw InputError("params.bin is truncated");
      }
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
      v = std::bit_cast<double>(bits);
    }
    params.tensors.push_back(std::move(t));
  }
  if (cfg_out != nullptr) *cfg_out = cfg;
  return params;
}

}  // namespace groklab::model
