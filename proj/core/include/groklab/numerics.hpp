#pragma once

// Dense double-precision arrays with tape-based reverse-mode differentiation.
//
// A Tape owns every array created during one forward pass. DiffArray is a
// cheap handle (tape pointer + record index). Records are appended in
// evaluation order, so the tape is topologically sorted by construction and
// the reverse pass simply walks it backwards once.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace groklab::numerics {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

class DiffArray {
 public:
  DiffArray() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::span<const double> values() const;
  /// Empty unless this array requires gradients and a reverse pass ran.
  std::span<const double> gradient() const;
  bool requires_grad() const;
  bool has_gradient() const;

  /// Matrix view: everything but the last extent folds into rows.
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const { return values().size(); }
  double item() const;

 private:
  friend class Tape;
  DiffArray(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the gradient of record `self` into its inputs.
  using ReverseRule = std::function<void(Tape&, std::size_t self)>;

  struct Record {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    ReverseRule reverse;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf that never receives a gradient.
  DiffArray constant(Shape shape, std::vector<double> values);
  /// A leaf that receives a gradient on backward().
  DiffArray variable(Shape shape, std::vector<double> values);

  /// Appends an operation result. `reverse` is dropped when no input
  /// requires a gradient.
  DiffArray push(Shape shape, std::vector<double> values,
                 std::vector<std::size_t> inputs, ReverseRule reverse);

  /// Seeds d(loss)/d(loss) = 1 and runs every reverse rule once, newest
  /// record first. `loss` must hold exactly one element. A tape can be
  /// reversed only once.
  void backward(const DiffArray& loss);

  std::size_t size() const { return records_.size(); }
  /// Number of reverse rules executed by the last backward().
  std::size_t reverse_visits() const { return reverse_visits_; }

  const Record& record(std::size_t id) const { return records_.at(id); }
  /// Gradient buffer of a record; allocated zero-filled on first access.
  std::span<double> grad_buffer(std::size_t id);
  bool wants_grad(std::size_t id) const { return records_[id].requires_grad; }

  /// Records whose values fed a relu, in evaluation order. Used by the
  /// gradient checker to skip coordinates that sit on a kink.
  const std::vector<std::size_t>& relu_inputs() const { return relu_inputs_; }
  void note_relu_input(std::size_t id) { relu_inputs_.push_back(id); }

 private:
  std::deque<Record> records_;
  std::vector<std::size_t> relu_inputs_;
  std::size_t reverse_visits_ = 0;
  bool reversed_ = false;
};

// ---- operations -----------------------------------------------------------

/// [m×k] · [k×n] -> [m×n].
DiffArray matmul(const DiffArray& a, const DiffArray& b);

enum class ElementwiseKind { add, multiply, relu, scale };

/// Binary kinds accept `b` with the same shape as `a` or with `b.shape`
/// equal to the trailing extents of `a` (broadcast over leading rows).
/// `scale` multiplies by `factor`; relu uses the convention relu'(0) = 0.
DiffArray elementwise(ElementwiseKind kind, const DiffArray& a,
                      const DiffArray* b = nullptr, double factor = 1.0);

DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray multiply(const DiffArray& a, const DiffArray& b);
DiffArray relu(const DiffArray& a);
DiffArray scale(const DiffArray& a, double factor);

/// Row-wise softmax with max subtraction. -inf entries are allowed (they map
/// to exactly 0) as long as every row has one finite entry.
DiffArray softmax_rows(const DiffArray& a);

/// Mean over rows of -log softmax(logits)[label]; returns shape {1}.
DiffArray cross_entropy(const DiffArray& logits, std::span<const std::size_t> labels);

/// Copies rows `indices` of a [V×d] table; reverse scatter-adds.
DiffArray embedding_gather(const DiffArray& table, std::span<const std::size_t> indices);

/// Per-head attention scores for sequences packed row-wise.
///
/// `q` holds the last `q_len` positions of each sequence ([B·q_len × d]),
/// `k` all `seq_len` positions ([B·seq_len × d]). Output row
/// (b·heads + h)·q_len + i holds the scaled dot products of query i against
/// every key of sequence b in head h. When `causal`, keys after the query's
/// absolute position are set to -inf.
DiffArray head_scores(const DiffArray& q, const DiffArray& k, std::size_t heads,
                      std::size_t seq_len, std::size_t q_len, double scale,
                      bool causal);

/// Mixes values with attention weights laid out as head_scores' output:
/// [B·heads·q_len × seq_len] × [B·seq_len × d] -> [B·q_len × d].
DiffArray head_mix(const DiffArray& weights, const DiffArray& v, std::size_t heads,
                   std::size_t seq_len, std::size_t q_len);

// ---- gradient checking ----------------------------------------------------

struct ParamBlock {
  Shape shape;
  std::vector<double> values;
};

/// Builds a scalar loss on `tape` from leaves holding the parameters.
using ScalarFunction =
    std::function<DiffArray(Tape& tape, std::span<const DiffArray> params)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Parameter sets above this size are checked on a random subsample.
  std::size_t subsample_above = 10'000;
  std::size_t subsample_size = 256;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because a relu pre-activation sat within 10·step of 0.
  std::size_t rejected = 0;
};

/// Compares reverse-mode gradients against central differences. The relative
/// error of a coordinate is |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const ScalarFunction& f, std::span<const ParamBlock> params,
                           const GradCheckOptions& options = {});

}  // namespace groklab::numerics
