#include "groklab/numerics.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "groklab/errors.hpp"
#include "groklab/rng.hpp"

namespace groklab::numerics {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

ConstMatMap as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

MatMap as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

void require_matrix(const DiffArray& a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         to_string(a.shape()));
  }
}

void require_same_tape(const DiffArray& a, const DiffArray& b, const char* op) {
  if (&a.tape() != &b.tape()) {
    throw InputError(std::string(op) + ": operands live on different tapes");
  }
}

// True when b can be broadcast against a: equal shapes, or b's shape equals
// a's trailing extents.
bool broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---- DiffArray --------------------------------------------------------------

const Shape& DiffArray::shape() const { return tape_->record(id_).shape; }

std::span<const double> DiffArray::values() const { return tape_->record(id_).value; }

std::span<const double> DiffArray::gradient() const { return tape_->record(id_).grad; }

bool DiffArray::requires_grad() const { return tape_->record(id_).requires_grad; }

bool DiffArray::has_gradient() const { return !tape_->record(id_).grad.empty(); }

std::size_t DiffArray::rows() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  return element_count(s) / s.back();
}

std::size_t DiffArray::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

double DiffArray::item() const {
  if (size() != 1) {
    throw DimensionError("item(): array has shape " + to_string(shape()));
  }
  return values()[0];
}

// ---- Tape -------------------------------------------------------------------

DiffArray Tape::constant(Shape shape, std::vector<double> values) {
  if (element_count(shape) != values.size()) {
    throw DimensionError("constant: shape " + to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  records_.push_back({std::move(shape), std::move(values), {}, {}, nullptr, false});
  return {this, records_.size() - 1};
}

DiffArray Tape::variable(Shape shape, std::vector<double> values) {
  auto a = constant(std::move(shape), std::move(values));
  records_.back().requires_grad = true;
  return a;
}

DiffArray Tape::push(Shape shape, std::vector<double> values,
                     std::vector<std::size_t> inputs, ReverseRule reverse) {
  const bool grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return records_[i].requires_grad; });
  records_.push_back({std::move(shape), std::move(values), {}, std::move(inputs),
                      grad ? std::move(reverse) : nullptr, grad});
  return {this, records_.size() - 1};
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  auto& r = records_[id];
  if (r.grad.empty()) r.grad.assign(r.value.size(), 0.0);
  return r.grad;
}

void Tape::backward(const DiffArray& loss) {
  if (&loss.tape() != this) throw InputError("backward: loss belongs to another tape");
  if (loss.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " + to_string(loss.shape()));
  }
  if (reversed_) throw InputError("backward: tape already reversed");
  reversed_ = true;
  reverse_visits_ = 0;
  for (std::size_t id = 0; id <= loss.id(); ++id) {
    if (records_[id].requires_grad) grad_buffer(id);
  }
  if (!records_[loss.id()].requires_grad) return;
  records_[loss.id()].grad[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& r = records_[id];
    if (r.reverse) {
      r.reverse(*this, id);
      ++reverse_visits_;
    }
  }
}

// ---- operations -------------------------------------------------------------

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  require_same_tape(a, b, "matmul");
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ for " + to_string(a.shape()) +
                         " x " + to_string(b.shape()));
  }
  Tape& tape = a.tape();
  std::vector<double> out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() =
      as_matrix(tape.record(a.id()).value, m, k) * as_matrix(tape.record(b.id()).value, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.push({m, n}, std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const auto g = as_matrix(t.record(self).grad, m, n);
    if (t.wants_grad(ia)) {
      as_matrix(t.grad_buffer(ia), m, k).noalias() +=
          g * as_matrix(t.record(ib).value, k, n).transpose();
    }
    if (t.wants_grad(ib)) {
      as_matrix(t.grad_buffer(ib), k, n).noalias() +=
          as_matrix(t.record(ia).value, m, k).transpose() * g;
    }
  });
}

DiffArray elementwise(ElementwiseKind kind, const DiffArray& a, const DiffArray* b,
                      double factor) {
  Tape& tape = a.tape();
  const std::size_t ia = a.id();
  const auto& av = tape.record(ia).value;
  const std::size_t n = av.size();

  switch (kind) {
    case ElementwiseKind::relu: {
      tape.note_relu_input(ia);
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
      return tape.push(a.shape(), std::move(out), {ia}, [=](Tape& t, std::size_t self) {
        // Branch-free so it vectorizes; the sign pattern is unpredictable.
        const double* __restrict x = t.record(ia).value.data();
        const double* __restrict g = t.record(self).grad.data();
        double* __restrict ga = t.grad_buffer(ia).data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
      });
    }
    case ElementwiseKind::scale: {
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * factor;
      return tape.push(a.shape(), std::move(out), {ia}, [=](Tape& t, std::size_t self) {
        const auto& g = t.record(self).grad;
        auto ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
      });
    }
    case ElementwiseKind::add:
    case ElementwiseKind::multiply:
      break;
  }

  if (b == nullptr) throw InputError("elementwise: binary kind needs two operands");
  require_same_tape(a, *b, "elementwise");
  if (!broadcastable(a.shape(), b->shape())) {
    throw DimensionError("elementwise: cannot broadcast " + to_string(b->shape()) +
                         " against " + to_string(a.shape()));
  }
  const std::size_t ib = b->id();
  const auto& bv = tape.record(ib).value;
  const std::size_t nb = bv.size();
  std::vector<double> out(n);

  // b repeats every nb elements of a.
  const std::size_t reps = n / std::max<std::size_t>(nb, 1);

  if (kind == ElementwiseKind::add) {
    for (std::size_t r = 0; r < reps; ++r) {
      const double* x = av.data() + r * nb;
      double* y = out.data() + r * nb;
      for (std::size_t c = 0; c < nb; ++c) y[c] = x[c] + bv[c];
    }
    return tape.push(a.shape(), std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
      const auto& g = t.record(self).grad;
      if (t.wants_grad(ia)) {
        auto ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (t.wants_grad(ib)) {
        auto gb = t.grad_buffer(ib);
        for (std::size_t r = 0; r < reps; ++r) {
          const double* gr = g.data() + r * nb;
          for (std::size_t c = 0; c < nb; ++c) gb[c] += gr[c];
        }
      }
    });
  }

  for (std::size_t r = 0; r < reps; ++r) {
    const double* x = av.data() + r * nb;
    double* y = out.data() + r * nb;
    for (std::size_t c = 0; c < nb; ++c) y[c] = x[c] * bv[c];
  }
  return tape.push(a.shape(), std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const auto& g = t.record(self).grad;
    const auto& x = t.record(ia).value;
    const auto& y = t.record(ib).value;
    const bool ga_on = t.wants_grad(ia), gb_on = t.wants_grad(ib);
    std::span<double> ga = ga_on ? t.grad_buffer(ia) : std::span<double>{};
    std::span<double> gb = gb_on ? t.grad_buffer(ib) : std::span<double>{};
    for (std::size_t r = 0; r < reps; ++r) {
      const std::size_t base = r * nb;
      for (std::size_t c = 0; c < nb; ++c) {
        if (ga_on) ga[base + c] += g[base + c] * y[c];
        if (gb_on) gb[c] += g[base + c] * x[base + c];
      }
    }
  });
}

DiffArray add(const DiffArray& a, const DiffArray& b) {
  return elementwise(ElementwiseKind::add, a, &b);
}

DiffArray multiply(const DiffArray& a, const DiffArray& b) {
  return elementwise(ElementwiseKind::multiply, a, &b);
}

DiffArray relu(const DiffArray& a) { return elementwise(ElementwiseKind::relu, a); }

DiffArray scale(const DiffArray& a, double factor) {
  return elementwise(ElementwiseKind::scale, a, nullptr, factor);
}

DiffArray softmax_rows(const DiffArray& a) {
  Tape& tape = a.tape();
  const std::size_t ia = a.id();
  const std::size_t rows = a.rows(), cols = a.cols();
  const auto& x = tape.record(ia).value;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = kNegInf;
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(in[c])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(r));
      mx = std::max(mx, in[c]);
    }
    if (!std::isfinite(mx)) {
      throw NumericError("softmax_rows: row " + std::to_string(r) + " has no finite entry");
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(in[c] - mx);
      sum += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
  }
  return tape.push(a.shape(), std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const auto& y = t.record(self).value;
    const auto& g = t.record(self).grad;
    auto ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[base + c] * g[base + c];
      for (std::size_t c = 0; c < cols; ++c) ga[base + c] += y[base + c] * (g[base + c] - dot);
    }
  });
}

DiffArray cross_entropy(const DiffArray& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "cross_entropy");
  Tape& tape = logits.tape();
  const std::size_t il = logits.id();
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (batch == 0) throw InputError("cross_entropy: empty batch");
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + to_string(logits.shape()));
  }
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] >= classes) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range [0, " + std::to_string(classes) + ")");
    }
  }
  const auto& x = tape.record(il).value;
  // Softmax is kept for the reverse rule.
  std::vector<double> probs(x.size());
  std::vector<std::size_t> kept(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const double* in = x.data() + r * classes;
    double* p = probs.data() + r * classes;
    const double mx = *std::max_element(in, in + classes);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = std::exp(in[c] - mx);
      sum += p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[c] /= sum;
    total += mx + std::log(sum) - in[kept[r]];
  }
  const double loss = total / static_cast<double>(batch);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  return tape.push({1}, {loss}, {il},
                   [=, probs = std::move(probs), kept = std::move(kept)](Tape& t, std::size_t self) {
                     const double g = t.record(self).grad[0] / static_cast<double>(batch);
                     auto gl = t.grad_buffer(il);
                     for (std::size_t r = 0; r < batch; ++r) {
                       for (std::size_t c = 0; c < classes; ++c) {
                         gl[r * classes + c] += g * probs[r * classes + c];
                       }
                       gl[r * classes + kept[r]] -= g;
                     }
                   });
}

DiffArray embedding_gather(const DiffArray& table, std::span<const std::size_t> indices) {
  require_matrix(table, "embedding_gather");
  Tape& tape = table.tape();
  const std::size_t it = table.id();
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  for (std::size_t idx : indices) {
    if (idx >= vocab) {
      throw IndexError("embedding_gather: index " + std::to_string(idx) +
                       " out of range [0, " + std::to_string(vocab) + ")");
    }
  }
  const auto& src = tape.record(it).value;
  std::vector<double> out(indices.size() * dim);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(src.data() + indices[r] * dim, dim, out.data() + r * dim);
  }
  std::vector<std::size_t> kept(indices.begin(), indices.end());
  return tape.push({indices.size(), dim}, std::move(out), {it},
                   [=, kept = std::move(kept)](Tape& t, std::size_t self) {
                     const auto& g = t.record(self).grad;
                     auto gt = t.grad_buffer(it);
                     for (std::size_t r = 0; r < kept.size(); ++r) {
                       const double* src_row = g.data() + r * dim;
                       double* dst = gt.data() + kept[r] * dim;
                       for (std::size_t c = 0; c < dim; ++c) dst[c] += src_row[c];
                     }
                   });
}

DiffArray head_scores(const DiffArray& q, const DiffArray& k, std::size_t heads,
                      std::size_t seq_len, std::size_t q_len, double scale, bool causal) {
  require_same_tape(q, k, "head_scores");
  require_matrix(q, "head_scores");
  require_matrix(k, "head_scores");
  const std::size_t d = q.cols();
  if (k.cols() != d || heads == 0 || d % heads != 0 || q_len == 0 || q_len > seq_len ||
      k.rows() % seq_len != 0 || q.rows() * seq_len != k.rows() * q_len) {
    throw DimensionError("head_scores: incompatible q " + to_string(q.shape()) + " and k " +
                         to_string(k.shape()) + " for " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = k.rows() / seq_len, dh = d / heads;
  const std::size_t offset = seq_len - q_len;
  Tape& tape = q.tape();
  const std::size_t iq = q.id(), ik = k.id();
  const auto& qv = tape.record(iq).value;
  const auto& kv = tape.record(ik).value;
  std::vector<double> out(batch * heads * q_len * seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < q_len; ++i) {
        const double* qrow = qv.data() + (b * q_len + i) * d + h * dh;
        double* srow = out.data() + ((b * heads + h) * q_len + i) * seq_len;
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (causal && j > offset + i) {
            srow[j] = kNegInf;
            continue;
          }
          const double* krow = kv.data() + (b * seq_len + j) * d + h * dh;
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qrow[c] * krow[c];
          srow[j] = dot * scale;
        }
      }
    }
  }
  const std::size_t rows = batch * heads * q_len;
  return tape.push({rows, seq_len}, std::move(out), {iq, ik}, [=](Tape& t, std::size_t self) {
    const auto& g = t.record(self).grad;
    const auto& qv = t.record(iq).value;
    const auto& kv = t.record(ik).value;
    const bool gq_on = t.wants_grad(iq), gk_on = t.wants_grad(ik);
    std::span<double> gq = gq_on ? t.grad_buffer(iq) : std::span<double>{};
    std::span<double> gk = gk_on ? t.grad_buffer(ik) : std::span<double>{};
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < q_len; ++i) {
          const std::size_t qoff = (b * q_len + i) * d + h * dh;
          const double* grow = g.data() + ((b * heads + h) * q_len + i) * seq_len;
          for (std::size_t j = 0; j < seq_len; ++j) {
            if (causal && j > offset + i) continue;
            const double w = grow[j] * scale;
            if (w == 0.0) continue;
            const std::size_t koff = (b * seq_len + j) * d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) {
              if (gq_on) gq[qoff + c] += w * kv[koff + c];
              if (gk_on) gk[koff + c] += w * qv[qoff + c];
            }
          }
        }
      }
    }
  });
}

DiffArray head_mix(const DiffArray& weights, const DiffArray& v, std::size_t heads,
                   std::size_t seq_len, std::size_t q_len) {
  require_same_tape(weights, v, "head_mix");
  require_matrix(weights, "head_mix");
  require_matrix(v, "head_mix");
  const std::size_t d = v.cols();
  if (heads == 0 || d % heads != 0 || weights.cols() != seq_len || v.rows() % seq_len != 0 ||
      weights.rows() != (v.rows() / seq_len) * heads * q_len) {
    throw DimensionError("head_mix: incompatible weights " + to_string(weights.shape()) +
                         " and values " + to_string(v.shape()));
  }
  const std::size_t batch = v.rows() / seq_len, dh = d / heads;
  Tape& tape = v.tape();
  const std::size_t iw = weights.id(), iv = v.id();
  const auto& wv = tape.record(iw).value;
  const auto& vv = tape.record(iv).value;
  std::vector<double> out(batch * q_len * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < q_len; ++i) {
        const double* wrow = wv.data() + ((b * heads + h) * q_len + i) * seq_len;
        double* orow = out.data() + (b * q_len + i) * d + h * dh;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double w = wrow[j];
          if (w == 0.0) continue;
          const double* vrow = vv.data() + (b * seq_len + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vrow[c];
        }
      }
    }
  }
  return tape.push({batch * q_len, d}, std::move(out), {iw, iv}, [=](Tape& t, std::size_t self) {
    const auto& g = t.record(self).grad;
    const auto& wv = t.record(iw).value;
    const auto& vv = t.record(iv).value;
    const bool gw_on = t.wants_grad(iw), gv_on = t.wants_grad(iv);
    std::span<double> gw = gw_on ? t.grad_buffer(iw) : std::span<double>{};
    std::span<double> gv = gv_on ? t.grad_buffer(iv) : std::span<double>{};
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < q_len; ++i) {
          const std::size_t wbase = ((b * heads + h) * q_len + i) * seq_len;
          const double* grow = g.data() + (b * q_len + i) * d + h * dh;
          for (std::size_t j = 0; j < seq_len; ++j) {
            const std::size_t voff = (b * seq_len + j) * d + h * dh;
            if (gw_on) {
              double dot = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dot += grow[c] * vv[voff + c];
              gw[wbase + j] += dot;
            }
            if (gv_on) {
              const double w = wv[wbase + j];
              if (w == 0.0) continue;
              for (std::size_t c = 0; c < dh; ++c) gv[voff + c] += w * grow[c];
            }
          }
        }
      }
    }
  });
}

// ---- gradient checking ------------------------------------------------------

namespace {

struct Evaluation {
  double loss = 0.0;
  std::vector<std::vector<double>> relu_pre;
};

Evaluation evaluate(const ScalarFunction& f, std::span<const ParamBlock> params) {
  Tape tape;
  std::vector<DiffArray> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.constant(p.shape, p.values));
  const DiffArray loss = f(tape, leaves);
  Evaluation e;
  e.loss = loss.item();
  if (!std::isfinite(e.loss)) throw NumericError("grad_check: non-finite loss");
  for (std::size_t id : tape.relu_inputs()) e.relu_pre.push_back(tape.record(id).value);
  return e;
}

// A perturbation is unusable when some relu input it moves is within
// `margin` of the kink or changes sign.
bool touches_kink(const Evaluation& base, const Evaluation& plus, const Evaluation& minus,
                  double margin) {
  for (std::size_t r = 0; r < base.relu_pre.size(); ++r) {
    const auto& z = base.relu_pre[r];
    const auto& zp = plus.relu_pre[r];
    const auto& zm = minus.relu_pre[r];
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (zp[i] == zm[i]) continue;
      if (std::abs(z[i]) < margin || (zp[i] > 0.0) != (zm[i] > 0.0)) return true;
    }
  }
  return false;
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, std::span<const ParamBlock> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw InputError("grad_check: step must be positive");

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<DiffArray> leaves;
    for (const auto& p : params) leaves.push_back(tape.variable(p.shape, p.values));
    const DiffArray loss = f(tape, leaves);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
    for (const auto& leaf : leaves) {
      analytic.emplace_back(leaf.gradient().begin(), leaf.gradient().end());
    }
  }
  const Evaluation base = evaluate(f, params);

  // (block, index) pairs to probe.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].values.size(); ++i) coords.emplace_back(b, i);
  }
  if (coords.size() > options.subsample_above) {
    Rng rng(derive_seed(options.seed, Stream::gradcheck));
    const std::size_t keep = std::min(options.subsample_size, coords.size());
    for (std::size_t i = 0; i < keep; ++i) {
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    }
    coords.resize(keep);
  }

  GradCheckResult result;
  std::vector<ParamBlock> work(params.begin(), params.end());
  for (auto [b, i] : coords) {
    const double original = work[b].values[i];
    work[b].values[i] = original + options.step;
    const Evaluation plus = evaluate(f, work);
    work[b].values[i] = original - options.step;
    const Evaluation minus = evaluate(f, work);
    work[b].values[i] = original;

    if (touches_kink(base, plus, minus, 10.0 * options.step)) {
      ++result.rejected;
      continue;
    }
    const double numeric = (plus.loss - minus.loss) / (2.0 * options.step);
    const double a = analytic[b][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
    ++result.checked;
  }
  return result;
}

}  // namespace groklab::numerics
