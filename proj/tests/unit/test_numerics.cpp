#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "groklab/errors.hpp"
#include "groklab/numerics.hpp"

using namespace groklab;
using namespace groklab::numerics;

namespace {

std::vector<double> random_values(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

// Independent central-difference oracle: perturbs one input at a time and
// re-evaluates a plain double function built on a fresh tape.
using Builder = std::function<DiffArray(Tape&, std::vector<DiffArray>&)>;

double max_rel_error(const Builder& build, const std::vector<std::pair<Shape, std::vector<double>>>& inputs,
                     double step = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<DiffArray> leaves;
    for (const auto& [s, v] : inputs) leaves.push_back(tape.variable(s, v));
    DiffArray loss = build(tape, leaves);
    tape.backward(loss);
    for (auto& l : leaves) analytic.emplace_back(l.gradient().begin(), l.gradient().end());
  }
  auto eval = [&](const std::vector<std::pair<Shape, std::vector<double>>>& in) {
    Tape tape;
    std::vector<DiffArray> leaves;
    for (const auto& [s, v] : in) leaves.push_back(tape.constant(s, v));
    return build(tape, leaves).item();
  };
  double worst = 0.0;
  auto work = inputs;
  for (std::size_t b = 0; b < work.size(); ++b) {
    for (std::size_t i = 0; i < work[b].second.size(); ++i) {
      const double x = work[b].second[i];
      work[b].second[i] = x + step;
      const double up = eval(work);
      work[b].second[i] = x - step;
      const double down = eval(work);
      work[b].second[i] = x;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[b][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
    }
  }
  return worst;
}

// Weighted sum turns any array into a scalar with non-trivial upstream
// gradients.
DiffArray weighted_sum(Tape& tape, const DiffArray& x, unsigned seed = 99) {
  const auto w = tape.constant({x.rows(), x.cols()}, random_values(x.size(), seed));
  const auto prod = multiply(x, w);
  const auto ones = tape.constant({x.cols(), 1}, std::vector<double>(x.cols(), 1.0));
  const auto row_sums = matmul(prod, ones);
  const auto ones_r = tape.constant({1, x.rows()}, std::vector<double>(x.rows(), 1.0));
  return matmul(ones_r, row_sums);
}

}  // namespace

TEST_CASE("matmul forward by hand") {
  Tape t;
  auto id = t.constant({2, 2}, {1, 0, 0, 1});
  auto m = t.constant({2, 2}, {3, 4, 5, 6});
  auto r = matmul(id, m);
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{3, 4, 5, 6});
  auto a = t.constant({1, 2}, {1, 2});
  auto b = t.constant({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape t;
  auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.constant({2, 3}, std::vector<double>(6, 1.0));
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradients match finite differences") {
  const double err = max_rel_error(
      [](Tape& t, std::vector<DiffArray>& x) { return weighted_sum(t, matmul(x[0], x[1])); },
      {{{5, 7}, random_values(35, 1)}, {{7, 3}, random_values(21, 2)}});
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise forward") {
  Tape t;
  auto r = relu(t.constant({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{0, 0, 2});
  auto s = add(t.constant({2}, {1, 2}), t.constant({2}, {3, 4}));
  CHECK(std::vector<double>(s.values().begin(), s.values().end()) == std::vector<double>{4, 6});
  auto sc = scale(t.constant({2}, {1, -2}), 3.0);
  CHECK(sc.values()[1] == -6.0);
}

TEST_CASE("broadcast add over leading rows") {
  Tape t;
  auto a = t.variable({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = t.variable({3}, {10, 20, 30});
  auto s = add(a, b);
  CHECK(s.values()[4] == 25.0);
  const double err = max_rel_error(
      [](Tape& tt, std::vector<DiffArray>& x) { return weighted_sum(tt, add(x[0], x[1])); },
      {{{4, 3}, random_values(12, 3)}, {{3}, random_values(3, 4)}});
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise shape mismatch throws") {
  Tape t;
  auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.constant({2}, std::vector<double>(2, 1.0));
  CHECK_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("multiply gradients match finite differences") {
  const double err = max_rel_error(
      [](Tape& t, std::vector<DiffArray>& x) { return weighted_sum(t, multiply(x[0], x[1])); },
      {{{4, 4}, random_values(16, 5)}, {{4, 4}, random_values(16, 6)}});
  CHECK(err < 1e-6);
}

TEST_CASE("relu gradient uses relu'(0) = 0") {
  // Reduce y to a scalar through a [1×3]·[3×1] product with a ones vector.
  Tape t2;
  auto x2 = t2.variable({1, 3}, {-1.0, 0.0, 2.0});
  auto s = matmul(relu(x2), t2.constant({3, 1}, {1, 1, 1}));
  t2.backward(s);
  CHECK(std::vector<double>(x2.gradient().begin(), x2.gradient().end()) ==
        std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("softmax_rows") {
  Tape t;
  auto u = softmax_rows(t.constant({1, 3}, {0, 0, 0}));
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
  auto big = softmax_rows(t.constant({1, 3}, {1000, 0, -1000}));
  CHECK(big.values()[0] == doctest::Approx(1.0));
  CHECK(big.values()[1] < 1e-300);
  CHECK(std::isfinite(big.values()[2]));

  auto rows = softmax_rows(t.constant({4, 5}, random_values(20, 7)));
  for (std::size_t r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) sum += rows.values()[r * 5 + c];
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  const double err = max_rel_error(
      [](Tape& tt, std::vector<DiffArray>& x) { return weighted_sum(tt, softmax_rows(x[0])); },
      {{{3, 5}, random_values(15, 8)}});
  CHECK(err < 1e-6);
}

TEST_CASE("softmax_rows handles -inf and rejects NaN") {
  const double inf = std::numeric_limits<double>::infinity();
  Tape t;
  auto s = softmax_rows(t.constant({1, 3}, {0.0, -inf, 0.0}));
  CHECK(s.values()[1] == 0.0);
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(softmax_rows(t.constant({1, 2}, {-inf, -inf})), NumericError);
  CHECK_THROWS_AS(softmax_rows(t.constant({1, 2}, {std::nan(""), 0.0})), NumericError);
}

TEST_CASE("cross_entropy") {
  Tape t;
  std::vector<std::size_t> label = {5};
  auto uniform = cross_entropy(t.constant({1, 113}, std::vector<double>(113, 0.25)), label);
  CHECK(uniform.item() == doctest::Approx(std::log(113.0)).epsilon(1e-12));
  CHECK(std::abs(uniform.item() - 4.7274) < 1e-4);

  std::vector<double> onehot(113, 0.0);
  onehot[5] = 30.0;
  auto confident = cross_entropy(t.constant({1, 113}, onehot), label);
  CHECK(confident.item() >= 0.0);
  CHECK(confident.item() < 1e-10);

  std::vector<std::size_t> bad = {113};
  CHECK_THROWS_AS(cross_entropy(t.constant({1, 113}, onehot), bad), IndexError);
}

TEST_CASE("cross_entropy gradient is (softmax - onehot) / B") {
  const auto logits = random_values(3 * 6, 9);
  std::vector<std::size_t> labels = {1, 4, 0};
  Tape t;
  auto x = t.variable({3, 6}, logits);
  auto loss = cross_entropy(x, labels);
  t.backward(loss);
  for (std::size_t r = 0; r < 3; ++r) {
    double mx = -1e300, z = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mx = std::max(mx, logits[r * 6 + c]);
    for (std::size_t c = 0; c < 6; ++c) z += std::exp(logits[r * 6 + c] - mx);
    for (std::size_t c = 0; c < 6; ++c) {
      const double p = std::exp(logits[r * 6 + c] - mx) / z;
      const double expected = (p - (c == labels[r] ? 1.0 : 0.0)) / 3.0;
      CHECK(x.gradient()[r * 6 + c] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  const double err = max_rel_error(
      [&](Tape&, std::vector<DiffArray>& in) { return cross_entropy(in[0], labels); },
      {{{3, 6}, logits}});
  CHECK(err < 1e-6);
}

TEST_CASE("embedding_gather") {
  Tape t;
  auto table = t.variable({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  std::vector<std::size_t> idx0 = {0};
  auto row = embedding_gather(table, idx0);
  CHECK(std::vector<double>(row.values().begin(), row.values().end()) == std::vector<double>{1, 0, 0});

  std::vector<std::size_t> idx = {2, 2};
  auto rows = embedding_gather(table, idx);
  auto s = matmul(t.constant({1, 2}, {1, 1}), matmul(rows, t.constant({3, 1}, {1, 1, 1})));
  t.backward(s);
  const auto g = table.gradient();
  CHECK(g[6] == 2.0);
  CHECK(g[7] == 2.0);
  CHECK(g[0] == 0.0);

  std::vector<std::size_t> oob = {3};
  CHECK_THROWS_AS(embedding_gather(table, oob), IndexError);

  std::vector<std::size_t> many = {0, 3, 1, 3, 4};
  const double err = max_rel_error(
      [&](Tape& tt, std::vector<DiffArray>& x) { return weighted_sum(tt, embedding_gather(x[0], many)); },
      {{{5, 4}, random_values(20, 10)}});
  CHECK(err < 1e-6);
}

TEST_CASE("attention ops: causal mask and gradients") {
  const std::size_t B = 2, S = 3, H = 2, d = 4;
  Tape t;
  auto q = t.constant({B * S, d}, random_values(B * S * d, 11));
  auto k = t.constant({B * S, d}, random_values(B * S * d, 12));
  auto w = softmax_rows(head_scores(q, k, H, S, S, 0.5, true));
  for (std::size_t row = 0; row < B * H * S; ++row) {
    const std::size_t i = row % S;
    for (std::size_t j = i + 1; j < S; ++j) CHECK(w.values()[row * S + j] == 0.0);
  }
  const double err = max_rel_error(
      [&](Tape& tt, std::vector<DiffArray>& x) {
        auto weights = softmax_rows(head_scores(x[0], x[1], H, S, 1, 0.5, true));
        return weighted_sum(tt, head_mix(weights, x[2], H, S, 1));
      },
      {{{B, d}, random_values(B * d, 13)},
       {{B * S, d}, random_values(B * S * d, 14)},
       {{B * S, d}, random_values(B * S * d, 15)}});
  CHECK(err < 1e-6);
}

TEST_CASE("backward runs each rule once and only once per tape") {
  Tape t;
  auto x = t.variable({1, 2}, {1.0, 2.0});
  auto y = matmul(x, t.constant({2, 1}, {3.0, 4.0}));
  t.backward(y);
  CHECK(t.reverse_visits() == 1);
  CHECK_THROWS(t.backward(y));
}

TEST_CASE("backward requires a scalar") {
  Tape t;
  auto x = t.variable({2}, {1.0, 2.0});
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(t.backward(y), DimensionError);
}

TEST_CASE("identical inputs give bit-identical tapes") {
  auto run = [] {
    Tape t;
    auto a = t.variable({4, 5}, random_values(20, 16));
    auto b = t.variable({5, 3}, random_values(15, 17));
    auto l = cross_entropy(matmul(relu(a), b), std::vector<std::size_t>{0, 1, 2, 0});
    t.backward(l);
    std::vector<double> out(a.gradient().begin(), a.gradient().end());
    out.push_back(l.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("grad_check: quadratic") {
  const ScalarFunction f = [](Tape& t, std::span<const DiffArray> p) {
    return matmul(multiply(p[0], p[0]), t.constant({2, 1}, {1, 1}));
  };
  std::vector<ParamBlock> params = {{{1, 2}, {1.0, 2.0}}};
  // Analytic gradient of w·w is 2w.
  Tape t;
  auto w = t.variable({1, 2}, {1.0, 2.0});
  auto loss = f(t, std::vector<DiffArray>{w});
  t.backward(loss);
  CHECK(w.gradient()[0] == 2.0);
  CHECK(w.gradient()[1] == 4.0);
  const auto r = grad_check(f, params);
  CHECK(r.max_relative_error < 1e-8);
  CHECK(r.checked == 2);
}

TEST_CASE("grad_check rejects coordinates next to a relu kink") {
  const ScalarFunction f = [](Tape& t, std::span<const DiffArray> p) {
    return matmul(relu(p[0]), t.constant({2, 1}, {1, 1}));
  };
  std::vector<ParamBlock> params = {{{1, 2}, {1e-6, 0.5}}};
  const auto r = grad_check(f, params);
  CHECK(r.rejected == 1);
  CHECK(r.checked == 1);
  CHECK(r.max_relative_error < 1e-8);
}

TEST_CASE("grad_check subsamples large parameter sets") {
  const ScalarFunction f = [](Tape& t, std::span<const DiffArray> p) {
    return matmul(p[0], t.constant({p[0].cols(), 1}, std::vector<double>(p[0].cols(), 1.0)));
  };
  std::vector<ParamBlock> params = {{{1, 12000}, random_values(12000, 18)}};
  GradCheckOptions opt;
  const auto r = grad_check(f, params, opt);
  CHECK(r.checked + r.rejected == opt.subsample_size);
}
