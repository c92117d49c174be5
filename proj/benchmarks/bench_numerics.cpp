#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "groklab/numerics.hpp"

using namespace groklab::numerics;

namespace {

std::vector<double> noise(std::size_t n) {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

// [m×k]·[k×n] forward and reverse, with a cross-entropy head to seed the
// gradient. Shapes match a d_h = 64 model on 3000 examples.
void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = noise(m * k), b = noise(k * n);
  for (auto _ : state) {
    Tape tape;
    auto x = tape.variable({m, k}, a);
    auto w = tape.variable({k, n}, b);
    auto y = matmul(x, w);
    auto loss = cross_entropy(y, std::vector<std::size_t>(m, 0));
    tape.backward(loss);
    benchmark::DoNotOptimize(x.gradient().data());
  }
  state.counters["flop/s"] = benchmark::Counter(6.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Matmul)->Args({3000, 64, 256})->Args({3000, 256, 64})->Args({3000, 64, 113})
    ->Unit(benchmark::kMillisecond);

void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto v = noise(rows * 3);
  for (auto _ : state) {
    Tape tape;
    auto y = softmax_rows(tape.constant({rows, 3}, v));
    benchmark::DoNotOptimize(y.values().data());
  }
}
BENCHMARK(BM_Softmax)->Arg(12000)->Unit(benchmark::kMicrosecond);

void BM_Relu(benchmark::State& state) {
  const std::size_t rows = 3000, cols = static_cast<std::size_t>(state.range(0));
  const auto v = noise(rows * cols);
  const std::vector<std::size_t> labels(rows, 0);
  for (auto _ : state) {
    Tape tape;
    auto x = tape.variable({rows, cols}, v);
    auto loss = cross_entropy(relu(x), labels);
    tape.backward(loss);
    benchmark::DoNotOptimize(x.gradient().data());
  }
}
BENCHMARK(BM_Relu)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
