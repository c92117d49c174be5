#include <benchmark/benchmark.h>

#include <vector>

#include "groklab/model.hpp"
#include "groklab/numerics.hpp"
#include "groklab/tasks.hpp"
#include "groklab/trainer.hpp"

using namespace groklab;

namespace {

model::ModelConfig config(std::size_t d_h) {
  model::ModelConfig cfg;
  cfg.d_h = d_h;
  return cfg;
}

// One full-batch epoch without the optimizer: forward, loss, reverse.
void BM_TrainEpoch(benchmark::State& state) {
  const auto cfg = config(static_cast<std::size_t>(state.range(0)));
  const auto params = model::init_parameters(cfg);
  const auto ds = tasks::gen_mod_add(113, 3000, 0);
  const auto batch = model::encode(ds.train, 113);
  std::vector<std::size_t> labels;
  for (const auto& e : ds.train) labels.push_back(e.label);
  for (auto _ : state) {
    numerics::Tape tape;
    const auto fr = model::run_model(tape, params, cfg, batch, true);
    const auto loss = numerics::cross_entropy(fr.logits, labels);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_TrainEpoch)->Arg(8)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  const auto cfg = config(static_cast<std::size_t>(state.range(0)));
  const auto params = model::init_parameters(cfg);
  const auto ds = tasks::gen_mod_add(113, 3000, 0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(trainer::evaluate(params, cfg, ds.val).loss);
  }
}
BENCHMARK(BM_Evaluate)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_AdamW(benchmark::State& state) {
  const auto cfg = config(static_cast<std::size_t>(state.range(0)));
  auto params = model::init_parameters(cfg);
  const auto grads = params.filled(1e-3);
  auto opt = trainer::AdamWState::like(params);
  trainer::TrainConfig tc;
  for (auto _ : state) {
    trainer::adamw_step(params, grads, opt, tc);
  }
}
BENCHMARK(BM_AdamW)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

}  // namespace
