#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "groklab/errors.hpp"
#include "groklab/model.hpp"
#include "groklab/tasks.hpp"
#include "groklab/trainer.hpp"

using namespace groklab;
using namespace groklab::trainer;

namespace {

model::Parameters scalar(double v) {
  model::Parameters p;
  p.tensors.push_back({"w", {1}, {v}});
  return p;
}

model::ModelConfig tiny(std::uint32_t modulus = 113, std::size_t d_h = 8) {
  model::ModelConfig cfg;
  cfg.d_h = d_h;
  cfg.modulus = modulus;
  return cfg;
}

}  // namespace

TEST_CASE("adamw: zero gradient only decays") {
  TrainConfig cfg;
  auto p = scalar(2.0);
  auto state = AdamWState::like(p);
  adamw_step(p, scalar(0.0), state, cfg);
  CHECK(p.tensors[0].values[0] == doctest::Approx(2.0 * (1.0 - 1e-3)).epsilon(1e-15));
  cfg.weight_decay = 0.0;
  auto q = scalar(2.0);
  auto s2 = AdamWState::like(q);
  adamw_step(q, scalar(0.0), s2, cfg);
  CHECK(q.tensors[0].values[0] == 2.0);
}

TEST_CASE("adamw: embeddings can be excluded from decay") {
  TrainConfig cfg;
  cfg.decay_embeddings = false;
  model::Parameters p;
  p.tensors.push_back({"token_embed", {1}, {1.0}});
  p.tensors.push_back({"unembed", {1}, {1.0}});
  auto g = p.filled(0.0);
  auto state = AdamWState::like(p);
  adamw_step(p, g, state, cfg);
  CHECK(p.tensors[0].values[0] == 1.0);
  CHECK(p.tensors[1].values[0] < 1.0);
}

TEST_CASE("adamw: matches a hand-written update on a scalar quadratic") {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.5;
  auto p = scalar(5.0);
  auto state = AdamWState::like(p);

  double theta = 5.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 500; ++t) {
    const double g_lib = p.tensors[0].values[0] - 3.0;
    adamw_step(p, scalar(g_lib), state, cfg);

    const double g = theta - 3.0;
    theta -= 0.01 * 0.5 * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.98 * v + 0.02 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.98, t));
    theta -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(p.tensors[0].values[0] == doctest::Approx(theta).epsilon(1e-12));
  CHECK(state.step == 500);
}

TEST_CASE("adamw: rejects non-finite gradients and mismatched layouts") {
  TrainConfig cfg;
  auto p = scalar(1.0);
  auto state = AdamWState::like(p);
  CHECK_THROWS_AS(adamw_step(p, scalar(std::nan("")), state, cfg), NumericError);
  model::Parameters two;
  two.tensors.push_back({"w", {2}, {0.0, 0.0}});
  CHECK_THROWS_AS(adamw_step(p, two, state, cfg), DimensionError);
}

TEST_CASE("train config validation and json") {
  TrainConfig cfg;
  cfg.eval_every = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.max_epochs = 123;
  cfg.decay_embeddings = false;
  CHECK(to_json(train_config_from_json(to_json(cfg))) == to_json(cfg));
}

TEST_CASE("argmax accuracy") {
  const std::vector<double> logits = {1, 2, 3, 5, 4, 0, 1, 1, 0};
  CHECK(argmax_accuracy(logits, 3, std::vector<std::uint32_t>{2, 0, 0}) == doctest::Approx(1.0));
  CHECK(argmax_accuracy(logits, 3, std::vector<std::uint32_t>{2, 0, 1}) ==
        doctest::Approx(2.0 / 3.0));
  CHECK(argmax_accuracy(logits, 3, std::vector<std::uint32_t>{}) == 0.0);
}

TEST_CASE("evaluate: initial loss near ln P, memo accuracy at chance") {
  const auto cfg = tiny(113, 64);
  const auto p = model::init_parameters(cfg);
  const auto ds = tasks::gen_mod_add(113, 3000, 0);
  const auto e = evaluate(p, cfg, ds.train);
  CHECK(std::abs(e.loss - std::log(113.0)) < 0.2);

  const auto memo = tasks::gen_random_memo(113, 1, tasks::Operator::minus, false, 12769);
  const auto r = evaluate(p, cfg, memo.train);
  const double sd = std::sqrt((1.0 / 113.0) * (112.0 / 113.0) / 12769.0);
  CHECK(std::abs(r.accuracy - 1.0 / 113.0) < 5.0 * sd);
  CHECK_THROWS_AS(evaluate(p, cfg, std::vector<tasks::Example>{}), InputError);
}

TEST_CASE("train_run: schedule, determinism and order invariance") {
  const auto cfg = tiny(23);
  const auto ds = tasks::gen_mod_add(23, 150, 0);
  TrainConfig tc;
  tc.max_epochs = 25;
  tc.eval_every = 10;
  const auto a = train_run(cfg, ds, tc);
  REQUIRE(a.records.size() == 4);
  CHECK(a.records[0].epoch == 0);
  CHECK(a.records[2].epoch == 20);
  CHECK(a.records[3].epoch == 25);
  CHECK(std::abs(a.records[0].train_loss - std::log(23.0)) < 0.2);
  CHECK(a.records[3].train_loss < a.records[0].train_loss);
  CHECK(a.records[0].val_acc.has_value());
  CHECK_FALSE(a.records[0].memo_acc.has_value());
  CHECK_FALSE(a.stopped_early);

  const auto b = train_run(cfg, ds, tc);
  CHECK(a.records == b.records);

  auto shuffled = ds;
  std::reverse(shuffled.train.begin(), shuffled.train.end());
  const auto c = train_run(cfg, shuffled, tc);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(c.records[i].train_loss == doctest::Approx(a.records[i].train_loss).epsilon(1e-9));
    CHECK(*c.records[i].val_loss == doctest::Approx(*a.records[i].val_loss).epsilon(1e-9));
  }
}

TEST_CASE("train_run: without validation the stop rule watches train accuracy") {
  const auto cfg = tiny(5, 8);
  const auto ds = tasks::gen_random_memo(5, 0, tasks::Operator::minus, false, 25);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.weight_decay = 0.0;
  tc.max_epochs = 3000;
  tc.eval_every = 5;
  tc.stop_patience = 4;
  const auto t = train_run(cfg, ds, tc);
  CHECK_FALSE(t.has_val);
  REQUIRE(t.stopped_early);
  const auto n = t.records.size();
  REQUIRE(n >= 4);
  for (std::size_t i = n - 4; i < n; ++i) {
    CHECK(t.records[i].train_acc >= 0.999);
    CHECK_FALSE(t.records[i].val_acc.has_value());
  }
  if (n > 4) CHECK(t.records[n - 5].train_acc < 0.999);
}

TEST_CASE("train_run: multitask traces memo accuracy") {
  const auto cfg = tiny(13);
  const auto ds = tasks::gen_multitask(13, 60, 40, 2);
  TrainConfig tc;
  tc.max_epochs = 10;
  const auto t = train_run(cfg, ds, tc);
  CHECK(t.has_memo);
  CHECK(t.records.front().memo_acc.has_value());
}

TEST_CASE("train_run: overflowing activations are reported as divergence") {
  auto cfg = tiny(13);
  cfg.init_scale = 1e150;
  const auto ds = tasks::gen_mod_add(13, 60, 2);
  TrainConfig tc;
  tc.max_epochs = 50;
  const auto t = train_run(cfg, ds, tc);
  CHECK(t.diverged);
}

TEST_CASE("train_run: modulus mismatch") {
  TrainConfig tc;
  CHECK_THROWS_AS(train_run(tiny(17), tasks::gen_mod_add(13, 60, 2), tc), ConfigError);
}

TEST_CASE("metrics.csv format and round trip") {
  RunTrace t;
  t.records.push_back({0, 4.5, 4.75, 0.0, 0.01, 12.5, std::nullopt});
  t.records.push_back({10, 1.0 / 3.0, std::nullopt, 1.0, std::nullopt, 12.25, std::nullopt});
  std::ostringstream out;
  write_metrics_csv(t, out);
  const std::string text = out.str();
  CHECK(text.rfind("epoch,train_loss,val_loss,train_acc,val_acc,param_norm\n", 0) == 0);
  CHECK(text.find("10,0.333333333333,,1,,12.25\n") != std::string::npos);

  std::istringstream in(text);
  const auto back = read_metrics_csv(in);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0] == t.records[0]);
  CHECK_FALSE(back.records[1].val_acc.has_value());
  CHECK(back.eval_every == 10);
  std::ostringstream again;
  write_metrics_csv(back, again);
  CHECK(again.str() == text);

  RunTrace m = t;
  m.has_memo = true;
  m.records[0].memo_acc = 0.5;
  std::ostringstream mo;
  write_metrics_csv(m, mo);
  CHECK(mo.str().rfind("epoch,train_loss,val_loss,train_acc,val_acc,param_norm,memo_acc\n", 0) == 0);

  std::istringstream bad("epoch,loss\n1,2\n");
  CHECK_THROWS_AS(read_metrics_csv(bad), InputError);
  std::istringstream junk("epoch,train_loss,val_loss,train_acc,val_acc,param_norm\n0,x,,1,,2\n");
  CHECK_THROWS_AS(read_metrics_csv(junk), InputError);
}
