#include <doctest.h>

#include <cmath>

#include "groklab/dynamics.hpp"
#include "groklab/errors.hpp"

using namespace groklab;
using namespace groklab::dynamics;
using trainer::EvalRecord;
using trainer::RunTrace;

namespace {

// Piecewise trace: train/val accuracies switch at given epochs.
struct Phase {
  std::size_t from;
  double train;
  double val;
};

RunTrace piecewise(std::vector<Phase> phases, std::size_t end, std::size_t step = 10) {
  RunTrace t;
  t.eval_every = step;
  for (std::size_t e = 0; e <= end; e += step) {
    Phase cur = phases.front();
    for (const auto& p : phases) {
      if (e >= p.from) cur = p;
    }
    EvalRecord r;
    r.epoch = e;
    r.train_acc = cur.train;
    r.val_acc = cur.val;
    r.train_loss = 1.0 - cur.train;
    r.val_loss = 1.0 - cur.val;
    r.param_norm = 10.0;
    t.records.push_back(r);
  }
  return t;
}

RunTrace smooth_grok(std::size_t step) {
  RunTrace t;
  t.eval_every = step;
  for (std::size_t e = 0; e <= 20000; e += step) {
    const double x = static_cast<double>(e);
    EvalRecord r;
    r.epoch = e;
    r.train_acc = 1.0 / (1.0 + std::exp(-(x - 300.0) / 30.0));
    r.val_acc = 0.01 + 0.99 / (1.0 + std::exp(-(x - 8000.0) / 400.0));
    r.param_norm = 50.0 - x / 1000.0;
    t.records.push_back(r);
  }
  return t;
}

Dynamics label_of(const RunTrace& t) { return classify(t).label; }

}  // namespace

TEST_CASE("classify: grokking delay boundary") {
  // Train saturates at 100 with val 0.01; val generalizes at 1100 or 1090.
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.01}, {1100, 1.0, 0.96}}, 3000)) ==
        Dynamics::grokking);
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.01}, {1090, 1.0, 0.96}}, 3000)) !=
        Dynamics::grokking);
}

TEST_CASE("classify: val at memorization boundary") {
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.05}, {2000, 1.0, 0.99}}, 3000)) ==
        Dynamics::grokking);
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.0501}, {2000, 1.0, 0.99}}, 3000)) !=
        Dynamics::grokking);
}

TEST_CASE("classify: progression when generalization starts before memorization") {
  const auto early = piecewise({{0, 0.1, 0.01}, {200, 0.994, 0.1}, {300, 1.0, 0.99}}, 3000);
  const auto l = classify(early);
  CHECK(l.label == Dynamics::progression);
  CHECK(*l.epoch_onset == 200);
  CHECK(*l.train_at_onset == doctest::Approx(0.994));
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {200, 0.995, 0.1}, {300, 1.0, 0.99}}, 3000)) !=
        Dynamics::progression);
  // Never memorizes but validation is above the negligible level.
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {200, 0.5, 0.0501}}, 3000)) == Dynamics::progression);
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {200, 0.5, 0.05}}, 3000)) == Dynamics::unclassified);
}

TEST_CASE("classify: ungrokking and semi-grokking boundaries") {
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.05}}, 3000)) == Dynamics::ungrokking);
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.01}, {2000, 1.0, 0.0501}}, 3000)) ==
        Dynamics::semi_grokking);
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.01}, {2000, 1.0, 0.9499}}, 3000)) ==
        Dynamics::semi_grokking);
  // Generalized too soon after memorization for grokking, and not semi.
  CHECK(label_of(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.01}, {500, 1.0, 0.95}}, 3000)) ==
        Dynamics::unclassified);
}

TEST_CASE("classify: evidence fields") {
  const auto l = classify(piecewise({{0, 0.1, 0.01}, {100, 1.0, 0.01}, {1500, 1.0, 0.99}}, 3000));
  CHECK(*l.epoch_train_perfect == 100);
  CHECK(*l.epoch_val_generalized == 1500);
  CHECK(*l.val_at_train_perfect == doctest::Approx(0.01));
  CHECK(l.final_train_acc == 1.0);
  CHECK(*l.final_val_acc == doctest::Approx(0.99));
  const auto j = to_json(l);
  CHECK(j.at("label") == "grokking");
}

TEST_CASE("classify: too few records") {
  RunTrace t;
  t.records.push_back({});
  CHECK_THROWS_AS(classify(t), InputError);
}

TEST_CASE("classify: labels survive halving the evaluation rate") {
  const auto full = smooth_grok(10);
  const auto half = smooth_grok(20);
  CHECK(label_of(full) == Dynamics::grokking);
  CHECK(label_of(half) == label_of(full));
}

TEST_CASE("transition window and norm trend") {
  const auto t = smooth_grok(10);
  const auto w = transition_window(t);
  REQUIRE(w.has_value());
  CHECK(w->begin < w->end);
  CHECK(norm_trend(t, *w) == NormTrend::decreasing);
  CHECK(*classify(t).norm_trend == NormTrend::decreasing);

  auto up = t;
  for (auto& r : up.records) r.param_norm = 10.0 + static_cast<double>(r.epoch) * 0.01;
  CHECK(norm_trend(up, *w) == NormTrend::increasing);
  auto flat = t;
  for (auto& r : flat.records) r.param_norm = 10.0;
  CHECK(norm_trend(flat, *w) == NormTrend::flat);
  CHECK_THROWS_AS(norm_trend(t, {500, 400}), InputError);
  CHECK_THROWS_AS(norm_trend(t, {0, 99999}), InputError);

  const auto none = piecewise({{0, 1.0, 0.01}}, 1000);
  CHECK_FALSE(transition_window(none).has_value());
}

TEST_CASE("plateau counting") {
  Thresholds th;
  th.plateau_window = 5;
  const auto one = piecewise({{0, 1.0, 0.3}}, 100);
  const auto two = piecewise({{0, 1.0, 0.3}, {100, 1.0, 0.7}}, 200);
  CHECK(classify(one, th).plateaus <= classify(two, th).plateaus);
  CHECK(classify(two, th).plateaus >= 2);
}

TEST_CASE("thresholds validation and json") {
  Thresholds th;
  th.negligible = 0.96;
  CHECK_THROWS_AS(th.validate(), ConfigError);
  Thresholds ok;
  ok.grok_delay = 77;
  CHECK(to_json(thresholds_from_json(to_json(ok))) == to_json(ok));
  CHECK(parse_dynamics("semi_grokking") == Dynamics::semi_grokking);
  CHECK_THROWS_AS(parse_dynamics("grokked"), InputError);
}

TEST_CASE("Student-t interval") {
  const std::vector<double> v = {1.0, 2.0, 3.0};
  const auto ci = mean_ci95(v);
  CHECK(ci.mean == doctest::Approx(2.0));
  // t_{0.975, 2} = 4.302653; sd = 1.
  CHECK(ci.half_width() == doctest::Approx(4.302653 / std::sqrt(3.0)).epsilon(1e-6));
  CHECK(ci.n == 3);
  const std::vector<double> one = {0.7};
  const auto c1 = mean_ci95(one);
  CHECK(c1.low == c1.high);
  CHECK(c1.mean == doctest::Approx(0.7));
  const std::vector<double> five = {0.1, 0.4, 0.35, 0.2, 0.3};
  // t_{0.975, 4} = 2.776445.
  double m = 0.27, ss = 0.0;
  for (double x : five) ss += (x - m) * (x - m);
  CHECK(mean_ci95(five).half_width() ==
        doctest::Approx(2.776445 * std::sqrt(ss / 4.0) / std::sqrt(5.0)).epsilon(1e-6));
}

TEST_CASE("majority label") {
  const std::vector<Dynamics> a = {Dynamics::grokking, Dynamics::grokking, Dynamics::progression};
  CHECK(majority_label(a) == Dynamics::grokking);
  const std::vector<Dynamics> tie = {Dynamics::grokking, Dynamics::progression};
  CHECK(majority_label(tie) == Dynamics::unclassified);
}

namespace {

RunOutcome outcome(std::size_t d_h, std::size_t d_train, std::uint64_t seed, double val) {
  RunOutcome r;
  r.d_h = d_h;
  r.d_train = d_train;
  r.seed = seed;
  r.final_train_acc = 1.0;
  r.final_val_acc = val;
  r.label = val >= 0.95 ? Dynamics::grokking : Dynamics::ungrokking;
  return r;
}

}  // namespace

TEST_CASE("aggregate and critical dataset size") {
  const std::vector<RunOutcome> runs = {
      outcome(64, 3000, 1, 0.99), outcome(64, 1000, 0, 0.2),  outcome(64, 2000, 0, 0.96),
      outcome(64, 2000, 1, 0.97), outcome(64, 3000, 0, 0.99), outcome(32, 1000, 0, 0.1),
      outcome(32, 2000, 0, 0.3),
  };
  const auto cells = aggregate_cells(runs);
  REQUIRE(cells.size() == 5);
  CHECK(cells[0].d_h == 32);
  CHECK(cells[3].d_train == 2000);
  CHECK(cells[3].runs[0].seed == 0);
  CHECK(cells[3].val_acc.mean == doctest::Approx(0.965));
  CHECK(estimate_d_crit(cells, 64) == 2000);
  CHECK_FALSE(estimate_d_crit(cells, 32).has_value());
  CHECK_THROWS_AS(estimate_d_crit(cells, 128), InputError);
  const std::vector<RunOutcome> single = {outcome(8, 1000, 0, 0.99)};
  CHECK_THROWS_AS(estimate_d_crit(aggregate_cells(single), 8), InputError);
}

TEST_CASE("capacity") {
  const std::vector<CapacityRun> runs = {{8, 0.1, 12769}, {8, 0.2, 12769}, {16, 0.5, 12769}};
  const auto cap = estimate_capacity(runs);
  REQUIRE(cap.size() == 2);
  CHECK(cap[0].capacity.mean == doctest::Approx(0.15 * 12769));
  CHECK(cap[1].accuracy.mean == doctest::Approx(0.5));
  const std::vector<CapacityRun> partial = {{8, 0.1, 5000}};
  CHECK_THROWS_AS(estimate_capacity(partial), InputError);
}

TEST_CASE("phase diagram: missing cells and capacity crossing") {
  const std::vector<RunOutcome> runs = {
      outcome(8, 1000, 0, 0.1),  outcome(8, 3000, 0, 0.96),
      outcome(64, 1000, 0, 0.2), outcome(64, 2000, 0, 0.97),
  };
  const std::vector<CapacityRun> cap = {{8, 0.05, 12769}, {64, 0.4, 12769}};
  const std::vector<std::pair<std::size_t, std::size_t>> expected = {
      {8, 1000}, {8, 2000}, {8, 3000}, {64, 1000}, {64, 2000}};
  const auto pd = build_phase_diagram(runs, {}, cap, expected);
  CHECK(pd.cells.size() == 5);
  std::size_t missing = 0;
  for (const auto& c : pd.cells) missing += c.missing;
  CHECK(missing == 1);
  REQUIRE(pd.d_crit.size() == 2);
  CHECK(pd.d_crit[0].second == 3000);
  CHECK(pd.d_crit[1].second == 2000);
  REQUIRE(pd.crossing_d_h.has_value());
  const double y0 = 0.05 * 12769 - 3000.0;
  const double y1 = 0.4 * 12769 - 2000.0;
  CHECK(*pd.crossing_d_h == doctest::Approx(8.0 + 56.0 * (-y0) / (y1 - y0)));
}

TEST_CASE("double descent") {
  const std::vector<CurvePoint> dip = {{1, 0.2}, {2, 0.6}, {3, 0.3}, {4, 0.9}};
  const auto d = detect_double_descent(dip, 0.1);
  CHECK(d.detected);
  CHECK(d.size_low == 3);
  CHECK(d.size_high == 3);
  CHECK(d.dip_min == doctest::Approx(0.3));
  CHECK(d.depth == doctest::Approx(0.3));
  CHECK(dip_depth(dip) == doctest::Approx(0.3));

  const std::vector<CurvePoint> wide = {{1, 0.8}, {2, 0.3}, {3, 0.2}, {4, 0.4}, {5, 0.9}};
  const auto w = detect_double_descent(wide, 0.1);
  CHECK(w.detected);
  CHECK(w.size_low == 2);
  CHECK(w.size_high == 4);

  const std::vector<CurvePoint> monotone = {{1, 0.1}, {2, 0.3}, {3, 0.3}, {4, 0.9}};
  CHECK_FALSE(detect_double_descent(monotone, 0.1).detected);
  CHECK(dip_depth(monotone) == 0.0);

  const std::vector<CurvePoint> shallow = {{1, 0.5}, {2, 0.55}, {3, 0.5}, {4, 0.9}};
  CHECK_FALSE(detect_double_descent(shallow, 0.1).detected);
  CHECK(detect_double_descent(shallow, 0.05).detected);

  const std::vector<CurvePoint> two = {{1, 0.5}, {2, 0.1}};
  CHECK_THROWS_AS(detect_double_descent(two, 0.1), InputError);
  const std::vector<CurvePoint> unsorted = {{1, 0.5}, {3, 0.1}, {2, 0.9}};
  CHECK_THROWS_AS(detect_double_descent(unsorted, 0.1), InputError);
}

TEST_CASE("double descent: adding points never removes a detected dip") {
  std::vector<CurvePoint> base = {{1, 0.2}, {2, 0.6}, {3, 0.3}, {4, 0.9}};
  REQUIRE(detect_double_descent(base, 0.1).detected);
  for (double acc : {0.0, 0.25, 0.5, 1.0}) {
    auto more = base;
    more.insert(more.begin() + 2, {2.5, acc});
    CHECK(detect_double_descent(more, 0.1).detected);
    auto tail = base;
    tail.push_back({5, acc});
    CHECK(detect_double_descent(tail, 0.1).detected);
  }
}

TEST_CASE("emergence") {
  const std::vector<CurvePoint> curve = {{1e4, 0.1}, {1e6, 0.96}, {1e8, 0.99}};
  const auto e = estimate_emergence(curve, 0.95, 63936);
  REQUIRE(e.has_value());
  CHECK(e->param_count == 1e6);
  CHECK(e->ratio == doctest::Approx(1e6 / 63936.0));
  CHECK_FALSE(estimate_emergence(curve, 0.999, 63936).has_value());
  CHECK_THROWS_AS(estimate_emergence(curve, 0.95, 0.0), InputError);
}
