#include "groklab/dynamics.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "groklab/errors.hpp"

namespace groklab::dynamics {

using trainer::EvalRecord;
using trainer::RunTrace;

void Thresholds::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("thresholds: " + what); };
  if (!(negligible > 0.0 && negligible < generalized && generalized <= 1.0)) {
    fail("need 0 < negligible < generalized <= 1");
  }
  if (!(train_perfect > 0.0 && train_perfect <= 1.0)) fail("train_perfect must lie in (0, 1]");
  if (!(dip_depth >= 0.0)) fail("dip_depth must be non-negative");
  if (plateau_window == 0) fail("plateau_window must be positive");
}

nlohmann::json to_json(const Thresholds& th) {
  return {{"train_perfect", th.train_perfect}, {"generalized", th.generalized},
          {"negligible", th.negligible},       {"grok_delay", th.grok_delay},
          {"dip_depth", th.dip_depth},         {"plateau_window", th.plateau_window},
          {"plateau_tolerance", th.plateau_tolerance}};
}

Thresholds thresholds_from_json(const nlohmann::json& j) {
  Thresholds th;
  try {
    th.train_perfect = j.value("train_perfect", th.train_perfect);
    th.generalized = j.value("generalized", th.generalized);
    th.negligible = j.value("negligible", th.negligible);
    th.grok_delay = j.value("grok_delay", th.grok_delay);
    th.dip_depth = j.value("dip_depth", th.dip_depth);
    th.plateau_window = j.value("plateau_window", th.plateau_window);
    th.plateau_tolerance = j.value("plateau_tolerance", th.plateau_tolerance);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("thresholds: ") + e.what());
  }
  th.validate();
  return th;
}

std::string_view to_string(Dynamics d) {
  switch (d) {
    case Dynamics::progression: return "progression";
    case Dynamics::ungrokking: return "ungrokking";
    case Dynamics::grokking: return "grokking";
    case Dynamics::semi_grokking: return "semi_grokking";
    case Dynamics::unclassified: return "unclassified";
  }
  return "unclassified";
}

Dynamics parse_dynamics(std::string_view s) {
  for (auto d : {Dynamics::progression, Dynamics::ungrokking, Dynamics::grokking,
                 Dynamics::semi_grokking, Dynamics::unclassified}) {
    if (to_string(d) == s) return d;
  }
  throw InputError("unknown dynamics label '" + std::string(s) + "'");
}

std::string_view to_string(NormTrend t) {
  switch (t) {
    case NormTrend::increasing: return "increasing";
    case NormTrend::decreasing: return "decreasing";
    case NormTrend::flat: return "flat";
  }
  return "flat";
}

nlohmann::json to_json(const DynamicsLabel& l) {
  auto opt = [](const auto& v) -> nlohmann::json {
    if (v) return *v;
    return nullptr;
  };
  nlohmann::json j;
  j["label"] = to_string(l.label);
  j["epoch_train_perfect"] = opt(l.epoch_train_perfect);
  j["epoch_val_generalized"] = opt(l.epoch_val_generalized);
  j["epoch_onset"] = opt(l.epoch_onset);
  j["val_at_train_perfect"] = opt(l.val_at_train_perfect);
  j["train_at_onset"] = opt(l.train_at_onset);
  j["final_train_acc"] = l.final_train_acc;
  j["final_val_acc"] = opt(l.final_val_acc);
  j["norm_trend"] = l.norm_trend ? nlohmann::json(to_string(*l.norm_trend)) : nlohmann::json();
  j["plateaus"] = l.plateaus;
  return j;
}

namespace {

template <typename Pred>
const EvalRecord* first_where(const RunTrace& trace, Pred pred) {
  for (const auto& r : trace.records) {
    if (pred(r)) return &r;
  }
  return nullptr;
}

std::size_t count_plateaus(const RunTrace& trace, const Thresholds& th) {
  std::size_t plateaus = 0, run = 0;
  double level = 0.0;
  for (const auto& r : trace.records) {
    const bool inside = r.val_acc && *r.val_acc > th.negligible && *r.val_acc < th.generalized;
    if (inside && run > 0 && std::abs(*r.val_acc - level) <= th.plateau_tolerance) {
      ++run;
    } else {
      run = inside ? 1 : 0;
      level = inside ? *r.val_acc : 0.0;
    }
    if (run == th.plateau_window) ++plateaus;
  }
  return plateaus;
}

}  // namespace

DynamicsLabel classify(const RunTrace& trace, const Thresholds& th) {
  th.validate();
  if (trace.records.size() < 2) {
    throw InputError("classify: trace needs at least two records, has " +
                     std::to_string(trace.records.size()));
  }
  DynamicsLabel out;
  const auto& last = trace.records.back();
  out.final_train_acc = last.train_acc;
  out.final_val_acc = last.val_acc;

  const auto* train_perfect =
      first_where(trace, [&](const EvalRecord& r) { return r.train_acc >= th.train_perfect; });
  const auto* val_gen = first_where(
      trace, [&](const EvalRecord& r) { return r.val_acc && *r.val_acc >= th.generalized; });
  const auto* onset = first_where(
      trace, [&](const EvalRecord& r) { return r.val_acc && *r.val_acc >= 2.0 * th.negligible; });
  if (train_perfect) {
    out.epoch_train_perfect = train_perfect->epoch;
    out.val_at_train_perfect = train_perfect->val_acc;
  }
  if (val_gen) out.epoch_val_generalized = val_gen->epoch;
  if (onset) {
    out.epoch_onset = onset->epoch;
    out.train_at_onset = onset->train_acc;
  }
  out.plateaus = count_plateaus(trace, th);
  if (const auto window = transition_window(trace, th)) {
    out.norm_trend = norm_trend(trace, *window);
  }

  const std::optional<double> final_val = last.val_acc;
  const bool progression =
      (onset && onset->train_acc < th.train_perfect) ||
      (!train_perfect && final_val && *final_val > th.negligible);
  if (progression) {
    out.label = Dynamics::progression;
  } else if (train_perfect && train_perfect->val_acc &&
             *train_perfect->val_acc <= th.negligible && val_gen &&
             val_gen->epoch >= train_perfect->epoch + th.grok_delay) {
    out.label = Dynamics::grokking;
  } else if (train_perfect && final_val && *final_val <= th.negligible) {
    out.label = Dynamics::ungrokking;
  } else if (train_perfect && final_val && *final_val > th.negligible &&
             *final_val < th.generalized) {
    out.label = Dynamics::semi_grokking;
  } else {
    out.label = Dynamics::unclassified;
  }
  return out;
}

std::optional<EpochWindow> transition_window(const RunTrace& trace, const Thresholds& th) {
  if (trace.records.empty()) return std::nullopt;
  const auto* onset = first_where(
      trace, [&](const EvalRecord& r) { return r.val_acc && *r.val_acc >= 2.0 * th.negligible; });
  if (!onset) return std::nullopt;
  const auto* gen = first_where(trace, [&](const EvalRecord& r) {
    return r.epoch >= onset->epoch && r.val_acc && *r.val_acc >= th.generalized;
  });
  const std::size_t end = gen ? gen->epoch : trace.records.back().epoch;
  if (end <= onset->epoch) return std::nullopt;
  return EpochWindow{onset->epoch, end};
}

NormTrend norm_trend(const RunTrace& trace, EpochWindow window) {
  if (trace.records.empty()) throw InputError("norm_trend: empty trace");
  if (window.end <= window.begin || window.begin < trace.records.front().epoch ||
      window.end > trace.records.back().epoch) {
    throw InputError("norm_trend: window [" + std::to_string(window.begin) + ", " +
                     std::to_string(window.end) + "] lies outside the trace");
  }
  double sx = 0, sy = 0, n = 0;
  for (const auto& r : trace.records) {
    if (r.epoch < window.begin || r.epoch > window.end) continue;
    sx += static_cast<double>(r.epoch);
    sy += r.param_norm;
    n += 1;
  }
  if (n < 2) throw InputError("norm_trend: window holds fewer than two records");
  const double mx = sx / n, my = sy / n;
  double sxy = 0, sxx = 0;
  for (const auto& r : trace.records) {
    if (r.epoch < window.begin || r.epoch > window.end) continue;
    const double dx = static_cast<double>(r.epoch) - mx;
    sxy += dx * (r.param_norm - my);
    sxx += dx * dx;
  }
  const double slope = sxy / sxx;
  if (std::abs(slope) < 1e-6 * std::abs(my)) return NormTrend::flat;
  return slope > 0 ? NormTrend::increasing : NormTrend::decreasing;
}

// ---- sweep-level ------------------------------------------------------------

MeanCI mean_ci95(std::span<const double> values) {
  MeanCI out;
  out.n = values.size();
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  out.low = out.high = out.mean;
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  const double half = t * sd / std::sqrt(n);
  out.low = out.mean - half;
  out.high = out.mean + half;
  return out;
}

Dynamics majority_label(std::span<const Dynamics> labels) {
  std::map<Dynamics, std::size_t> counts;
  for (auto l : labels) ++counts[l];
  Dynamics best = Dynamics::unclassified;
  std::size_t best_count = 0;
  bool tie = false;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {
      best = label;
      best_count = count;
      tie = false;
    } else if (count == best_count) {
      tie = true;
    }
  }
  return tie ? Dynamics::unclassified : best;
}

std::vector<PhaseCell> aggregate_cells(std::span<const RunOutcome> runs) {
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, PhaseCell> grouped;
  for (const auto& r : runs) {
    auto& cell = grouped[{r.d_h, r.n_layers, r.d_train}];
    cell.d_h = r.d_h;
    cell.n_layers = r.n_layers;
    cell.d_train = r.d_train;
    cell.runs.push_back(r);
  }
  std::vector<PhaseCell> cells;
  for (auto& [key, cell] : grouped) {
    std::sort(cell.runs.begin(), cell.runs.end(),
              [](const RunOutcome& a, const RunOutcome& b) { return a.seed < b.seed; });
    std::vector<double> vals;
    std::vector<Dynamics> labels;
    for (const auto& r : cell.runs) {
      if (r.final_val_acc) vals.push_back(*r.final_val_acc);
      labels.push_back(r.label);
    }
    cell.val_acc = mean_ci95(vals);
    cell.majority = majority_label(labels);
    cells.push_back(std::move(cell));
  }
  return cells;
}

std::optional<std::size_t> estimate_d_crit(std::span<const PhaseCell> cells, std::size_t d_h,
                                           const Thresholds& th) {
  std::vector<const PhaseCell*> mine;
  for (const auto& c : cells) {
    if (c.d_h == d_h && !c.missing && c.val_acc.n > 0) mine.push_back(&c);
  }
  if (mine.empty()) throw InputError("estimate_d_crit: d_h = " + std::to_string(d_h) + " not in grid");
  if (mine.size() < 2) {
    throw InputError("estimate_d_crit: d_h = " + std::to_string(d_h) +
                     " needs at least two dataset sizes");
  }
  std::optional<std::size_t> best;
  for (const auto* c : mine) {
    if (c->val_acc.mean >= th.generalized && (!best || c->d_train < *best)) best = c->d_train;
  }
  return best;
}

std::vector<CapacityPoint> estimate_capacity(std::span<const CapacityRun> runs,
                                             std::size_t full_set) {
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> by_size;
  for (const auto& r : runs) {
    if (r.set_size != full_set) {
      throw InputError("estimate_capacity: run at d_h = " + std::to_string(r.d_h) + " used " +
                       std::to_string(r.set_size) + " examples, expected the full set of " +
                       std::to_string(full_set));
    }
    by_size[r.d_h].first.push_back(r.train_acc * static_cast<double>(full_set));
    by_size[r.d_h].second.push_back(r.train_acc);
  }
  std::vector<CapacityPoint> out;
  for (const auto& [d_h, v] : by_size) {
    out.push_back({d_h, mean_ci95(v.first), mean_ci95(v.second)});
  }
  return out;
}

namespace {

void check_curve(std::span<const CurvePoint> curve, const char* who) {
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (!(curve[i].size > curve[i - 1].size)) {
      throw InputError(std::string(who) + ": sizes must be strictly increasing");
    }
  }
}

}  // namespace

DoubleDescent detect_double_descent(std::span<const CurvePoint> curve, double delta) {
  if (curve.size() < 3) throw InputError("detect_double_descent: need at least three sizes");
  check_curve(curve, "detect_double_descent");
  const std::size_t n = curve.size();
  std::vector<double> left(n, -INFINITY), right(n, -INFINITY);
  for (std::size_t i = 1; i < n; ++i) left[i] = std::max(left[i - 1], curve[i - 1].acc);
  for (std::size_t i = n - 1; i-- > 0;) right[i] = std::max(right[i + 1], curve[i + 1].acc);

  std::optional<std::size_t> deepest;
  for (std::size_t j = 1; j + 1 < n; ++j) {
    const bool dip = left[j] >= curve[j].acc + delta && right[j] >= curve[j].acc + delta;
    if (dip && (!deepest || curve[j].acc < curve[*deepest].acc)) deepest = j;
  }
  DoubleDescent out;
  if (!deepest) return out;
  const std::size_t j = *deepest;
  const double ceiling = std::min(left[j], right[j]) - delta;
  std::size_t lo = j, hi = j;
  while (lo > 0 && curve[lo - 1].acc <= ceiling) --lo;
  while (hi + 1 < n && curve[hi + 1].acc <= ceiling) ++hi;
  out.detected = true;
  out.size_low = curve[lo].size;
  out.size_high = curve[hi].size;
  out.dip_min = curve[j].acc;
  out.depth = left[j] - curve[j].acc;
  return out;
}

double dip_depth(std::span<const CurvePoint> curve) {
  double best_before = -INFINITY, depth = 0.0;
  for (const auto& p : curve) {
    depth = std::max(depth, best_before - p.acc);
    best_before = std::max(best_before, p.acc);
  }
  return depth;
}

std::optional<Emergence> estimate_emergence(std::span<const CurvePoint> curve, double threshold,
                                            double baseline_count) {
  if (!(baseline_count > 0.0)) throw InputError("estimate_emergence: baseline must be positive");
  std::optional<double> best;
  for (const auto& p : curve) {
    if (p.acc >= threshold && (!best || p.size < *best)) best = p.size;
  }
  if (!best) return std::nullopt;
  return Emergence{*best, *best / baseline_count};
}

namespace {

// Linear interpolation of the first sign change of capacity − D_crit.
std::optional<double> crossing(const std::vector<std::pair<std::size_t, std::optional<std::size_t>>>& d_crit,
                               const std::vector<CapacityPoint>& capacity) {
  std::vector<std::pair<double, double>> diff;
  for (const auto& [d_h, dc] : d_crit) {
    if (!dc) continue;
    for (const auto& c : capacity) {
      if (c.d_h == d_h) {
        diff.emplace_back(static_cast<double>(d_h), c.capacity.mean - static_cast<double>(*dc));
      }
    }
  }
  for (std::size_t i = 1; i < diff.size(); ++i) {
    const auto [x0, y0] = diff[i - 1];
    const auto [x1, y1] = diff[i];
    if (y0 == 0.0) return x0;
    if ((y0 < 0.0) != (y1 < 0.0)) return x0 + (x1 - x0) * (-y0) / (y1 - y0);
  }
  return std::nullopt;
}

}  // namespace

PhaseDiagram build_phase_diagram(std::span<const RunOutcome> runs, const Thresholds& th,
                                 std::span<const CapacityRun> capacity_runs,
                                 std::span<const std::pair<std::size_t, std::size_t>> expected) {
  PhaseDiagram pd;
  pd.cells = aggregate_cells(runs);
  for (const auto& [d_h, d_train] : expected) {
    const bool present = std::any_of(pd.cells.begin(), pd.cells.end(), [&](const PhaseCell& c) {
      return c.d_h == d_h && c.d_train == d_train;
    });
    if (!present) {
      PhaseCell missing;
      missing.d_h = d_h;
      missing.d_train = d_train;
      missing.missing = true;
      pd.cells.push_back(missing);
    }
  }
  std::sort(pd.cells.begin(), pd.cells.end(), [](const PhaseCell& a, const PhaseCell& b) {
    return std::tie(a.d_h, a.n_layers, a.d_train) < std::tie(b.d_h, b.n_layers, b.d_train);
  });

  std::vector<std::size_t> sizes;
  for (const auto& c : pd.cells) {
    if (sizes.empty() || sizes.back() != c.d_h) sizes.push_back(c.d_h);
  }
  for (std::size_t d_h : sizes) {
    std::size_t usable = 0;
    for (const auto& c : pd.cells) usable += (c.d_h == d_h && !c.missing && c.val_acc.n > 0);
    if (usable >= 2) pd.d_crit.emplace_back(d_h, estimate_d_crit(pd.cells, d_h, th));
  }
  if (!capacity_runs.empty()) {
    pd.capacity = estimate_capacity(capacity_runs, capacity_runs.front().set_size);
    pd.crossing_d_h = crossing(pd.d_crit, pd.capacity);
  }
  return pd;
}

}  // namespace groklab::dynamics
