#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "groklab/errors.hpp"
#include "groklab/tasks.hpp"

using namespace groklab;
using namespace groklab::tasks;

namespace {

std::set<std::pair<std::uint32_t, std::uint32_t>> pairs_of(const std::vector<Example>& xs) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> s;
  for (const auto& e : xs) s.emplace(e.a, e.b);
  return s;
}

}  // namespace

TEST_CASE("labels") {
  CHECK(mod_add_label(0, 0, 113) == 0);
  CHECK(mod_add_label(112, 1, 113) == 0);
  CHECK(mod_add_label(112, 112, 113) == 111);
  CHECK(mod_add_label(50, 60, 113) == 110);
  CHECK(mod_poly2_label(10, 5, 113) == 112);
  CHECK(mod_poly2_label(0, 0, 113) == 0);
  CHECK(mod_poly2_label(112, 1, 113) == 0);
}

TEST_CASE("mod_add split sizes, disjointness and coverage") {
  const auto ds = gen_mod_add(113, 3000, 0);
  CHECK(ds.train.size() == 3000);
  CHECK(ds.val.size() == 9769);
  const auto tr = pairs_of(ds.train);
  const auto va = pairs_of(ds.val);
  CHECK(tr.size() == 3000);
  CHECK(va.size() == 9769);
  for (const auto& p : tr) CHECK(va.count(p) == 0);
  for (const auto& e : ds.train) {
    CHECK(e.op == Operator::plus);
    CHECK(e.label == (e.a + e.b) % 113);
  }
}

TEST_CASE("splits are deterministic per seed") {
  CHECK(gen_mod_add(113, 500, 3).train == gen_mod_add(113, 500, 3).train);
  CHECK(gen_mod_add(113, 500, 3).train != gen_mod_add(113, 500, 4).train);
  CHECK(gen_random_memo(31, 2, Operator::minus, false, 200).train ==
        gen_random_memo(31, 2, Operator::minus, false, 200).train);
}

TEST_CASE("capacity and argument errors") {
  CHECK_THROWS_AS(gen_mod_add(113, 12770, 0), CapacityError);
  CHECK_THROWS_AS(gen_mod_add(113, 0, 0), InputError);
  CHECK_THROWS_AS(gen_mod_add(1, 1, 0), InputError);
  CHECK_THROWS_AS(gen_random_memo(113, 0, Operator::minus, false, 12770), CapacityError);
  CHECK_NOTHROW(gen_mod_add(113, 12769, 0));
  CHECK_THROWS_AS(parse_task_kind("mod_mul"), InputError);
  CHECK(parse_task_kind("multitask") == TaskKind::multitask);
}

TEST_CASE("random memo: full table, uniform labels") {
  const auto ds = gen_random_memo(113, 0, Operator::minus, false, 12769);
  CHECK(ds.train.size() == 12769);
  CHECK(ds.val.empty());
  std::vector<std::size_t> counts(113, 0);
  for (const auto& e : ds.train) ++counts.at(e.label);
  const double expected = 12769.0 / 113.0;
  const double sd = std::sqrt(12769.0 * (1.0 / 113.0) * (112.0 / 113.0));
  for (auto c : counts) CHECK(std::abs(static_cast<double>(c) - expected) < 5.0 * sd);
}

TEST_CASE("random memo: commutative labels are symmetric") {
  const auto ds = gen_random_memo(29, 5, Operator::minus, true, 29 * 29);
  std::vector<std::uint32_t> table(29 * 29);
  for (const auto& e : ds.train) table[e.a * 29 + e.b] = e.label;
  for (std::uint32_t a = 0; a < 29; ++a) {
    for (std::uint32_t b = 0; b < 29; ++b) CHECK(table[a * 29 + b] == table[b * 29 + a]);
  }
  const auto nc = gen_random_memo(29, 5, Operator::minus, false, 29 * 29);
  std::size_t asym = 0;
  for (const auto& e : nc.train) table[e.a * 29 + e.b] = e.label;
  for (std::uint32_t a = 0; a < 29; ++a) {
    for (std::uint32_t b = a + 1; b < 29; ++b) asym += table[a * 29 + b] != table[b * 29 + a];
  }
  CHECK(asym > 0);
}

TEST_CASE("multitask composition") {
  const auto ds = gen_multitask(113, 3000, 3000, 0);
  CHECK(ds.train.size() == 6000);
  CHECK(ds.val.size() == 9769);
  std::size_t plus = 0, minus = 0, wrong = 0;
  for (const auto& e : ds.train) {
    if (e.op == Operator::plus) {
      ++plus;
      CHECK(e.tag == Tag::algorithm);
      CHECK(e.label == mod_add_label(e.a, e.b, 113));
    } else {
      ++minus;
      CHECK(e.tag == Tag::memo);
      wrong += e.label != mod_add_label(e.a, e.b, 113);
    }
  }
  CHECK(plus == 3000);
  CHECK(minus == 3000);
  for (const auto& e : ds.val) CHECK(e.op == Operator::plus);
  // Random labels disagree with the sum about 112/113 of the time.
  const double frac = static_cast<double>(wrong) / 3000.0;
  const double sd = std::sqrt((1.0 / 113.0) * (112.0 / 113.0) / 3000.0);
  CHECK(std::abs(frac - 112.0 / 113.0) < 5.0 * sd);

  std::vector<Example> plus_train;
  for (const auto& e : ds.train) {
    if (e.op == Operator::plus) plus_train.push_back(e);
  }
  const auto tr = pairs_of(plus_train);
  for (const auto& e : ds.val) CHECK(tr.count({e.a, e.b}) == 0);
}

TEST_CASE("operator tokens") {
  CHECK(operator_token(Operator::plus, 113) == 113);
  CHECK(operator_token(Operator::minus, 113) == 114);
}

TEST_CASE("jsonl round trip") {
  const auto ds = gen_multitask(17, 40, 30, 9);
  std::stringstream ss;
  write_jsonl(ds, ss);
  const auto back = read_jsonl(ss, TaskKind::multitask, 17, 9);
  CHECK(back.train == ds.train);
  CHECK(back.val == ds.val);

  std::stringstream bad("{\"a\":1,\"op\":\"*\",\"b\":2,\"label\":3,\"split\":\"train\",\"tag\":\"\"}\n");
  CHECK_THROWS_AS(read_jsonl(bad, TaskKind::mod_add, 17), InputError);
  std::stringstream range("{\"a\":40,\"op\":\"+\",\"b\":2,\"label\":3,\"split\":\"train\",\"tag\":\"\"}\n");
  CHECK_THROWS_AS(read_jsonl(range, TaskKind::mod_add, 17), InputError);
}
