#include "groklab/tasks.hpp"

#include <fstream>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>

#include "groklab/errors.hpp"
#include "groklab/rng.hpp"

namespace groklab::tasks {

namespace {

using Pair = std::pair<std::uint32_t, std::uint32_t>;

void check_modulus(std::uint32_t modulus) {
  if (modulus < 2) throw InputError("modulus must be at least 2, got " + std::to_string(modulus));
}

void check_capacity(std::size_t n, std::uint32_t modulus, const char* what) {
  const std::size_t total = std::size_t{modulus} * modulus;
  if (n > total) {
    throw CapacityError(std::string(what) + " = " + std::to_string(n) + " exceeds the " +
                        std::to_string(total) + " available pairs for P = " +
                        std::to_string(modulus));
  }
}

// All P² pairs in a seeded Fisher-Yates order. The salt keeps differently
// sized splits of the same seed independent.
std::vector<Pair> shuffled_pairs(std::uint32_t modulus, std::uint64_t seed, std::uint64_t salt) {
  std::vector<Pair> pairs;
  pairs.reserve(std::size_t{modulus} * modulus);
  for (std::uint32_t a = 0; a < modulus; ++a) {
    for (std::uint32_t b = 0; b < modulus; ++b) pairs.emplace_back(a, b);
  }
  Rng rng(derive_seed(seed, Stream::split, salt));
  for (std::size_t i = pairs.size(); i > 1; --i) {
    std::swap(pairs[i - 1], pairs[rng.below(i)]);
  }
  return pairs;
}

template <typename LabelFn>
Dataset algorithmic(TaskKind kind, std::uint32_t modulus, std::size_t n_train,
                    std::uint64_t seed, LabelFn label) {
  check_modulus(modulus);
  if (n_train == 0) throw InputError("n_train must be positive");
  check_capacity(n_train, modulus, "n_train");
  Dataset ds;
  ds.kind = kind;
  ds.modulus = modulus;
  ds.seed = seed;
  ds.provenance = {std::string(to_string(kind)), n_train, 0, false};
  const auto pairs = shuffled_pairs(modulus, seed, n_train);
  ds.train.reserve(n_train);
  ds.val.reserve(pairs.size() - n_train);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [a, b] = pairs[i];
    Example e{a, Operator::plus, b, label(a, b, modulus), Tag::none};
    (i < n_train ? ds.train : ds.val).push_back(e);
  }
  return ds;
}

// Labels for every ordered pair, i.i.d. uniform; when commutative the table
// is symmetric, drawn once per unordered pair.
std::vector<std::uint32_t> random_label_table(std::uint32_t modulus, std::uint64_t seed,
                                              bool commutative) {
  Rng rng(derive_seed(seed, Stream::labels, commutative ? 1 : 0));
  std::vector<std::uint32_t> table(std::size_t{modulus} * modulus);
  for (std::uint32_t a = 0; a < modulus; ++a) {
    for (std::uint32_t b = commutative ? a : 0; b < modulus; ++b) {
      const auto label = static_cast<std::uint32_t>(rng.below(modulus));
      table[std::size_t{a} * modulus + b] = label;
      if (commutative) table[std::size_t{b} * modulus + a] = label;
    }
  }
  return table;
}

std::string_view to_string(Tag tag) {
  switch (tag) {
    case Tag::algorithm: return "algorithm";
    case Tag::memo: return "memo";
    case Tag::none: break;
  }
  return "";
}

Tag parse_tag(std::string_view s) {
  if (s == "algorithm") return Tag::algorithm;
  if (s == "memo") return Tag::memo;
  if (s.empty()) return Tag::none;
  throw InputError("unknown example tag '" + std::string(s) + "'");
}

Operator parse_operator(std::string_view s) {
  if (s == "+") return Operator::plus;
  if (s == "-") return Operator::minus;
  throw InputError("unknown operator '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::mod_add: return "mod_add";
    case TaskKind::mod_poly2: return "mod_poly2";
    case TaskKind::random_memo: return "random_memo";
    case TaskKind::multitask: return "multitask";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  for (auto k : {TaskKind::mod_add, TaskKind::mod_poly2, TaskKind::random_memo,
                 TaskKind::multitask}) {
    if (to_string(k) == name) return k;
  }
  throw InputError("unknown task kind '" + std::string(name) + "'");
}

std::string_view to_string(Operator op) { return op == Operator::plus ? "+" : "-"; }

std::uint32_t mod_add_label(std::uint32_t a, std::uint32_t b, std::uint32_t modulus) {
  return static_cast<std::uint32_t>((std::uint64_t{a} + b) % modulus);
}

std::uint32_t mod_poly2_label(std::uint32_t a, std::uint32_t b, std::uint32_t modulus) {
  const std::uint64_t s = (std::uint64_t{a} + b) % modulus;
  return static_cast<std::uint32_t>(s * s % modulus);
}

Dataset gen_mod_add(std::uint32_t modulus, std::size_t n_train, std::uint64_t seed) {
  return algorithmic(TaskKind::mod_add, modulus, n_train, seed, mod_add_label);
}

Dataset gen_mod_poly2(std::uint32_t modulus, std::size_t n_train, std::uint64_t seed) {
  return algorithmic(TaskKind::mod_poly2, modulus, n_train, seed, mod_poly2_label);
}

Dataset gen_random_memo(std::uint32_t modulus, std::uint64_t seed, Operator op, bool commutative,
                        std::size_t n) {
  check_modulus(modulus);
  check_capacity(n, modulus, "n");
  Dataset ds;
  ds.kind = TaskKind::random_memo;
  ds.modulus = modulus;
  ds.seed = seed;
  ds.provenance = {"random_memo", n, n, commutative};
  const auto table = random_label_table(modulus, seed, commutative);
  const auto pairs = shuffled_pairs(modulus, seed, n);
  ds.train.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [a, b] = pairs[i];
    ds.train.push_back({a, op, b, table[std::size_t{a} * modulus + b], Tag::memo});
  }
  return ds;
}

Dataset gen_multitask(std::uint32_t modulus, std::size_t n_add_train, std::size_t n_memo,
                      std::uint64_t seed) {
  Dataset ds = gen_mod_add(modulus, n_add_train, seed);
  for (auto& e : ds.train) e.tag = Tag::algorithm;
  for (auto& e : ds.val) e.tag = Tag::algorithm;
  // A separate seed facet keeps the memo pairs independent of the '+' split.
  const Dataset memo =
      gen_random_memo(modulus, splitmix64(seed ^ 0x6d656d6fULL), Operator::minus, false, n_memo);
  ds.train.insert(ds.train.end(), memo.train.begin(), memo.train.end());
  ds.kind = TaskKind::multitask;
  ds.provenance = {"multitask", n_add_train, n_memo, false};
  return ds;
}

void write_jsonl(const Dataset& ds, std::ostream& out) {
  auto emit = [&](const std::vector<Example>& xs, const char* split) {
    for (const auto& e : xs) {
      nlohmann::ordered_json j;
      j["a"] = e.a;
      j["op"] = to_string(e.op);
      j["b"] = e.b;
      j["label"] = e.label;
      j["split"] = split;
      j["tag"] = to_string(e.tag);
      out << j.dump() << '\n';
    }
  };
  emit(ds.train, "train");
  emit(ds.val, "val");
}

void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_jsonl(ds, out);
}

Dataset read_jsonl(std::istream& in, TaskKind kind, std::uint32_t modulus, std::uint64_t seed) {
  Dataset ds;
  ds.kind = kind;
  ds.modulus = modulus;
  ds.seed = seed;
  ds.provenance.generator = "jsonl";
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example e{j.at("a").get<std::uint32_t>(), parse_operator(j.at("op").get<std::string>()),
                j.at("b").get<std::uint32_t>(), j.at("label").get<std::uint32_t>(),
                parse_tag(j.value("tag", ""))};
      if (e.a >= modulus || e.b >= modulus || e.label >= modulus) {
        throw InputError("value out of range for P = " + std::to_string(modulus));
      }
      const auto split = j.at("split").get<std::string>();
      if (split == "train") {
        ds.train.push_back(e);
      } else if (split == "val") {
        ds.val.push_back(e);
      } else {
        throw InputError("unknown split '" + split + "'");
      }
    } catch (const nlohmann::json::exception& ex) {
      throw InputError("dataset line " + std::to_string(lineno) + ": " + ex.what());
    } catch (const InputError& ex) {
      throw InputError("dataset line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  ds.provenance.n_train = ds.train.size();
  return ds;
}

}  // namespace groklab::tasks
