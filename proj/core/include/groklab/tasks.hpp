#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace groklab::tasks {

enum class Operator : std::uint8_t { plus = 0, minus = 1 };

/// Operator tokens follow the residues: '+' = P, '-' = P + 1.
constexpr std::size_t kOperatorCount = 2;
constexpr std::size_t operator_token(Operator op, std::size_t modulus) {
  return modulus + static_cast<std::size_t>(op);
}

enum class TaskKind { mod_add, mod_poly2, random_memo, multitask };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);
std::string_view to_string(Operator op);

/// Which part of a multitask mixture an example belongs to.
enum class Tag : std::uint8_t { none, algorithm, memo };

struct Example {
  std::uint32_t a = 0;
  Operator op = Operator::plus;
  std::uint32_t b = 0;
  std::uint32_t label = 0;
  Tag tag = Tag::none;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Provenance {
  std::string generator;
  std::size_t n_train = 0;
  std::size_t n_memo = 0;
  bool commutative = false;
};

struct Dataset {
  TaskKind kind = TaskKind::mod_add;
  std::uint32_t modulus = 0;
  std::vector<Example> train;
  std::vector<Example> val;
  std::uint64_t seed = 0;
  Provenance provenance;
};

std::uint32_t mod_add_label(std::uint32_t a, std::uint32_t b, std::uint32_t modulus);
std::uint32_t mod_poly2_label(std::uint32_t a, std::uint32_t b, std::uint32_t modulus);

/// n_train distinct (a, +, b) pairs for training; every other pair validates.
Dataset gen_mod_add(std::uint32_t modulus, std::size_t n_train, std::uint64_t seed);
/// As gen_mod_add with label (a + b)^2 mod P.
Dataset gen_mod_poly2(std::uint32_t modulus, std::size_t n_train, std::uint64_t seed);

/// n pairs with labels drawn uniformly from [0, P). With `commutative` the
/// label is shared by (a, b) and (b, a). Validation is empty: memorization is
/// measured on the training set itself.
Dataset gen_random_memo(std::uint32_t modulus, std::uint64_t seed, Operator op,
                        bool commutative, std::size_t n);

/// Addition train split ('+', true labels, Tag::algorithm) followed by a
/// non-commutative random-label set ('-', Tag::memo). Validation holds the
/// remaining '+' pairs only.
Dataset gen_multitask(std::uint32_t modulus, std::size_t n_add_train, std::size_t n_memo,
                      std::uint64_t seed);

/// JSON lines, one example per line: {"a","op","b","label","split","tag"}.
void write_jsonl(const Dataset& ds, std::ostream& out);
void save_jsonl(const Dataset& ds, const std::filesystem::path& path);
/// Rebuilds train/val from JSON lines. Kind, modulus and seed are not stored
/// per line and must be supplied.
Dataset read_jsonl(std::istream& in, TaskKind kind, std::uint32_t modulus,
                   std::uint64_t seed = 0);

}  // namespace groklab::tasks
