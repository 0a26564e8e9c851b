#pragma once

// Synthetic verifiable-reward sequence tasks.
//
// Three families: combination locks (one accepting sequence), multi-path
// trees (several accepting sequences of equal length) and modular-arithmetic
// chains (answer residue followed by a terminal token). Every instance is
// small enough that its acceptance probability under the uniform policy is
// computed by exhaustive enumeration at construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uecrl/error.hpp"
#include "uecrl/format.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/random.hpp"

namespace uecrl {

enum class Difficulty { easy, hard };
enum class TaskFamily { combination_lock, multipath_tree, modular_chain };

inline const char* to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "hard"; }

inline const char* to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::combination_lock: return "combination_lock";
    case TaskFamily::multipath_tree: return "multipath_tree";
    case TaskFamily::modular_chain: return "modular_chain";
  }
  return "?";
}

inline TaskFamily parse_family(const std::string& s) {
  if (s == "combination_lock" || s == "lock") return TaskFamily::combination_lock;
  if (s == "multipath_tree" || s == "multipath") return TaskFamily::multipath_tree;
  if (s == "modular_chain" || s == "modular") return TaskFamily::modular_chain;
  throw InvalidArgument("unknown task family '" + s + "'");
}

/// Uniform-policy acceptance at or below this is labelled hard.
inline constexpr double kHardAcceptance = 1e-3;
/// Curriculum easy instances must reach at least this uniform acceptance.
inline constexpr double kEasyAcceptance = 0.05;
/// Largest number of sequences an enumeration oracle may visit.
inline constexpr std::uint64_t kEnumerationBudget = 1'000'000;

struct TaskInstance {
  PromptId prompt_id = 0;
  TaskFamily family = TaskFamily::combination_lock;
  Difficulty difficulty = Difficulty::easy;
  int vocab = 2;
  int max_len = 1;
  std::optional<Token> terminal;
  std::vector<TokenSeq> accepting;  // sorted, distinct
  std::uint64_t seed = 0;
  // Family parameters: lock {code_len}, tree {depth, n_accepting},
  // modular {modulus, n_ops}.
  std::vector<int> shape;
  double uniform_acceptance = 0.0;

  std::string digest() const {
    std::string bytes;
    for (const auto& seq : accepting) {
      for (Token t : seq) bytes += std::to_string(t) + ",";
      bytes += ";";
    }
    return hex64(fnv1a(bytes));
  }
};

/// 1 iff the output, with one trailing terminal token removed, is accepted.
inline int verify(const TaskInstance& task, std::span<const Token> output) {
  if (output.empty()) return 0;
  std::span<const Token> body = output;
  if (task.terminal && body.back() == *task.terminal) body = body.first(body.size() - 1);
  const TokenSeq key(body.begin(), body.end());
  return std::binary_search(task.accepting.begin(), task.accepting.end(), key) ? 1 : 0;
}

inline double uniform_acceptance_probability(const TaskInstance& task);

namespace detail {

inline std::uint64_t checked_pow(int base, int exp) {
  std::uint64_t v = 1;
  for (int i = 0; i < exp; ++i) {
    v *= static_cast<std::uint64_t>(base);
    if (v > kEnumerationBudget) throw InvalidArgument("task exceeds the enumeration budget");
  }
  return v;
}

inline void enumerate(const TaskInstance& task, TokenSeq& prefix, double prob, double& accepted) {
  if (static_cast<int>(prefix.size()) == task.max_len) {
    accepted += prob * verify(task, prefix);
    return;
  }
  const double p = prob / task.vocab;
  for (int a = 0; a < task.vocab; ++a) {
    prefix.push_back(static_cast<Token>(a));
    if (task.terminal && a == *task.terminal) {
      accepted += p * verify(task, prefix);
    } else {
      enumerate(task, prefix, p, accepted);
    }
    prefix.pop_back();
  }
}

inline TokenSeq index_to_sequence(std::uint64_t index, int vocab, int length) {
  TokenSeq seq(length);
  for (int i = length; i-- > 0;) {
    seq[i] = static_cast<Token>(index % vocab);
    index /= vocab;
  }
  return seq;
}

inline void finalize(TaskInstance& task) {
  std::sort(task.accepting.begin(), task.accepting.end());
  task.accepting.erase(std::unique(task.accepting.begin(), task.accepting.end()), task.accepting.end());
  if (task.accepting.empty()) throw InvalidArgument("task has an empty accepting set");
  for (const auto& s : task.accepting) {
    if (static_cast<int>(s.size()) > task.max_len) throw InvalidArgument("accepting sequence longer than max_len");
  }
  task.uniform_acceptance = uniform_acceptance_probability(task);
  task.difficulty = task.uniform_acceptance <= kHardAcceptance ? Difficulty::hard : Difficulty::easy;
}

}  // namespace detail

/// Exact acceptance probability of the uniform policy, by enumeration.
inline double uniform_acceptance_probability(const TaskInstance& task) {
  std::uint64_t states = 0;
  for (int len = 1; len <= task.max_len; ++len) states += detail::checked_pow(task.vocab, len);
  if (states > kEnumerationBudget) throw InvalidArgument("task exceeds the enumeration budget");
  TokenSeq prefix;
  double accepted = 0.0;
  detail::enumerate(task, prefix, 1.0, accepted);
  return accepted;
}

namespace detail {
inline void check_vocab_len(int vocab, int len) {
  if (vocab < 2 || vocab > kMaxVocab) throw InvalidArgument("vocab must be in [2, 16]");
  if (len < 1 || len > kMaxLength) throw InvalidArgument("length must be in [1, 8]");
}
}  // namespace detail

/// Exactly one accepting sequence of length code_len, drawn uniformly by seed.
inline TaskInstance make_combination_lock(int vocab, int code_len, std::uint64_t seed,
                                          PromptId prompt_id = 0) {
  detail::check_vocab_len(vocab, code_len);
  const std::uint64_t n = detail::checked_pow(vocab, code_len);
  Rng rng(derive_seed(seed, {0x10c4}));
  TaskInstance t;
  t.prompt_id = prompt_id;
  t.family = TaskFamily::combination_lock;
  t.vocab = vocab;
  t.max_len = code_len;
  t.seed = seed;
  t.shape = {code_len};
  t.accepting.push_back(detail::index_to_sequence(uniform_index(rng, n), vocab, code_len));
  detail::finalize(t);
  return t;
}

/// n_accepting distinct accepting leaves of a complete vocab-ary tree of the
/// given depth, chosen uniformly without replacement.
inline TaskInstance make_multipath_tree(int vocab, int depth, int n_accepting, std::uint64_t seed,
                                        PromptId prompt_id = 0) {
  detail::check_vocab_len(vocab, depth);
  const std::uint64_t n = detail::checked_pow(vocab, depth);
  if (n_accepting < 1 || static_cast<std::uint64_t>(n_accepting) > n) {
    throw InvalidArgument("n_accepting must be in [1, vocab^depth]");
  }
  Rng rng(derive_seed(seed, {0x7ee}));
  std::vector<std::uint64_t> idx(n);
  for (std::uint64_t i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < n_accepting; ++i) {
    const std::uint64_t j = i + uniform_index(rng, n - i);
    std::swap(idx[i], idx[j]);
  }
  TaskInstance t;
  t.prompt_id = prompt_id;
  t.family = TaskFamily::multipath_tree;
  t.vocab = vocab;
  t.max_len = depth;
  t.seed = seed;
  t.shape = {depth, n_accepting};
  for (int i = 0; i < n_accepting; ++i) t.accepting.push_back(detail::index_to_sequence(idx[i], vocab, depth));
  detail::finalize(t);
  return t;
}

struct ModularProgram {
  int start = 0;
  std::vector<std::pair<char, int>> ops;  // ('+', c) or ('*', c)

  int evaluate(int modulus) const {
    long long x = start;
    for (auto [op, c] : ops) x = op == '+' ? (x + c) % modulus : (x * c) % modulus;
    return static_cast<int>(x);
  }
};

inline ModularProgram modular_program(int modulus, int n_ops, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x303}));
  ModularProgram prog;
  prog.start = static_cast<int>(uniform_index(rng, modulus));
  for (int i = 0; i < n_ops; ++i) {
    const char op = uniform_index(rng, 2) == 0 ? '+' : '*';
    prog.ops.emplace_back(op, static_cast<int>(uniform_index(rng, modulus)));
  }
  return prog;
}

/// The prompt encodes a chain of modular operations; the answer is the residue
/// token followed by the terminal token (id = modulus).
inline TaskInstance make_modular_chain(int modulus, int n_ops, std::uint64_t seed, PromptId prompt_id = 0) {
  if (modulus < 2 || modulus + 1 > kMaxVocab) throw InvalidArgument("modulus must be in [2, 15]");
  if (n_ops < 1) throw InvalidArgument("n_ops must be >= 1");
  const int residue = modular_program(modulus, n_ops, seed).evaluate(modulus);
  TaskInstance t;
  t.prompt_id = prompt_id;
  t.family = TaskFamily::modular_chain;
  t.vocab = modulus + 1;
  t.max_len = 2;
  t.terminal = static_cast<Token>(modulus);
  t.seed = seed;
  t.shape = {modulus, n_ops};
  t.accepting.push_back(TokenSeq{static_cast<Token>(residue)});
  detail::finalize(t);
  return t;
}

/// Rebuilds an instance from its family, shape and seed.
inline TaskInstance rebuild_task(TaskFamily family, const std::vector<int>& shape, int vocab,
                                 std::uint64_t seed, PromptId prompt_id) {
  switch (family) {
    case TaskFamily::combination_lock:
      if (shape.size() != 1) throw InvalidArgument("lock shape must be {code_len}");
      return make_combination_lock(vocab, shape[0], seed, prompt_id);
    case TaskFamily::multipath_tree:
      if (shape.size() != 2) throw InvalidArgument("tree shape must be {depth, n_accepting}");
      return make_multipath_tree(vocab, shape[0], shape[1], seed, prompt_id);
    case TaskFamily::modular_chain:
      if (shape.size() != 2) throw InvalidArgument("modular shape must be {modulus, n_ops}");
      return make_modular_chain(shape[0], shape[1], seed, prompt_id);
  }
  throw InvalidArgument("unknown family");
}

struct CurriculumSpec {
  int size = 20;
  double hard_fraction = 0.3;
  // Hard instances are combination locks.
  int hard_vocab = 4;
  int hard_code_len = 5;
  // Easy instances.
  TaskFamily easy_family = TaskFamily::multipath_tree;
  int easy_vocab = 4;
  int easy_len = 2;
  int easy_accepting = 2;
  int modulus = 3;
  int n_ops = 3;
  int heldout_hard = 0;
};

struct Curriculum {
  std::vector<TaskInstance> instances;  // shuffled order
  double hard_fraction = 0.0;
  std::uint64_t seed = 0;

  std::size_t count(Difficulty d) const {
    return static_cast<std::size_t>(std::count_if(instances.begin(), instances.end(),
                                                  [d](const TaskInstance& t) { return t.difficulty == d; }));
  }

  std::string digest() const {
    std::string bytes;
    for (const auto& t : instances) bytes += std::to_string(t.prompt_id) + "/" + t.digest() + ";";
    return hex64(fnv1a(bytes));
  }
};

namespace detail {

inline TaskInstance make_easy(const CurriculumSpec& spec, std::uint64_t seed, PromptId id) {
  TaskInstance t;
  switch (spec.easy_family) {
    case TaskFamily::combination_lock:
      t = make_combination_lock(spec.easy_vocab, spec.easy_len, seed, id);
      break;
    case TaskFamily::multipath_tree:
      t = make_multipath_tree(spec.easy_vocab, spec.easy_len, spec.easy_accepting, seed, id);
      break;
    case TaskFamily::modular_chain:
      t = make_modular_chain(spec.modulus, spec.n_ops, seed, id);
      break;
  }
  if (t.uniform_acceptance < kEasyAcceptance) {
    throw InvalidArgument("easy task configuration has uniform acceptance below 0.05");
  }
  return t;
}

inline TaskInstance make_hard(const CurriculumSpec& spec, std::uint64_t seed, PromptId id) {
  TaskInstance t = make_combination_lock(spec.hard_vocab, spec.hard_code_len, seed, id);
  if (t.difficulty != Difficulty::hard) {
    throw InvalidArgument("hard task configuration has uniform acceptance above 1e-3");
  }
  return t;
}

}  // namespace detail

/// Deterministic shuffled curriculum with round(size * hard_fraction) hard locks.
inline Curriculum make_curriculum(const CurriculumSpec& spec, std::uint64_t seed) {
  if (spec.size < 1) throw InvalidArgument("curriculum size must be >= 1");
  if (!(spec.hard_fraction >= 0.0 && spec.hard_fraction <= 1.0)) {
    throw InvalidArgument("hard_fraction must be in [0, 1]");
  }
  const int n_hard = static_cast<int>(std::lround(spec.size * spec.hard_fraction));
  Curriculum c;
  c.seed = seed;
  for (int i = 0; i < spec.size; ++i) {
    const std::uint64_t s = derive_seed(seed, {0xc0, static_cast<std::uint64_t>(i)});
    const auto id = static_cast<PromptId>(i);
    c.instances.push_back(i < n_hard ? detail::make_hard(spec, s, id) : detail::make_easy(spec, s, id));
  }
  Rng rng(derive_seed(seed, {0x5f}));
  for (std::size_t i = c.instances.size(); i > 1; --i) {
    std::swap(c.instances[i - 1], c.instances[uniform_index(rng, i)]);
  }
  c.hard_fraction = static_cast<double>(c.count(Difficulty::hard)) / c.instances.size();
  return c;
}

/// Hard locks with prompt ids disjoint from the training curriculum.
inline std::vector<TaskInstance> make_heldout_hard(const CurriculumSpec& spec, std::uint64_t seed, int count) {
  std::vector<TaskInstance> out;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, {0x4e1d, static_cast<std::uint64_t>(i)});
    out.push_back(detail::make_hard(spec, s, static_cast<PromptId>(1'000'000 + i)));
  }
  return out;
}

// ---- line-delimited curriculum records -------------------------------------

inline nlohmann::ordered_json task_record(const TaskInstance& t) {
  nlohmann::ordered_json j;
  j["prompt_id"] = t.prompt_id;
  j["family"] = to_string(t.family);
  j["difficulty"] = to_string(t.difficulty);
  j["seed"] = t.seed;
  j["vocab"] = t.vocab;
  j["shape"] = t.shape;
  j["digest"] = t.digest();
  return j;
}

inline void write_curriculum(std::ostream& out, const Curriculum& c) {
  for (const auto& t : c.instances) out << task_record(t).dump() << '\n';
}

/// Reconstructs every record and checks its accepting-set digest.
inline std::vector<TaskInstance> read_curriculum(std::istream& in) {
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      auto t = rebuild_task(parse_family(j.at("family").get<std::string>()), j.at("shape").get<std::vector<int>>(),
                            j.at("vocab").get<int>(), j.at("seed").get<std::uint64_t>(),
                            j.at("prompt_id").get<PromptId>());
      if (t.digest() != j.at("digest").get<std::string>()) {
        throw CorruptState("curriculum record digest mismatch for prompt " + std::to_string(t.prompt_id));
      }
      out.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(std::string("malformed curriculum record: ") + e.what());
    }
  }
  return out;
}

}  // namespace uecrl
