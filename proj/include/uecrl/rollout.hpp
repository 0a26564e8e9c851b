#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "uecrl/format.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/random.hpp"
#include "uecrl/tasks.hpp"

namespace uecrl {

enum class TrajectorySource { regular, exploratory, replay };

inline const char* to_string(TrajectorySource s) {
  switch (s) {
    case TrajectorySource::regular: return "regular";
    case TrajectorySource::exploratory: return "exploratory";
    case TrajectorySource::replay: return "replay";
  }
  return "?";
}

inline TrajectorySource parse_source(const std::string& s) {
  if (s == "regular") return TrajectorySource::regular;
  if (s == "exploratory") return TrajectorySource::exploratory;
  if (s == "replay") return TrajectorySource::replay;
  throw InvalidArgument("unknown trajectory source '" + s + "'");
}

struct Trajectory {
  PromptId prompt_id = 0;
  TokenSeq tokens;
  std::vector<double> behavior_logprobs;  // at the sampling temperature
  std::vector<double> old_logprobs_t1;    // old policy, temperature 1
  std::vector<double> old_entropy_t1;     // old policy entropy per step, temperature 1
  double reward = 0.0;
  double advantage = 0.0;
  TrajectorySource source = TrajectorySource::regular;
  std::int64_t birth_step = 0;

  std::size_t length() const noexcept { return tokens.size(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct RolloutGroup {
  PromptId prompt_id = 0;
  std::vector<Trajectory> trajectories;
  int group_size = 0;
  double temperature = 1.0;

  double max_reward() const {
    double m = -INFINITY;
    for (const auto& t : trajectories) m = std::max(m, t.reward);
    return m;
  }
  int successes() const {
    int n = 0;
    for (const auto& t : trajectories) n += t.reward > 0.0;
    return n;
  }
};

/// Read-only view of the old policy for one step.
using FrozenPolicy = std::shared_ptr<const PolicyParams>;

/// Deep copy; later updates to the live parameters never reach it.
inline FrozenPolicy snapshot(const PolicyParams& params) {
  if (!params.all_finite()) throw CorruptState("snapshot of non-finite parameters");
  return std::make_shared<const PolicyParams>(params);
}

/// Samples group_size responses for one task. Response i draws from its own
/// stream derive_seed(seed, {i}), so the group does not depend on the order in
/// which members are generated.
inline RolloutGroup rollout_group(const PolicyParams& old, const TaskInstance& task, int group_size,
                                  double temperature, std::uint64_t seed, std::int64_t birth_step = 0) {
  if (group_size < 2) throw InvalidArgument("group_size must be >= 2");
  if (old.vocab_size() < task.vocab) throw InvalidArgument("policy vocabulary smaller than task vocabulary");
  RolloutGroup group;
  group.prompt_id = task.prompt_id;
  group.group_size = group_size;
  group.temperature = temperature;
  group.trajectories.reserve(group_size);
  const SamplingOptions opts{temperature, 1.0};
  for (int i = 0; i < group_size; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    auto s = sample_sequence(old, task.prompt_id, opts, task.max_len, task.terminal, rng);
    Trajectory t;
    t.prompt_id = task.prompt_id;
    t.tokens = std::move(s.tokens);
    t.behavior_logprobs = std::move(s.logprobs);
    t.old_logprobs_t1 = std::move(s.logprobs_t1);
    t.old_entropy_t1 = std::move(s.entropy_t1);
    t.reward = verify(task, t.tokens);
    t.source = temperature == 1.0 ? TrajectorySource::regular : TrajectorySource::exploratory;
    t.birth_step = birth_step;
    group.trajectories.push_back(std::move(t));
  }
  return group;
}

// ---- line-delimited trajectory records -------------------------------------

namespace detail {
inline void write_reals(std::ostream& out, const std::vector<double>& v, int digits) {
  out << '[';
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << fmt_real(v[i], digits);
  out << ']';
}
}  // namespace detail

/// One JSON object per line; reals at `digits` significant digits (9 for
/// debug dumps, 17 when the record must round-trip exactly).
inline void write_trajectory(std::ostream& out, const Trajectory& t, int digits = 9,
                             std::optional<std::uint64_t> insertion_index = std::nullopt) {
  out << "{\"prompt_id\":" << t.prompt_id << ",\"tokens\":[";
  for (std::size_t i = 0; i < t.tokens.size(); ++i) out << (i ? "," : "") << t.tokens[i];
  out << "],\"reward\":" << fmt_real(t.reward, digits) << ",\"advantage\":" << fmt_real(t.advantage, digits)
      << ",\"source\":\"" << to_string(t.source) << "\",\"birth_step\":" << t.birth_step
      << ",\"behavior_logprobs\":";
  detail::write_reals(out, t.behavior_logprobs, digits);
  out << ",\"old_logprobs_t1\":";
  detail::write_reals(out, t.old_logprobs_t1, digits);
  out << ",\"old_entropy_t1\":";
  detail::write_reals(out, t.old_entropy_t1, digits);
  if (insertion_index) out << ",\"insertion_index\":" << *insertion_index;
  out << "}\n";
}

inline Trajectory parse_trajectory(const nlohmann::json& j) {
  Trajectory t;
  t.prompt_id = j.at("prompt_id").get<PromptId>();
  t.tokens = j.at("tokens").get<TokenSeq>();
  t.reward = j.at("reward").get<double>();
  t.advantage = j.at("advantage").get<double>();
  t.source = parse_source(j.at("source").get<std::string>());
  t.birth_step = j.at("birth_step").get<std::int64_t>();
  t.behavior_logprobs = j.at("behavior_logprobs").get<std::vector<double>>();
  t.old_logprobs_t1 = j.at("old_logprobs_t1").get<std::vector<double>>();
  t.old_entropy_t1 = j.at("old_entropy_t1").get<std::vector<double>>();
  if (t.behavior_logprobs.size() != t.tokens.size() || t.old_logprobs_t1.size() != t.tokens.size()) {
    throw InvalidArgument("trajectory record has mismatched track lengths");
  }
  return t;
}

}  // namespace uecrl
