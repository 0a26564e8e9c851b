#pragma once

// Difficulty-gated exploration and advantage-filtered replay.
//
// Per prompt: a regular group of G responses at temperature 1. If any response
// succeeds, the nonzero-advantage responses (O_R) join the update set. If none
// does, the prompt is difficult: G' responses are drawn at temperature t', their
// advantages are normalized within that group alone, and the positive-advantage
// ones (O_H) join the update set and are offered to the replay buffer, which
// keeps the s' most recent entries whose advantage exceeds A0.

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "uecrl/objective.hpp"
#include "uecrl/random.hpp"
#include "uecrl/rollout.hpp"
#include "uecrl/tasks.hpp"

namespace uecrl {

struct UecConfig {
  int G = 5;
  int G_prime = 20;
  double t_prime = 1.2;
  std::size_t s_prime = 512;
  int f_replay = 5;      // 0 disables replay (and buffering)
  double A0 = 1.0;
  int replay_batch = 0;  // replay minibatch; 0: batch_size * G trajectories

  /// G' = G at t' = 1 adds nothing over the regular group, so the controller
  /// treats that configuration as exploration switched off.
  bool exploration_enabled() const noexcept { return G_prime > G || t_prime != 1.0; }
  bool replay_enabled() const noexcept { return f_replay > 0; }

  void validate() const {
    if (G < 2) throw InvalidArgument("G must be >= 2");
    if (G_prime < 2) throw InvalidArgument("G_prime must be >= 2");
    if (G_prime < G) throw InvalidArgument("G_prime must be >= G");
    if (!(t_prime >= 1.0) || !std::isfinite(t_prime)) throw InvalidArgument("t_prime must be >= 1");
    if (s_prime < 1) throw InvalidArgument("s_prime must be >= 1");
    if (f_replay < 0) throw InvalidArgument("f_replay must be >= 0");
    if (replay_batch < 0) throw InvalidArgument("replay_batch must be >= 0");
    if (!std::isfinite(A0)) throw InvalidArgument("A0 must be finite");
  }
};

/// Bounded FIFO of high-advantage trajectories.
class ReplayBuffer {
 public:
  struct Entry {
    Trajectory trajectory;
    std::uint64_t insertion_index = 0;
  };

  explicit ReplayBuffer(std::size_t capacity = 512) : capacity_(capacity) {
    if (capacity == 0) throw InvalidArgument("replay buffer capacity must be >= 1");
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::uint64_t total_pushed() const noexcept { return total_pushed_; }
  const std::deque<Entry>& entries() const noexcept { return entries_; }

  /// Appends one trajectory, evicting the oldest entry when full.
  void push(Trajectory t) {
    entries_.push_back({std::move(t), total_pushed_++});
    if (entries_.size() > capacity_) entries_.pop_front();
  }

  /// Restores an entry with its original insertion index (checkpoint load).
  void restore(Trajectory t, std::uint64_t insertion_index) {
    entries_.push_back({std::move(t), insertion_index});
    total_pushed_ = std::max(total_pushed_, insertion_index + 1);
    if (entries_.size() > capacity_) entries_.pop_front();
  }

  void set_total_pushed(std::uint64_t n) {
    if (!entries_.empty() && entries_.back().insertion_index >= n) {
      throw CorruptState("push count below a stored insertion index");
    }
    total_pushed_ = n;
  }

 private:
  std::size_t capacity_;
  std::uint64_t total_pushed_ = 0;
  std::deque<Entry> entries_;
};

/// True iff no response in the group earned a positive reward.
inline bool is_difficult(const RolloutGroup& group) {
  for (const auto& t : group.trajectories) {
    if (t.reward > 0.0) return false;
  }
  return true;
}

/// Tempered G'-sample rollout with advantages normalized within the group.
inline RolloutGroup explore(const PolicyParams& old, const TaskInstance& task, const UecConfig& cfg,
                            std::uint64_t seed, std::int64_t birth_step = 0, double eps_std = 1e-8) {
  RolloutGroup g = rollout_group(old, task, cfg.G_prime, cfg.t_prime, seed, birth_step);
  for (auto& t : g.trajectories) t.source = TrajectorySource::exploratory;
  assign_advantages(g, eps_std);
  return g;
}

/// O_R: responses with nonzero advantage.
inline std::vector<Trajectory> filter_regular(const RolloutGroup& group) {
  std::vector<Trajectory> out;
  for (const auto& t : group.trajectories) {
    if (t.advantage != 0.0) out.push_back(t);
  }
  return out;
}

/// O_H: responses with strictly positive advantage.
inline std::vector<Trajectory> filter_exploratory(const RolloutGroup& group) {
  std::vector<Trajectory> out;
  for (const auto& t : group.trajectories) {
    if (t.advantage > 0.0) out.push_back(t);
  }
  return out;
}

/// Appends, in arrival order, every candidate with advantage > A0. Returns
/// the number accepted.
inline std::size_t buffer_push(ReplayBuffer& buffer, std::span<const Trajectory> candidates, double A0) {
  std::size_t accepted = 0;
  for (const auto& t : candidates) {
    if (t.advantage > A0) {
      buffer.push(t);
      ++accepted;
    }
  }
  return accepted;
}

/// Uniform sample without replacement of min(n, |buffer|) entries, tagged as
/// replay. Entries stay in the buffer.
inline std::vector<Trajectory> replay_batch(const ReplayBuffer& buffer, std::size_t n, std::uint64_t seed) {
  std::vector<Trajectory> out;
  const std::size_t size = buffer.size();
  const std::size_t k = std::min(n, size);
  if (k == 0) return out;
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_index(rng, size - i);
    std::swap(idx[i], idx[j]);
  }
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    out.push_back(buffer.entries()[idx[i]].trajectory);
    out.back().source = TrajectorySource::replay;
  }
  return out;
}

struct UecStepOptions {
  bool exploration = true;  // run the tempered G' rollout on difficult prompts
  bool buffering = true;    // push O_S into the replay buffer
  double eps_std = 1e-8;
};

struct UecStepResult {
  std::vector<Trajectory> effective;          // O_eff, minibatch order
  std::vector<RolloutGroup> regular_groups;   // one per task
  std::vector<RolloutGroup> explore_groups;   // one per explored prompt
  std::size_t difficult = 0;
  std::size_t explored = 0;
  std::size_t pushed = 0;
};

/// Collection phase of one training step. Sub-seeds: regular group of prompt
/// p uses derive_seed(step_seed, {p, 0}); its exploration group uses
/// derive_seed(step_seed, {p, 1}).
inline UecStepResult uec_step(const PolicyParams& old, std::span<const TaskInstance* const> tasks,
                              const UecConfig& cfg, ReplayBuffer* buffer, std::uint64_t step_seed,
                              std::int64_t global_step, const UecStepOptions& opts = {}) {
  UecStepResult res;
  for (const TaskInstance* task : tasks) {
    RolloutGroup group = rollout_group(old, *task, cfg.G, 1.0, derive_seed(step_seed, {task->prompt_id, 0}),
                                       global_step);
    assign_advantages(group, opts.eps_std);
    if (!is_difficult(group)) {
      for (auto& t : filter_regular(group)) res.effective.push_back(std::move(t));
    } else {
      ++res.difficult;
      if (opts.exploration) {
        ++res.explored;
        RolloutGroup eg = explore(old, *task, cfg, derive_seed(step_seed, {task->prompt_id, 1}), global_step,
                                  opts.eps_std);
        auto o_h = filter_exploratory(eg);
        if (opts.buffering && buffer != nullptr) {
          // O_S = O_H plus the regular group's positive-advantage responses;
          // the latter is empty here since every regular response failed.
          std::vector<Trajectory> o_s = o_h;
          for (const auto& t : group.trajectories) {
            if (t.advantage > 0.0) o_s.push_back(t);
          }
          res.pushed += buffer_push(*buffer, o_s, cfg.A0);
        }
        for (auto& t : o_h) res.effective.push_back(std::move(t));
        res.explore_groups.push_back(std::move(eg));
      }
    }
    res.regular_groups.push_back(std::move(group));
  }
  return res;
}

}  // namespace uecrl
