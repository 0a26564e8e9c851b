#pragma once

// Grid over exploration temperature t' and buffer size s' with the summary
// statistics used for the entropy-trend table.

#include <cstdint>
#include <string>
#include <vector>

#include "uecrl/config.hpp"
#include "uecrl/metrics.hpp"
#include "uecrl/trainer.hpp"

namespace uecrl {

inline constexpr std::int64_t kEntropyWindow = 100;

/// Mean token entropy over the records of the last `window` steps.
inline double tail_entropy(const std::vector<MetricsRecord>& records, std::int64_t window = kEntropyWindow) {
  if (records.empty()) throw InvalidArgument("tail_entropy: no records");
  const std::int64_t last = records.back().step;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.step > last - window) {
      sum += r.token_entropy_mean;
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

/// Final-step evaluation score of a class at pass@k.
inline double final_pass(const Experiment& exp, const std::string& cls, int k) {
  for (const auto& c : exp.evaluate_all(exp.state.params, exp.state.global_step)) {
    if (c.name == cls) return c.at(k);
  }
  throw InvalidArgument("no evaluation class '" + cls + "'");
}

struct SweepCell {
  double t_prime = 1.0;
  std::size_t s_prime = 1;
  double entropy = 0.0;    // tail entropy, mean over seeds
  double hard_pass1 = 0.0; // final hard pass@1, mean over seeds
};

struct SweepResult {
  std::vector<double> t_values;
  std::vector<std::size_t> s_values;
  std::vector<SweepCell> cells;  // row-major: t outer, s inner

  const SweepCell& at(std::size_t ti, std::size_t si) const { return cells.at(ti * s_values.size() + si); }

  struct Trend {
    int satisfied = 0;
    int total = 0;
  };

  /// Adjacent-pair comparisons: entropy non-decreasing in t' at every s',
  /// non-increasing in s' at every t' >= min_t_for_s.
  Trend trend(double min_t_for_s = 1.1) const {
    Trend tr;
    for (std::size_t si = 0; si < s_values.size(); ++si) {
      for (std::size_t ti = 0; ti + 1 < t_values.size(); ++ti) {
        ++tr.total;
        tr.satisfied += at(ti + 1, si).entropy >= at(ti, si).entropy;
      }
    }
    for (std::size_t ti = 0; ti < t_values.size(); ++ti) {
      if (t_values[ti] < min_t_for_s - 1e-12) continue;
      for (std::size_t si = 0; si + 1 < s_values.size(); ++si) {
        ++tr.total;
        tr.satisfied += at(ti, si + 1).entropy <= at(ti, si).entropy;
      }
    }
    return tr;
  }
};

/// Trains the uec configuration for every (t', s') cell and seed; each seed
/// also reseeds the curriculum.
inline SweepResult run_sweep(const TrainConfig& base, const std::vector<double>& t_values,
                             const std::vector<std::size_t>& s_values, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw InvalidArgument("sweep needs at least one seed");
  SweepResult res{t_values, s_values, {}};
  for (double t : t_values) {
    for (std::size_t s : s_values) {
      SweepCell cell{t, s, 0.0, 0.0};
      for (std::uint64_t seed : seeds) {
        TrainConfig cfg = base;
        cfg.algorithm = Algorithm::uec;
        cfg.uec.t_prime = t;
        cfg.uec.s_prime = s;
        cfg.seed = seed;
        cfg.curriculum_seed = seed;
        cfg.eval_every = cfg.max_steps + 1;  // scored once at the end
        const Experiment exp = train(cfg);
        cell.entropy += tail_entropy(exp.state.metrics);
        cell.hard_pass1 += final_pass(exp, "hard", 1);
      }
      cell.entropy /= static_cast<double>(seeds.size());
      cell.hard_pass1 /= static_cast<double>(seeds.size());
      res.cells.push_back(cell);
    }
  }
  return res;
}

}  // namespace uecrl
