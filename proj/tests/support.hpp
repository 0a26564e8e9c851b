#pragma once

// Oracles shared by the unit tests and the acceptance binary. Everything here
// recomputes quantities from first principles instead of calling the code
// under test for the answer.

#include <cmath>
#include <cstdint>
#include <deque>
#include <vector>

#include "uecrl/objective.hpp"

namespace uecrl::testing {

/// A random small batch for gradient checks: tabular or linear parameters,
/// trajectories whose old log-probabilities come from a nearby policy, random
/// advantages.
struct GradInstance {
  PolicyParams params = PolicyParams::tabular(2);
  PolicyParams ref = PolicyParams::tabular(2);
  std::vector<Trajectory> batch;
  ObjectiveConfig cfg;
};

inline std::vector<double> normal_row(Rng& rng, int V, double scale) {
  std::vector<double> z(V);
  for (double& x : z) x = scale * standard_normal(rng);
  return z;
}

/// Log-probabilities of `tokens` under `p`, step by step.
inline std::vector<double> step_logprobs(const PolicyParams& p, PromptId prompt, const TokenSeq& tokens) {
  std::vector<double> out;
  ContextKey ctx{prompt, {}};
  for (Token t : tokens) {
    const auto z = p.logits(ctx);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    out.push_back(z[t] - mx - std::log(s));
    ctx.prefix.push_back(t);
  }
  return out;
}

inline GradInstance make_grad_instance(std::uint64_t seed, bool linear) {
  Rng rng(derive_seed(seed, {0x6ad}));
  GradInstance g;
  const int V = 2 + static_cast<int>(uniform_index(rng, 4));
  const int n_traj = 1 + static_cast<int>(uniform_index(rng, 4));
  g.cfg.eps_low = 0.2;
  g.cfg.eps_high = uniform_index(rng, 2) ? 0.2 : 0.3;
  g.cfg.beta = uniform_index(rng, 2) ? 0.0 : 0.05;
  g.cfg.kl_mode = uniform_index(rng, 2) ? KlMode::exact : KlMode::k3_estimator;
  if (linear) {
    g.params = PolicyParams::linear(V, "hash2x16");
    for (double& w : g.params.mutable_weights()) w = 0.5 * standard_normal(rng);
    g.ref = PolicyParams::linear(V, "hash2x16");
    for (double& w : g.ref.mutable_weights()) w = 0.5 * standard_normal(rng);
  } else {
    g.params = PolicyParams::tabular(V);
    g.ref = PolicyParams::tabular(V);
  }
  for (int i = 0; i < n_traj; ++i) {
    Trajectory t;
    t.prompt_id = static_cast<PromptId>(uniform_index(rng, 2));
    const int len = 1 + static_cast<int>(uniform_index(rng, 3));
    for (int k = 0; k < len; ++k) t.tokens.push_back(static_cast<Token>(uniform_index(rng, V)));
    if (!linear) {
      ContextKey ctx{t.prompt_id, {}};
      for (Token tok : t.tokens) {
        if (!g.params.table().count(ctx)) g.params.set_row(ctx, normal_row(rng, V, 1.0));
        if (!g.ref.table().count(ctx)) g.ref.set_row(ctx, normal_row(rng, V, 1.0));
        ctx.prefix.push_back(tok);
      }
    }
    // Old log-probabilities: the current ones shifted by a random log-ratio.
    t.old_logprobs_t1 = step_logprobs(g.params, t.prompt_id, t.tokens);
    for (double& lp : t.old_logprobs_t1) lp -= 0.3 * standard_normal(rng);
    t.behavior_logprobs = t.old_logprobs_t1;
    t.advantage = 2.0 * standard_normal(rng);
    g.batch.push_back(std::move(t));
  }
  return g;
}

/// True when every ratio is at least `margin` from both clip boundaries.
inline bool away_from_kinks(const GradInstance& g, double margin = 1e-3) {
  for (const auto& t : g.batch) {
    const auto lp = step_logprobs(g.params, t.prompt_id, t.tokens);
    for (std::size_t i = 0; i < lp.size(); ++i) {
      const double r = std::exp(lp[i] - t.old_logprobs_t1[i]);
      if (std::abs(r - (1.0 - g.cfg.eps_low)) <= margin || std::abs(r - (1.0 + g.cfg.eps_high)) <= margin) return false;
    }
  }
  return true;
}

inline double objective_at(const GradInstance& g, const PolicyParams& p) {
  return objective_and_gradient(p, g.batch, g.cfg, &g.ref).objective;
}

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool ok = true;
};

/// Central differences of the objective against the analytic gradient for
/// every touched coordinate. Coordinates whose gradient is below `floor` are
/// compared in absolute terms against `floor * rel_tol`.
inline FdReport check_gradient(const GradInstance& g, double h, double rel_tol, double floor = 1e-6) {
  const auto analytic = objective_and_gradient(g.params, g.batch, g.cfg, &g.ref).gradient;
  FdReport rep;
  auto compare = [&](double an, double fd) {
    const double err = std::abs(fd - an);
    const double rel = std::abs(an) > floor ? err / std::abs(an) : err / floor;
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    rep.ok = rep.ok && rel <= rel_tol;
    ++rep.checked;
  };
  if (g.params.kind() == PolicyKind::tabular) {
    for (const auto& [ctx, row] : g.params.table()) {
      for (int a = 0; a < g.params.vocab_size(); ++a) {
        auto plus = g.params, minus = g.params;
        plus.mutable_row(ctx)[a] += h;
        minus.mutable_row(ctx)[a] -= h;
        compare(analytic.entry(ctx, a), (objective_at(g, plus) - objective_at(g, minus)) / (2 * h));
      }
    }
  } else {
    for (std::size_t i = 0; i < g.params.weights().size(); ++i) {
      auto plus = g.params, minus = g.params;
      plus.mutable_weights()[i] += h;
      minus.mutable_weights()[i] -= h;
      compare(analytic.weights[i], (objective_at(g, plus) - objective_at(g, minus)) / (2 * h));
    }
  }
  return rep;
}

/// Reference FIFO model of the replay buffer: ids in insertion order.
struct QueueModel {
  std::size_t capacity;
  std::deque<std::uint64_t> ids;

  void push(std::uint64_t id) {
    ids.push_back(id);
    if (ids.size() > capacity) ids.pop_front();
  }
};

}  // namespace uecrl::testing
