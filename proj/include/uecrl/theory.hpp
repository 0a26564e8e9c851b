#pragma once

// Exactly solvable softmax bandits for checking two entropy results:
//
//  * Under the tabular natural-gradient step theta[s] += eta * A(s, .), the
//    entropy change is -eta * E_s Cov_a[log pi(a|s), A(s,a)] to first order.
//  * Repeatedly raising the likelihood of a positive-advantage action drives
//    the entropy of the visited states to zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "uecrl/error.hpp"
#include "uecrl/format.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/random.hpp"

namespace uecrl::theory {

using Matrix = std::vector<std::vector<double>>;

struct BanditInstance {
  Matrix theta;                    // per-state logits
  Matrix advantage;                // per-state A(s, a), centered under pi
  std::vector<double> state_dist;  // d over states
  double eta = 1e-3;

  std::size_t n_states() const noexcept { return theta.size(); }
  std::size_t n_actions() const noexcept { return theta.empty() ? 0 : theta.front().size(); }

  void validate() const {
    if (theta.empty()) throw InvalidArgument("bandit needs at least one state");
    if (advantage.size() != theta.size() || state_dist.size() != theta.size()) {
      throw InvalidArgument("bandit arrays disagree on the number of states");
    }
    for (std::size_t s = 0; s < theta.size(); ++s) {
      if (theta[s].size() < 2 || theta[s].size() != theta.front().size() || advantage[s].size() != theta[s].size()) {
        throw InvalidArgument("bandit rows need the same number (>= 2) of actions");
      }
    }
    double total = 0.0;
    for (double d : state_dist) {
      if (d < 0.0) throw InvalidArgument("negative state probability");
      total += d;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("state distribution must sum to 1");
    if (!(eta > 0.0)) throw InvalidArgument("eta must be positive");
  }
};

inline std::vector<double> policy(const std::vector<double>& logits) { return softmax(logits, 1.0); }

/// Subtracts E_pi[A(s, .)] in every state.
inline void center_advantages(BanditInstance& inst) {
  for (std::size_t s = 0; s < inst.n_states(); ++s) {
    const auto p = policy(inst.theta[s]);
    double mean = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) mean += p[a] * inst.advantage[s][a];
    for (double& x : inst.advantage[s]) x -= mean;
  }
}

/// State-averaged policy entropy.
inline double mean_entropy(const Matrix& theta, const std::vector<double>& d) {
  double h = 0.0;
  for (std::size_t s = 0; s < theta.size(); ++s) h += d[s] * token_entropy(policy(theta[s]));
  return h;
}

inline double max_state_entropy(const Matrix& theta) {
  double h = 0.0;
  for (const auto& row : theta) h = std::max(h, token_entropy(policy(row)));
  return h;
}

/// theta[s][a] += eta * A(s, a).
inline Matrix npg_update(const BanditInstance& inst) {
  inst.validate();
  Matrix out = inst.theta;
  for (std::size_t s = 0; s < out.size(); ++s) {
    for (std::size_t a = 0; a < out[s].size(); ++a) {
      out[s][a] += inst.eta * inst.advantage[s][a];
      if (!std::isfinite(out[s][a])) throw CorruptState("non-finite natural-gradient update");
    }
  }
  return out;
}

/// E_s [ E_a[log pi * A] - E_a[log pi] E_a[A] ].
inline double entropy_cov(const BanditInstance& inst) {
  double total = 0.0;
  for (std::size_t s = 0; s < inst.n_states(); ++s) {
    const auto logp = log_softmax(inst.theta[s], 1.0);
    double e_la = 0.0, e_l = 0.0, e_a = 0.0;
    for (std::size_t a = 0; a < logp.size(); ++a) {
      const double p = std::exp(logp[a]);
      e_la += p * logp[a] * inst.advantage[s][a];
      e_l += p * logp[a];
      e_a += p * inst.advantage[s][a];
    }
    total += inst.state_dist[s] * (e_la - e_l * e_a);
  }
  return total;
}

/// Same covariance via sum_a pi(a) (log pi(a) - E log pi)(A(a) - E A).
inline double entropy_cov_centered(const BanditInstance& inst) {
  double total = 0.0;
  for (std::size_t s = 0; s < inst.n_states(); ++s) {
    const auto logp = log_softmax(inst.theta[s], 1.0);
    double e_l = 0.0, e_a = 0.0;
    for (std::size_t a = 0; a < logp.size(); ++a) {
      e_l += std::exp(logp[a]) * logp[a];
      e_a += std::exp(logp[a]) * inst.advantage[s][a];
    }
    double cov = 0.0;
    for (std::size_t a = 0; a < logp.size(); ++a) {
      cov += std::exp(logp[a]) * (logp[a] - e_l) * (inst.advantage[s][a] - e_a);
    }
    total += inst.state_dist[s] * cov;
  }
  return total;
}

struct EntropyReport {
  double predicted_delta = 0.0;
  double actual_delta = 0.0;
  double abs_error = 0.0;
  double eta = 0.0;
};

inline EntropyReport verify_theorem1(const BanditInstance& inst) {
  inst.validate();
  EntropyReport r;
  r.eta = inst.eta;
  r.predicted_delta = -inst.eta * entropy_cov(inst);
  r.actual_delta = mean_entropy(npg_update(inst), inst.state_dist) - mean_entropy(inst.theta, inst.state_dist);
  r.abs_error = std::abs(r.actual_delta - r.predicted_delta);
  return r;
}

/// Central difference of the mean entropy along theta + h * A at h -> 0.
inline double finite_diff_entropy(const BanditInstance& inst, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite difference step must be positive");
  auto shifted = [&](double sign) {
    Matrix th = inst.theta;
    for (std::size_t s = 0; s < th.size(); ++s) {
      for (std::size_t a = 0; a < th[s].size(); ++a) th[s][a] += sign * h * inst.advantage[s][a];
    }
    return mean_entropy(th, inst.state_dist);
  };
  return (shifted(+1.0) - shifted(-1.0)) / (2.0 * h);
}

/// Random instance with N(0, logit_scale^2) logits, N(0, 1) advantages
/// centered under the policy, and a random positive state distribution.
inline BanditInstance make_random_bandit(std::uint64_t seed, std::size_t n_states, std::size_t n_actions,
                                         double eta, double logit_scale = 1.0) {
  if (n_states < 1 || n_actions < 2) throw InvalidArgument("bandit needs >= 1 state and >= 2 actions");
  Rng rng(derive_seed(seed, {0xba7d17}));
  BanditInstance inst;
  inst.eta = eta;
  inst.theta.assign(n_states, std::vector<double>(n_actions));
  inst.advantage.assign(n_states, std::vector<double>(n_actions));
  double total = 0.0;
  for (std::size_t s = 0; s < n_states; ++s) {
    for (std::size_t a = 0; a < n_actions; ++a) {
      inst.theta[s][a] = logit_scale * standard_normal(rng);
      inst.advantage[s][a] = standard_normal(rng);
    }
    inst.state_dist.push_back(0.1 + uniform01(rng));
    total += inst.state_dist.back();
  }
  for (double& d : inst.state_dist) d /= total;
  // Renormalize so the sum is 1 to the last bit where possible.
  inst.state_dist.back() = 1.0;
  for (std::size_t s = 0; s + 1 < n_states; ++s) inst.state_dist.back() -= inst.state_dist[s];
  center_advantages(inst);
  return inst;
}

/// Single state where the least likely action carries the largest advantage.
inline BanditInstance make_low_prob_high_advantage(std::uint64_t seed, std::size_t n_actions, double eta) {
  BanditInstance inst = make_random_bandit(seed, 1, n_actions, eta, 1.5);
  const auto& th = inst.theta[0];
  const auto lowest = static_cast<std::size_t>(std::min_element(th.begin(), th.end()) - th.begin());
  for (std::size_t a = 0; a < n_actions; ++a) inst.advantage[0][a] = a == lowest ? 1.0 : 0.0;
  center_advantages(inst);
  return inst;
}

// ---- repeated positive-advantage updates ------------------------------------

struct ReplayInstance {
  Matrix theta;                        // per visited context
  std::vector<std::size_t> designated; // replayed action per context
  double advantage = 2.0;              // A(q, o) > 0 of the replayed trajectory
  double eta = 0.1;
};

struct Theorem2Trace {
  std::vector<double> entropy;           // mean over contexts, H_0..H_n
  std::vector<double> max_entropy;       // max over contexts
  std::vector<double> designated_logprob;  // log pi(o | q), sum over contexts
  std::vector<double> cov;               // Cov[log pi, A (e_o - pi)] before each step
  bool logprob_increasing = true;
  std::optional<std::size_t> decreasing_from;  // smallest K with H strictly decreasing after K
  std::size_t peak = 0;
  std::size_t local_maxima = 0;

  double final_entropy() const { return entropy.back(); }
};

inline Matrix replay_step(const ReplayInstance& inst, const Matrix& theta) {
  Matrix out = theta;
  for (std::size_t s = 0; s < out.size(); ++s) {
    const auto p = policy(theta[s]);
    for (std::size_t a = 0; a < p.size(); ++a) {
      out[s][a] += inst.eta * inst.advantage * ((a == inst.designated[s] ? 1.0 : 0.0) - p[a]);
    }
  }
  return out;
}

/// Applies n_updates of theta += eta * A * grad log pi(o | q) and records the
/// entropy trajectory.
inline Theorem2Trace verify_theorem2(const ReplayInstance& inst, std::size_t n_updates) {
  if (inst.theta.empty() || inst.designated.size() != inst.theta.size()) {
    throw InvalidArgument("replay instance needs one designated action per context");
  }
  if (!(inst.advantage > 0.0)) throw InvalidArgument("replayed trajectory must have positive advantage");
  Theorem2Trace tr;
  Matrix theta = inst.theta;
  const std::vector<double> uniform_d(theta.size(), 1.0 / static_cast<double>(theta.size()));
  auto record = [&](const Matrix& th) {
    tr.entropy.push_back(mean_entropy(th, uniform_d));
    tr.max_entropy.push_back(max_state_entropy(th));
    double lp = 0.0;
    for (std::size_t s = 0; s < th.size(); ++s) lp += log_softmax(th[s], 1.0)[inst.designated[s]];
    tr.designated_logprob.push_back(lp);
  };
  record(theta);
  for (std::size_t k = 0; k < n_updates; ++k) {
    BanditInstance b;
    b.theta = theta;
    b.state_dist = uniform_d;
    b.eta = inst.eta;
    b.advantage.resize(theta.size());
    // The replay step moves the logits by eta * A * (e_o - pi), so this is the
    // advantage whose natural-gradient step coincides with it.
    for (std::size_t s = 0; s < theta.size(); ++s) {
      const auto p = policy(theta[s]);
      b.advantage[s].resize(p.size());
      for (std::size_t a = 0; a < p.size(); ++a) {
        b.advantage[s][a] = inst.advantage * ((a == inst.designated[s] ? 1.0 : 0.0) - p[a]);
      }
    }
    tr.cov.push_back(entropy_cov(b));
    theta = replay_step(inst, theta);
    record(theta);
  }
  for (std::size_t k = 1; k < tr.designated_logprob.size(); ++k) {
    tr.logprob_increasing = tr.logprob_increasing && tr.designated_logprob[k] > tr.designated_logprob[k - 1];
  }
  std::size_t k = tr.entropy.size() - 1;
  while (k > 0 && tr.entropy[k] < tr.entropy[k - 1]) --k;
  if (k + 1 < tr.entropy.size() || tr.entropy.size() == 1) tr.decreasing_from = k;
  tr.peak = static_cast<std::size_t>(std::max_element(tr.entropy.begin(), tr.entropy.end()) - tr.entropy.begin());
  for (std::size_t i = 0; i < tr.entropy.size(); ++i) {
    const bool left = i == 0 || tr.entropy[i] > tr.entropy[i - 1];
    const bool right = i + 1 == tr.entropy.size() || tr.entropy[i] > tr.entropy[i + 1];
    tr.local_maxima += left && right;
  }
  return tr;
}

inline ReplayInstance make_random_replay(std::uint64_t seed, std::size_t n_contexts, std::size_t n_actions,
                                         double eta = 0.1, double advantage = 2.0) {
  Rng rng(derive_seed(seed, {0x2e91a7}));
  ReplayInstance inst;
  inst.eta = eta;
  inst.advantage = advantage;
  for (std::size_t s = 0; s < n_contexts; ++s) {
    std::vector<double> row(n_actions);
    for (double& z : row) z = standard_normal(rng);
    inst.theta.push_back(std::move(row));
    inst.designated.push_back(uniform_index(rng, n_actions));
  }
  return inst;
}

// ---- verification suite ------------------------------------------------------

struct VerificationRow {
  std::string check;
  std::uint64_t seed = 0;
  double eta = 0.0;
  double predicted = 0.0;
  double actual = 0.0;
  double residual = 0.0;
  bool pass = false;
};

inline void write_row(std::ostream& out, const VerificationRow& r) {
  out << "{\"check\":\"" << r.check << "\",\"seed\":" << r.seed << ",\"eta\":" << fmt_real(r.eta)
      << ",\"predicted\":" << fmt_real(r.predicted) << ",\"actual\":" << fmt_real(r.actual)
      << ",\"residual\":" << fmt_real(r.residual) << ",\"verdict\":\"" << (r.pass ? "pass" : "fail") << "\"}\n";
}

struct SuiteSummary {
  std::string name;
  std::size_t passed = 0;
  std::size_t total = 0;
  bool ok() const { return passed == total; }
};

/// Instance shape used by the covariance-identity checks for a given seed.
inline BanditInstance theorem1_instance(std::uint64_t seed, double eta) {
  Rng rng(derive_seed(seed, {0x71}));
  const std::size_t n_states = 1 + uniform_index(rng, 4);
  const std::size_t n_actions = 2 + uniform_index(rng, 9);
  return make_random_bandit(seed, n_states, n_actions, eta);
}

/// Instance shape used by the replay-stabilization checks for a given seed: up to eight
/// visited contexts over two to eight actions, replayed with the advantage a
/// lone success receives in a five-sample group.
inline ReplayInstance theorem2_instance(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x72}));
  const std::size_t n_contexts = 1 + uniform_index(rng, kMaxLength);
  const std::size_t n_actions = 2 + uniform_index(rng, 7);
  return make_random_replay(seed, n_contexts, n_actions, 0.1, 2.0);
}

inline constexpr double kTheorem1MaxResidual = 1e-4;    // at eta = 1e-3
inline constexpr double kTheorem1MinRatio = 30.0;       // residual(1e-2) / residual(1e-3)
inline constexpr double kTheorem1MaxRatio = 300.0;
inline constexpr double kFiniteDiffRelTol = 1e-3;
inline constexpr double kTheorem2MaxEntropy = 0.05;
inline constexpr std::size_t kTheorem2Updates = 1000;
inline constexpr std::size_t kTheorem2TailSteps = 100;

/// Runs every check over `n_seeds` seeds starting at `first_seed`, writing
/// one row per check instance when `rows` is non-null.
inline std::vector<SuiteSummary> run_theorem_suite(std::uint64_t first_seed, std::size_t n_seeds,
                                                   std::ostream* rows = nullptr) {
  SuiteSummary t1{"theorem1_residual", 0, 0}, t1s{"theorem1_scaling", 0, 0}, t1c{"theorem1_sign", 0, 0};
  SuiteSummary fd{"finite_difference", 0, 0}, t2{"theorem2_stabilization", 0, 0};
  auto emit = [&](SuiteSummary& sum, const VerificationRow& r) {
    ++sum.total;
    sum.passed += r.pass;
    if (rows) write_row(*rows, r);
  };
  for (std::uint64_t seed = first_seed; seed < first_seed + n_seeds; ++seed) {
    const auto small = verify_theorem1(theorem1_instance(seed, 1e-3));
    const auto large = verify_theorem1(theorem1_instance(seed, 1e-2));
    emit(t1, {"theorem1_residual", seed, 1e-3, small.predicted_delta, small.actual_delta, small.abs_error,
              small.abs_error <= kTheorem1MaxResidual});
    const double ratio = large.abs_error / std::max(small.abs_error, 1e-300);
    emit(t1s, {"theorem1_scaling", seed, 1e-2, large.predicted_delta, large.actual_delta, ratio,
               ratio >= kTheorem1MinRatio && ratio <= kTheorem1MaxRatio});

    const auto lphA = make_low_prob_high_advantage(seed, 2 + seed % 9, 1e-2);
    const auto rep = verify_theorem1(lphA);
    emit(t1c, {"theorem1_sign", seed, lphA.eta, rep.predicted_delta, rep.actual_delta, entropy_cov(lphA),
               entropy_cov(lphA) < 0.0 && rep.actual_delta > 0.0});

    const auto inst = theorem1_instance(seed, 1.0);
    const double fd_val = finite_diff_entropy(inst, 1e-5);
    const double analytic = -entropy_cov(inst);
    const double rel = std::abs(fd_val - analytic) / std::max(std::abs(analytic), 1e-12);
    emit(fd, {"finite_difference", seed, 1e-5, analytic, fd_val, rel, rel <= kFiniteDiffRelTol});

    const auto tr = verify_theorem2(theorem2_instance(seed), kTheorem2Updates);
    const bool tail_decreasing =
        tr.decreasing_from && *tr.decreasing_from + kTheorem2TailSteps <= kTheorem2Updates;
    const double final_max = tr.max_entropy.back();
    emit(t2, {"theorem2_stabilization", seed, 0.1, 0.0, final_max, tr.entropy.front() - tr.final_entropy(),
              tr.logprob_increasing && tail_decreasing && final_max < kTheorem2MaxEntropy &&
                  tr.final_entropy() < tr.entropy.front()});
  }
  return {t1, t1s, t1c, fd, t2};
}

}  // namespace uecrl::theory
