#pragma once

// Group-normalized advantages and the clipped surrogate with an optional KL
// penalty toward a reference policy:
//
//   J = 1/N sum_i 1/|o_i| sum_t [ min(r_t A_i, clip(r_t, 1-eps_low, 1+eps_high) A_i)
//                                 - beta KL_t ]
//
// with r_t = pi(o_t | ctx_t) / pi_old(o_t | ctx_t). Setting eps_high > eps_low
// gives the clip-higher variant.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "uecrl/error.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/rollout.hpp"

namespace uecrl {

enum class KlMode { exact, k3_estimator };

struct ObjectiveConfig {
  double eps_low = 0.2;
  double eps_high = 0.2;
  double beta = 0.0;
  double eps_std = 1e-8;
  KlMode kl_mode = KlMode::exact;

  void validate() const {
    if (!(eps_low >= 0.0 && eps_low <= 1.0)) throw InvalidArgument("eps_low must be in [0, 1]");
    if (!(eps_high >= 0.0) || !std::isfinite(eps_high)) throw InvalidArgument("eps_high must be finite and >= 0");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw InvalidArgument("beta must be finite and >= 0");
    if (!(eps_std > 0.0)) throw InvalidArgument("eps_std must be positive");
  }
};

/// (R_i - mean) / std with the population std; a group whose std is below
/// eps_std gets all-zero advantages.
inline std::vector<double> group_advantages(std::span<const double> rewards, double eps_std = 1e-8) {
  if (rewards.size() < 2) throw InvalidArgument("group_advantages needs at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < eps_std) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

/// Fills every trajectory's advantage from the group's rewards.
inline void assign_advantages(RolloutGroup& group, double eps_std) {
  std::vector<double> rewards;
  rewards.reserve(group.trajectories.size());
  for (const auto& t : group.trajectories) rewards.push_back(t.reward);
  const auto adv = group_advantages(rewards, eps_std);
  for (std::size_t i = 0; i < adv.size(); ++i) group.trajectories[i].advantage = adv[i];
}

inline std::vector<double> importance_ratios(const PolicyParams& params, const Trajectory& traj) {
  if (traj.old_logprobs_t1.size() != traj.tokens.size()) {
    throw InvalidArgument("trajectory lacks temperature-1 old log-probabilities");
  }
  std::vector<double> ratios;
  ratios.reserve(traj.tokens.size());
  ContextKey ctx{traj.prompt_id, {}};
  for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
    const auto z = params.logits(ctx);
    const double r = std::exp(log_softmax(z, 1.0)[traj.tokens[t]] - traj.old_logprobs_t1[t]);
    if (!std::isfinite(r) || !(r > 0.0)) throw CorruptState("non-finite importance ratio");
    ratios.push_back(r);
    ctx.prefix.push_back(traj.tokens[t]);
  }
  return ratios;
}

struct ClippedValue {
  double value = 0.0;
  bool clipped = false;  // the min selected the clamped branch
};

/// min(r A, clamp(r, 1 - eps_low, 1 + eps_high) A); ties go to the unclipped branch.
inline ClippedValue clipped_surrogate(double ratio, double advantage, const ObjectiveConfig& cfg) {
  const double unclipped = ratio * advantage;
  const double clamped = std::clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * advantage;
  if (clamped < unclipped) return {clamped, true};
  return {unclipped, false};
}

inline double clipped_term(double ratio, double advantage, const ObjectiveConfig& cfg) {
  return clipped_surrogate(ratio, advantage, cfg).value;
}

/// KL(pi_new || pi_ref) at one context. Exact mode sums over the vocabulary;
/// k3 mode evaluates rho - 1 - ln rho with rho = p_ref(token) / p_new(token).
inline double kl_penalty(const PolicyParams& new_params, const PolicyParams& ref_params, const ContextKey& ctx,
                         KlMode mode, std::optional<Token> token = std::nullopt) {
  const auto p = action_distribution(new_params, ctx, 1.0);
  const auto q = action_distribution(ref_params, ctx, 1.0);
  if (mode == KlMode::exact) {
    double kl = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) {
      if (p[a] == 0.0) continue;
      if (q[a] <= 0.0) throw InvalidArgument("kl_penalty: zero reference probability");
      kl += p[a] * std::log(p[a] / q[a]);
    }
    return std::max(kl, 0.0);
  }
  if (!token) throw InvalidArgument("kl_penalty: k3 estimator needs the sampled token");
  const double rho = q[*token] / p[*token];
  return std::max(rho - 1.0 - std::log(rho), 0.0);
}

struct ObjectiveResult {
  double objective = 0.0;
  PolicyGradient gradient;
  std::size_t clipped_tokens = 0;
  std::size_t total_tokens = 0;
  double mean_kl = 0.0;

  double clip_fraction() const {
    return total_tokens == 0 ? 0.0 : static_cast<double>(clipped_tokens) / static_cast<double>(total_tokens);
  }
};

/// Surrogate value and its exact gradient with respect to `params`.
/// `ref` is required when cfg.beta > 0.
inline ObjectiveResult objective_and_gradient(const PolicyParams& params, std::span<const Trajectory> batch,
                                              const ObjectiveConfig& cfg, const PolicyParams* ref = nullptr) {
  if (batch.empty()) throw InvalidArgument("objective_and_gradient: empty batch");
  if (cfg.beta > 0.0 && ref == nullptr) throw InvalidArgument("objective_and_gradient: beta > 0 needs a reference policy");
  const PolicyParams& kl_ref = ref ? *ref : params;
  ObjectiveResult res;
  res.gradient = params.zero_gradient();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const int V = params.vocab_size();
  std::vector<double> dlogits(V);
  double kl_sum = 0.0;
  for (const Trajectory& traj : batch) {
    if (traj.tokens.empty()) throw InvalidArgument("objective_and_gradient: empty trajectory");
    if (traj.old_logprobs_t1.size() != traj.tokens.size()) {
      throw InvalidArgument("trajectory lacks temperature-1 old log-probabilities");
    }
    const double w = inv_n / static_cast<double>(traj.tokens.size());
    ContextKey ctx{traj.prompt_id, {}};
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
      const Token tok = traj.tokens[t];
      const auto z = params.logits(ctx);
      const auto logp = log_softmax(z, 1.0);
      const double ratio = std::exp(logp[tok] - traj.old_logprobs_t1[t]);
      if (!std::isfinite(ratio) || !(ratio > 0.0)) throw CorruptState("non-finite importance ratio");
      const auto cv = clipped_surrogate(ratio, traj.advantage, cfg);
      res.clipped_tokens += cv.clipped;
      ++res.total_tokens;
      double term = cv.value;
      std::fill(dlogits.begin(), dlogits.end(), 0.0);
      if (!cv.clipped && traj.advantage != 0.0) {
        // d(r A)/dz = r A (onehot - p)
        const double ra = ratio * traj.advantage;
        for (int a = 0; a < V; ++a) dlogits[a] = -ra * std::exp(logp[a]);
        dlogits[tok] += ra;
      }
      if (cfg.beta > 0.0) {
        const auto q = action_distribution(kl_ref, ctx, 1.0);
        double kl = 0.0;
        if (cfg.kl_mode == KlMode::exact) {
          for (int a = 0; a < V; ++a) {
            if (q[a] <= 0.0) throw InvalidArgument("kl_penalty: zero reference probability");
            kl += std::exp(logp[a]) * (logp[a] - std::log(q[a]));
          }
          for (int a = 0; a < V; ++a) {
            const double pa = std::exp(logp[a]);
            dlogits[a] -= cfg.beta * pa * (logp[a] - std::log(q[a]) - kl);
          }
        } else {
          const double rho = q[tok] / std::exp(logp[tok]);
          kl = rho - 1.0 - std::log(rho);
          for (int a = 0; a < V; ++a) dlogits[a] -= cfg.beta * (1.0 - rho) * -std::exp(logp[a]);
          dlogits[tok] -= cfg.beta * (1.0 - rho);
        }
        term -= cfg.beta * kl;
        kl_sum += kl;
      }
      res.objective += w * term;
      params.accumulate(res.gradient, ctx, dlogits, w);
      ctx.prefix.push_back(tok);
    }
  }
  if (!std::isfinite(res.objective)) throw CorruptState("non-finite objective");
  res.mean_kl = res.total_tokens ? kl_sum / static_cast<double>(res.total_tokens) : 0.0;
  return res;
}

}  // namespace uecrl
