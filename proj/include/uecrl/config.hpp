#pragma once

// Training configuration. A config document is a JSON object whose sections
// mirror TrainConfig; every key must already exist in the defaults tree, so a
// misspelled key is an error rather than a silently ignored setting.
//
// Environment overrides: UECRL_<SECTION>_<KEY> (upper case) replaces a
// section key, UECRL_<KEY> a top-level one, e.g. UECRL_UEC_T_PRIME=1.1 or
// UECRL_ALGORITHM=grpo. Values are parsed as JSON, falling back to a string.

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uecrl/error.hpp"
#include "uecrl/format.hpp"
#include "uecrl/objective.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/tasks.hpp"
#include "uecrl/uec.hpp"

namespace uecrl {

using Json = nlohmann::ordered_json;

enum class Algorithm { grpo, dapo, uec };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::grpo: return "grpo";
    case Algorithm::dapo: return "dapo";
    case Algorithm::uec: return "uec";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "grpo") return Algorithm::grpo;
  if (s == "dapo") return Algorithm::dapo;
  if (s == "uec") return Algorithm::uec;
  throw InvalidArgument("unknown algorithm '" + s + "' (expected grpo, dapo or uec)");
}

inline constexpr double kDapoEpsHigh = 0.3;
inline constexpr double kTabularLearningRate = 0.1;
inline constexpr double kLinearLearningRate = 0.01;

/// Initial logits. With `reference`, each task's rows along a reference
/// response get `confidence` on the reference token (zeros elsewhere); hard
/// tasks use a near miss of their accepting sequence, which models a
/// pretrained policy that confidently answers hard prompts wrongly.
struct InitConfig {
  std::string prior = "none";  // none | reference
  double easy_confidence = 0.0;
  double hard_confidence = 0.0;
};

struct EvalConfig {
  std::vector<int> k = {1, 4, 16};
  int samples_per_task = 32;
  double temperature = 0.2;
  double top_p = 0.95;
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::uec;
  std::uint64_t seed = 0;
  double learning_rate = kTabularLearningRate;
  int batch_size = 8;
  std::int64_t max_steps = 300;
  std::int64_t eval_every = 100;
  std::int64_t checkpoint_every = 100;
  ObjectiveConfig objective;
  UecConfig uec;
  PolicyKind policy_kind = PolicyKind::tabular;
  std::string featurizer = "hash2x256";
  std::uint64_t curriculum_seed = 0;
  CurriculumSpec curriculum;
  InitConfig init;
  EvalConfig eval;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning_rate must be positive");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (max_steps < 0) throw InvalidArgument("max_steps must be >= 0");
    if (eval_every < 1) throw InvalidArgument("eval_every must be >= 1");
    if (checkpoint_every < 1) throw InvalidArgument("checkpoint_every must be >= 1");
    objective.validate();
    uec.validate();
    if (algorithm == Algorithm::grpo && objective.eps_high != objective.eps_low) {
      throw InvalidArgument("grpo requires eps_high == eps_low");
    }
    if (init.prior != "none" && init.prior != "reference") throw InvalidArgument("init.prior must be none or reference");
    if (init.easy_confidence < 0.0 || init.hard_confidence < 0.0) throw InvalidArgument("init confidences must be >= 0");
    if (eval.k.empty()) throw InvalidArgument("eval.k must not be empty");
    for (int k : eval.k) {
      if (k < 1 || k > eval.samples_per_task) throw InvalidArgument("eval.k entries must be in [1, samples_per_task]");
    }
    if (!(eval.temperature > 0.0)) throw InvalidArgument("eval.temperature must be positive");
    if (!(eval.top_p > 0.0 && eval.top_p <= 1.0)) throw InvalidArgument("eval.top_p must be in (0, 1]");
  }
};

namespace detail {

inline void merge_checked(Json& base, const Json& patch, const std::string& path) {
  if (!patch.is_object()) throw InvalidArgument("config section '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw InvalidArgument("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else {
      if (it.value().is_object()) throw InvalidArgument("config key '" + key + "' must not be a section");
      slot = it.value();
    }
  }
}

inline std::string env_name(const std::string& section, const std::string& key) {
  std::string name = "UECRL_";
  for (char c : section.empty() ? key : section + "_" + key) {
    name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return name;
}

inline Json parse_env_value(const std::string& raw) {
  try {
    return Json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    return raw;
  }
}

template <class T>
T get(const Json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config key '") + section + "." + key + "': " + e.what());
  }
}

}  // namespace detail

/// Environment variable name for a config key ("" section = top level).
inline std::string env_override_name(const std::string& section, const std::string& key) {
  return detail::env_name(section, key);
}

/// Applies UECRL_* overrides for every key in the defaults tree.
inline void apply_env_overrides(Json& doc, const char* (*lookup)(const char*) = nullptr) {
  auto read = [&](const std::string& name) -> const char* {
    return lookup ? lookup(name.c_str()) : std::getenv(name.c_str());
  };
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.value().is_object()) {
      for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) {
        if (const char* v = read(detail::env_name(it.key(), kv.key()))) kv.value() = detail::parse_env_value(v);
      }
    } else if (const char* v = read(detail::env_name("", it.key()))) {
      it.value() = detail::parse_env_value(v);
    }
  }
}

/// Converts a fully merged document. Algorithm presets are applied here:
/// grpo pins eps_high to eps_low and switches off exploration and replay,
/// dapo pins eps_high to 0.3 with the controller likewise off.
inline TrainConfig config_from_json(const Json& j) {
  using detail::get;
  TrainConfig c;
  try {
    c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  c.batch_size = get<int>(j, "train", "batch_size");
  c.max_steps = get<std::int64_t>(j, "train", "max_steps");
  c.eval_every = get<std::int64_t>(j, "train", "eval_every");
  c.checkpoint_every = get<std::int64_t>(j, "train", "checkpoint_every");
  c.objective.eps_low = get<double>(j, "objective", "eps_low");
  c.objective.eps_high = get<double>(j, "objective", "eps_high");
  c.objective.beta = get<double>(j, "objective", "beta");
  c.objective.eps_std = get<double>(j, "objective", "eps_std");
  const auto kl = get<std::string>(j, "objective", "kl_mode");
  if (kl == "exact") c.objective.kl_mode = KlMode::exact;
  else if (kl == "k3") c.objective.kl_mode = KlMode::k3_estimator;
  else throw InvalidArgument("objective.kl_mode must be exact or k3");
  c.uec.G = get<int>(j, "uec", "G");
  c.uec.G_prime = get<int>(j, "uec", "G_prime");
  c.uec.t_prime = get<double>(j, "uec", "t_prime");
  c.uec.s_prime = get<std::size_t>(j, "uec", "s_prime");
  c.uec.f_replay = get<int>(j, "uec", "f_replay");
  c.uec.A0 = get<double>(j, "uec", "A0");
  c.uec.replay_batch = get<int>(j, "uec", "replay_batch");
  const auto kind = get<std::string>(j, "policy", "kind");
  if (kind == "tabular") c.policy_kind = PolicyKind::tabular;
  else if (kind == "linear") c.policy_kind = PolicyKind::linear;
  else throw InvalidArgument("policy.kind must be tabular or linear");
  c.featurizer = get<std::string>(j, "policy", "featurizer");
  if (j.at("train").at("learning_rate").is_null()) {
    c.learning_rate = c.policy_kind == PolicyKind::tabular ? kTabularLearningRate : kLinearLearningRate;
  } else {
    c.learning_rate = get<double>(j, "train", "learning_rate");
  }
  c.curriculum_seed = get<std::uint64_t>(j, "curriculum", "seed");
  c.curriculum.size = get<int>(j, "curriculum", "size");
  c.curriculum.hard_fraction = get<double>(j, "curriculum", "hard_fraction");
  c.curriculum.hard_vocab = get<int>(j, "curriculum", "hard_vocab");
  c.curriculum.hard_code_len = get<int>(j, "curriculum", "hard_code_len");
  c.curriculum.easy_family = parse_family(get<std::string>(j, "curriculum", "easy_family"));
  c.curriculum.easy_vocab = get<int>(j, "curriculum", "easy_vocab");
  c.curriculum.easy_len = get<int>(j, "curriculum", "easy_len");
  c.curriculum.easy_accepting = get<int>(j, "curriculum", "easy_accepting");
  c.curriculum.modulus = get<int>(j, "curriculum", "modulus");
  c.curriculum.n_ops = get<int>(j, "curriculum", "n_ops");
  c.curriculum.heldout_hard = get<int>(j, "curriculum", "heldout_hard");
  c.init.prior = get<std::string>(j, "init", "prior");
  c.init.easy_confidence = get<double>(j, "init", "easy_confidence");
  c.init.hard_confidence = get<double>(j, "init", "hard_confidence");
  c.eval.k = get<std::vector<int>>(j, "eval", "k");
  c.eval.samples_per_task = get<int>(j, "eval", "samples_per_task");
  c.eval.temperature = get<double>(j, "eval", "temperature");
  c.eval.top_p = get<double>(j, "eval", "top_p");

  if (c.algorithm != Algorithm::uec) {
    c.objective.eps_high = c.algorithm == Algorithm::dapo ? kDapoEpsHigh : c.objective.eps_low;
    c.uec.G_prime = c.uec.G;
    c.uec.t_prime = 1.0;
    c.uec.f_replay = 0;
  }
  c.validate();
  return c;
}

/// Inverse of config_from_json for the resolved values.
inline Json config_to_json(const TrainConfig& c) {
  Json j;
  j["algorithm"] = to_string(c.algorithm);
  j["seed"] = c.seed;
  j["train"] = {{"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"max_steps", c.max_steps},
                {"eval_every", c.eval_every},
                {"checkpoint_every", c.checkpoint_every}};
  j["objective"] = {{"eps_low", c.objective.eps_low},
                    {"eps_high", c.objective.eps_high},
                    {"beta", c.objective.beta},
                    {"eps_std", c.objective.eps_std},
                    {"kl_mode", c.objective.kl_mode == KlMode::exact ? "exact" : "k3"}};
  j["uec"] = {{"G", c.uec.G},
              {"G_prime", c.uec.G_prime},
              {"t_prime", c.uec.t_prime},
              {"s_prime", c.uec.s_prime},
              {"f_replay", c.uec.f_replay},
              {"A0", c.uec.A0},
              {"replay_batch", c.uec.replay_batch}};
  j["policy"] = {{"kind", to_string(c.policy_kind)}, {"featurizer", c.featurizer}};
  j["curriculum"] = {{"seed", c.curriculum_seed},
                     {"size", c.curriculum.size},
                     {"hard_fraction", c.curriculum.hard_fraction},
                     {"hard_vocab", c.curriculum.hard_vocab},
                     {"hard_code_len", c.curriculum.hard_code_len},
                     {"easy_family", to_string(c.curriculum.easy_family)},
                     {"easy_vocab", c.curriculum.easy_vocab},
                     {"easy_len", c.curriculum.easy_len},
                     {"easy_accepting", c.curriculum.easy_accepting},
                     {"modulus", c.curriculum.modulus},
                     {"n_ops", c.curriculum.n_ops},
                     {"heldout_hard", c.curriculum.heldout_hard}};
  j["init"] = {{"prior", c.init.prior},
               {"easy_confidence", c.init.easy_confidence},
               {"hard_confidence", c.init.hard_confidence}};
  j["eval"] = {{"k", c.eval.k},
               {"samples_per_task", c.eval.samples_per_task},
               {"temperature", c.eval.temperature},
               {"top_p", c.eval.top_p}};
  return j;
}

/// The full defaults tree; also the schema for unknown-key checks.
/// learning_rate defaults to null, meaning the policy kind's default.
inline Json default_config_json() {
  Json j = config_to_json(TrainConfig{});
  j["train"]["learning_rate"] = nullptr;
  return j;
}

/// Hash of the resolved configuration (after presets and overrides).
inline std::string config_hash(const TrainConfig& c) { return hex64(fnv1a(config_to_json(c).dump())); }

/// defaults <- document <- environment <- overrides (command-line flags).
inline Json merge_config(const Json& document, bool use_env = true, const Json& overrides = Json::object()) {
  Json merged = default_config_json();
  detail::merge_checked(merged, document, "");
  if (use_env) apply_env_overrides(merged);
  detail::merge_checked(merged, overrides, "");
  return merged;
}

inline TrainConfig resolve_config(const Json& document, bool use_env = true, const Json& overrides = Json::object()) {
  return config_from_json(merge_config(document, use_env, overrides));
}

inline Json read_config_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
  try {
    return Json::parse(in, nullptr, true, true);  // comments allowed
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("malformed config file '" + path + "': " + e.what());
  }
}

inline TrainConfig load_config(const std::string& path, bool use_env = true, const Json& overrides = Json::object()) {
  return resolve_config(read_config_document(path), use_env, overrides);
}

}  // namespace uecrl
