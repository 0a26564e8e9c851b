#pragma once

// Per-step metrics records. One JSON object per line, fields in the order of
// MetricsRecord below, reals at 9 significant digits. Evaluation fields
// ("pass@<k>_<class>") follow on evaluation steps only.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "uecrl/error.hpp"
#include "uecrl/format.hpp"

namespace uecrl {

struct MetricsRecord {
  std::int64_t step = 0;
  double reward_mean = 0.0;           // regular rollouts
  double token_entropy_mean = 0.0;    // nats, temperature 1, regular rollout positions
  double entropy_seq_mean = 0.0;      // per-trajectory sum of token entropies
  double response_length_mean = 0.0;
  double clip_fraction = 0.0;         // main update
  double difficult_fraction = 0.0;
  std::int64_t buffer_size = 0;
  std::int64_t explored_prompts = 0;
  double cov_diagnostic = 0.0;        // Cov[log pi_old(o_t), A] over update tokens
  std::int64_t effective_size = 0;    // |O_eff|
  std::int64_t replay_size = 0;       // trajectories in this step's replay update
  double replay_clip_fraction = 0.0;
  std::vector<std::pair<std::string, double>> eval;  // ordered, evaluation steps only

  void validate() const {
    if (!(clip_fraction >= 0.0 && clip_fraction <= 1.0)) throw InternalError("clip_fraction outside [0, 1]");
    if (!(difficult_fraction >= 0.0 && difficult_fraction <= 1.0)) {
      throw InternalError("difficult_fraction outside [0, 1]");
    }
  }
};

/// Field names of the fixed part, in emission order.
inline const std::vector<std::string>& metrics_fields() {
  static const std::vector<std::string> f = {
      "step",          "reward_mean",      "token_entropy_mean", "entropy_seq_mean",  "response_length_mean",
      "clip_fraction", "difficult_fraction", "buffer_size",      "explored_prompts",  "cov_diagnostic",
      "effective_size", "replay_size",     "replay_clip_fraction"};
  return f;
}

inline std::string format_metrics(const MetricsRecord& r) {
  r.validate();
  std::string s = "{\"step\":" + std::to_string(r.step);
  auto real = [&](const char* k, double v) { s += std::string(",\"") + k + "\":" + fmt_real(v); };
  auto integer = [&](const char* k, std::int64_t v) { s += std::string(",\"") + k + "\":" + std::to_string(v); };
  real("reward_mean", r.reward_mean);
  real("token_entropy_mean", r.token_entropy_mean);
  real("entropy_seq_mean", r.entropy_seq_mean);
  real("response_length_mean", r.response_length_mean);
  real("clip_fraction", r.clip_fraction);
  real("difficult_fraction", r.difficult_fraction);
  integer("buffer_size", r.buffer_size);
  integer("explored_prompts", r.explored_prompts);
  real("cov_diagnostic", r.cov_diagnostic);
  integer("effective_size", r.effective_size);
  integer("replay_size", r.replay_size);
  real("replay_clip_fraction", r.replay_clip_fraction);
  for (const auto& [k, v] : r.eval) real(k.c_str(), v);
  return s + "}";
}

/// Appends one line; a failed write is reported as CorruptState.
inline void emit_metrics(std::ostream& out, const MetricsRecord& r) {
  out << format_metrics(r) << '\n';
  out.flush();
  if (!out) throw CorruptState("metrics write failed at step " + std::to_string(r.step));
}

inline MetricsRecord parse_metrics(const std::string& line) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed metrics line: ") + e.what());
  }
  MetricsRecord r;
  try {
    r.step = j.at("step").get<std::int64_t>();
    r.reward_mean = j.at("reward_mean").get<double>();
    r.token_entropy_mean = j.at("token_entropy_mean").get<double>();
    r.entropy_seq_mean = j.at("entropy_seq_mean").get<double>();
    r.response_length_mean = j.at("response_length_mean").get<double>();
    r.clip_fraction = j.at("clip_fraction").get<double>();
    r.difficult_fraction = j.at("difficult_fraction").get<double>();
    r.buffer_size = j.at("buffer_size").get<std::int64_t>();
    r.explored_prompts = j.at("explored_prompts").get<std::int64_t>();
    r.cov_diagnostic = j.at("cov_diagnostic").get<double>();
    r.effective_size = j.at("effective_size").get<std::int64_t>();
    r.replay_size = j.at("replay_size").get<std::int64_t>();
    r.replay_clip_fraction = j.at("replay_clip_fraction").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("metrics line missing field: ") + e.what());
  }
  const auto& fixed = metrics_fields();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(fixed.begin(), fixed.end(), it.key()) == fixed.end()) {
      r.eval.emplace_back(it.key(), it.value().get<double>());
    }
  }
  return r;
}

inline std::vector<MetricsRecord> read_metrics(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_metrics(line));
    if (out.size() > 1 && out.back().step <= out[out.size() - 2].step) {
      throw InvalidArgument("metrics steps must strictly increase");
    }
  }
  return out;
}

/// panel name -> (step, value) rows. Every fixed field except `step` is a
/// panel; evaluation fields become panels with one row per evaluation step.
inline std::map<std::string, std::vector<std::pair<std::int64_t, double>>> plot_series(
    const std::vector<MetricsRecord>& records) {
  std::map<std::string, std::vector<std::pair<std::int64_t, double>>> s;
  for (const auto& r : records) {
    auto add = [&](const std::string& k, double v) { s[k].emplace_back(r.step, v); };
    add("reward_mean", r.reward_mean);
    add("token_entropy_mean", r.token_entropy_mean);
    add("entropy_seq_mean", r.entropy_seq_mean);
    add("response_length_mean", r.response_length_mean);
    add("clip_fraction", r.clip_fraction);
    add("difficult_fraction", r.difficult_fraction);
    add("buffer_size", static_cast<double>(r.buffer_size));
    add("explored_prompts", static_cast<double>(r.explored_prompts));
    add("cov_diagnostic", r.cov_diagnostic);
    add("effective_size", static_cast<double>(r.effective_size));
    add("replay_size", static_cast<double>(r.replay_size));
    add("replay_clip_fraction", r.replay_clip_fraction);
    for (const auto& [k, v] : r.eval) add(k, v);
  }
  return s;
}

/// Writes <dir>/<panel>.dat, two space-separated columns. Returns the paths.
inline std::vector<std::filesystem::path> export_plots(const std::vector<MetricsRecord>& records,
                                                       const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& [panel, rows] : plot_series(records)) {
    std::string name = panel;
    for (char& c : name) {
      if (c == '@') c = '_';
    }
    const auto path = dir / (name + ".dat");
    std::ofstream out(path);
    for (const auto& [step, v] : rows) out << step << ' ' << fmt_real(v) << '\n';
    if (!out) throw CorruptState("cannot write " + path.string());
    written.push_back(path);
  }
  return written;
}

/// Unbiased pass@k from n samples with c successes: 1 - C(n-c, k) / C(n, k).
inline double pass_at_k(int n, int c, int k) {
  if (n < 1 || c < 0 || c > n) throw InvalidArgument("pass_at_k: need 0 <= c <= n, n >= 1");
  if (k < 1 || k > n) throw InvalidArgument("pass_at_k: k must be in [1, n]");
  if (n - c < k) return 1.0;
  double miss = 1.0;
  for (int i = 0; i < k; ++i) miss *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
  return 1.0 - miss;
}

inline constexpr const char* kCodeVersion = "uecrl 0.1.0";

struct ExperimentManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string code_version = kCodeVersion;
  std::string start_time;  // UTC, ISO 8601
  std::string task_suite_digest;
};

inline void write_manifest(const std::filesystem::path& path, const ExperimentManifest& m) {
  nlohmann::ordered_json j;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["code_version"] = m.code_version;
  j["start_time"] = m.start_time;
  j["task_suite_digest"] = m.task_suite_digest;
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw CorruptState("cannot write " + path.string());
}

}  // namespace uecrl
