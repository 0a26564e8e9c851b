// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Tolerances, seed sets and time budgets are fixed below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "uecrl/uecrl.hpp"

using namespace uecrl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;  // wall-clock limit; exceeding it fails the criterion
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path configs_dir() {
  if (const char* p = std::getenv("UECRL_CONFIGS")) return p;
  return UECRL_SOURCE_CONFIGS;
}

TrainConfig config_file(const std::string& name, const Json& overrides = Json::object()) {
  return load_config((configs_dir() / name).string(), false, overrides);
}

TrainConfig with_seed(TrainConfig c, std::uint64_t seed) {
  c.seed = seed;
  c.curriculum_seed = seed;
  return c;
}

std::string metrics_text(const std::vector<MetricsRecord>& recs) {
  std::string s;
  for (const auto& r : recs) s += format_metrics(r) + "\n";
  return s;
}

std::string policy_bytes(const TrainState& st) {
  std::ostringstream out;
  save_policy(out, st.params, st.global_step);
  return out.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double eval_field(const MetricsRecord& r, const std::string& key) {
  for (const auto& [k, v] : r.eval) {
    if (k == key) return v;
  }
  throw InternalError("final record lacks " + key);
}

double last_mean_entropy(const std::vector<MetricsRecord>& recs, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = recs.size() - n; i < recs.size(); ++i) s += recs[i].token_entropy_mean;
  return s / static_cast<double>(n);
}

const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};

// Final metrics of the shipped grpo and uec setups, trained once per seed and
// shared by the comparison criteria.
struct Runs {
  std::map<std::uint64_t, std::vector<MetricsRecord>> grpo, uec;
};

const std::vector<MetricsRecord>& run_cached(std::map<std::uint64_t, std::vector<MetricsRecord>>& cache,
                                             const std::string& file, std::uint64_t seed) {
  auto it = cache.find(seed);
  if (it == cache.end()) it = cache.emplace(seed, train(with_seed(config_file(file), seed)).state.metrics).first;
  return it->second;
}

Outcome c1_group_advantages() {
  const std::vector<double> r = {1, 0, 0, 0, 0};
  const auto a = group_advantages(r);
  const double want[] = {2.0, -0.5, -0.5, -0.5, -0.5};
  double worst = 0.0;
  for (int i = 0; i < 5; ++i) worst = std::max(worst, std::abs(a[i] - want[i]));
  Rng rng(derive_seed(2024, {1}));
  double worst_mean = 0.0, worst_std = 0.0;
  for (int g = 0; g < 1000; ++g) {
    std::vector<double> rewards(2 + uniform_index(rng, 30));
    for (double& x : rewards) x = 3.0 * standard_normal(rng) + 1.0;
    const auto adv = group_advantages(rewards);
    double m = 0.0, v = 0.0;
    for (double x : adv) m += x;
    m /= static_cast<double>(adv.size());
    for (double x : adv) v += (x - m) * (x - m);
    worst_mean = std::max(worst_mean, std::abs(m));
    worst_std = std::max(worst_std, std::abs(std::sqrt(v / static_cast<double>(adv.size())) - 1.0));
  }
  return {worst <= 1e-9 && worst_mean <= 1e-9 && worst_std <= 1e-9,
          fmt("example err %.2e, max |mean| %.2e, max |std-1| %.2e", worst, worst_mean, worst_std)};
}

Outcome c2_gradient() {
  int checked = 0, ok = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; checked < 100; ++seed) {
    const auto g = testing::make_grad_instance(seed, seed % 3 == 0);
    if (!testing::away_from_kinks(g)) continue;
    const auto rep = testing::check_gradient(g, 1e-5, 1e-4);
    worst = std::max(worst, rep.max_rel_error);
    ok += rep.ok;
    ++checked;
  }
  return {ok == checked, fmt("%d/%d instances, max rel error %.2e", ok, checked, worst)};
}

Outcome c3_covariance_identity() {
  int residual_ok = 0, ratio_ok = 0, sign_ok = 0;
  double worst_residual = 0.0, lo = INFINITY, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto small = theory::verify_theorem1(theory::theorem1_instance(seed, 1e-3));
    const auto large = theory::verify_theorem1(theory::theorem1_instance(seed, 1e-2));
    worst_residual = std::max(worst_residual, small.abs_error);
    residual_ok += small.abs_error <= 1e-4;
    const double ratio = large.abs_error / small.abs_error;
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
    ratio_ok += ratio >= 30.0 && ratio <= 300.0;
    const auto lp = theory::make_low_prob_high_advantage(seed, 2 + seed % 9, 1e-2);
    sign_ok += theory::entropy_cov(lp) < 0.0 && theory::verify_theorem1(lp).actual_delta > 0.0;
  }
  return {residual_ok == 100 && ratio_ok == 100 && sign_ok == 100,
          fmt("residual<=1e-4 %d/100 (max %.2e), ratio in [30,300] %d/100 (%.1f..%.1f), sign %d/100", residual_ok,
              worst_residual, ratio_ok, lo, hi, sign_ok)};
}

Outcome c4_replay_stabilization() {
  int ok = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto tr = theory::verify_theorem2(theory::theorem2_instance(seed), 1000);
    const double h = tr.max_entropy.back();
    worst = std::max(worst, h);
    const bool tail = tr.decreasing_from && *tr.decreasing_from <= 900;
    ok += h < 0.05 && tail;
  }
  return {ok == 20, fmt("%d/20 seeds, max final entropy %.4f", ok, worst)};
}

Outcome c5_reduction() {
  const Json steps = Json::parse(R"({"train": {"max_steps": 100}})");
  auto grpo = config_file("grpo.json", steps);
  Json reduce = steps;
  reduce["uec"] = {{"G_prime", 5}, {"t_prime", 1.0}, {"f_replay", 0}};
  auto uec = config_file("uec.json", reduce);
  const auto a = train(grpo), b = train(uec);
  const bool same = metrics_text(a.state.metrics) == metrics_text(b.state.metrics) &&
                    policy_bytes(a.state) == policy_bytes(b.state);
  return {same, same ? "metrics and final policy bit-identical over 100 steps" : "runs differ"};
}

Outcome c6_grpo_collapse(Runs& runs) {
  int ok = 0;
  std::string per;
  for (auto seed : kSeeds) {
    const auto& m = run_cached(runs.grpo, "grpo.json", seed);
    const double h = last_mean_entropy(m, 10), p = eval_field(m.back(), "pass@1_hard");
    ok += h < 0.1 && p < 0.2;
    per += fmt(" [s%llu H %.3f p1 %.3f]", static_cast<unsigned long long>(seed), h, p);
  }
  return {2 * ok > static_cast<int>(kSeeds.size()), fmt("%d/5 seeds collapsed:", ok) + per};
}

Outcome c7_uec_vs_grpo(Runs& runs) {
  int ok = 0;
  std::string per;
  for (auto seed : kSeeds) {
    const auto& g = run_cached(runs.grpo, "grpo.json", seed);
    const auto& u = run_cached(runs.uec, "uec.json", seed);
    const double pg = eval_field(g.back(), "pass@1_hard"), pu = eval_field(u.back(), "pass@1_hard");
    const double h = tail_entropy(u);
    ok += pu >= pg + 0.10 && h >= 0.1 && h <= 1.5;
    per += fmt(" [s%llu %.3f vs %.3f, H %.3f]", static_cast<unsigned long long>(seed), pu, pg, h);
  }
  return {ok >= 4, fmt("%d/5 paired seeds:", ok) + per};
}

Outcome c8_sweep() {
  const auto res = run_sweep(config_file("uec.json"), {1.0, 1.1, 1.2}, {128, 256, 512}, kSeeds);
  const auto tr = res.trend();
  std::string cells;
  for (const auto& c : res.cells) cells += fmt(" [t%.1f s%zu H %.3f]", c.t_prime, c.s_prime, c.entropy);
  return {tr.total == 10 && tr.satisfied >= 8, fmt("trend %d/%d:", tr.satisfied, tr.total) + cells};
}

Outcome c9_pass_at_k(Runs& runs) {
  std::string per;
  bool all = true;
  for (int k : {1, 4, 16}) {
    int wins = 0;
    const std::string key = "pass@" + std::to_string(k) + "_hard";
    for (auto seed : kSeeds) {
      wins += eval_field(run_cached(runs.uec, "uec.json", seed).back(), key) >=
              eval_field(run_cached(runs.grpo, "grpo.json", seed).back(), key);
    }
    all = all && 2 * wins > static_cast<int>(kSeeds.size());
    per += fmt(" k=%d %d/5", k, wins);
  }
  return {all, "UEC >= GRPO on" + per};
}

Outcome c10_buffer() {
  Rng rng(derive_seed(77, {10}));
  int ops = 0;
  bool match = true, above = true;
  for (std::size_t cap : {1, 7, 64, 512}) {
    ReplayBuffer buf(cap);
    testing::QueueModel model{cap, {}};
    std::uint64_t id = 0;
    for (int i = 0; i < 2500; ++i, ++ops) {
      std::vector<Trajectory> cands(uniform_index(rng, 6));
      for (auto& t : cands) {
        t.prompt_id = id++;
        t.tokens = {0};
        t.advantage = 1.5 * standard_normal(rng) + 0.5;
        if (t.advantage > 1.0) model.push(t.prompt_id);
      }
      buffer_push(buf, cands, 1.0);
      match = match && buf.size() == model.ids.size();
      for (std::size_t j = 0; match && j < buf.size(); ++j) {
        match = buf.entries()[j].trajectory.prompt_id == model.ids[j];
        above = above && buf.entries()[j].trajectory.advantage > 1.0;
      }
    }
  }
  return {match && above, fmt("%d operations, FIFO match %s, all stored A > 1 %s", ops, match ? "yes" : "no",
                              above ? "yes" : "no")};
}

Outcome c11_determinism() {
  const auto tmp = fs::temp_directory_path() / "uecrl_acceptance_determinism";
  fs::remove_all(tmp);
  auto cfg = config_file("uec.json", Json::parse(R"({"train": {"max_steps": 60, "checkpoint_every": 20}})"));
  std::string text[2];
  for (int r = 0; r < 2; ++r) {
    const auto dir = tmp / std::to_string(r);
    std::ostringstream m;
    TrainOptions opts;
    opts.checkpoint_dir = dir / "checkpoints";
    opts.on_record = [&](const MetricsRecord& rec) { emit_metrics(m, rec); };
    train(cfg, opts);
    text[r] = m.str();
  }
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::directory_iterator(tmp / "0" / "checkpoints")) {
    ++files;
    same += slurp(e.path()) == slurp(tmp / "1" / "checkpoints" / e.path().filename());
  }
  fs::remove_all(tmp);
  const bool ok = text[0] == text[1] && !text[0].empty() && files > 0 && same == files;
  return {ok, fmt("metrics %s, checkpoint files identical %zu/%zu", text[0] == text[1] ? "identical" : "differ", same,
                  files)};
}

}  // namespace

int main() {
  Runs runs;
  const std::vector<Criterion> criteria = {
      {1, "group advantages", 1.0, c1_group_advantages},
      {2, "objective gradient vs finite differences", 10.0, c2_gradient},
      {3, "entropy change covariance identity", 5.0, c3_covariance_identity},
      {4, "entropy stabilization under replay", 5.0, c4_replay_stabilization},
      {5, "uec with G'=G, t'=1, no replay equals grpo", 30.0, c5_reduction},
      {6, "grpo entropy collapse on mixed curriculum", 300.0, [&] { return c6_grpo_collapse(runs); }},
      {7, "uec hard pass@1 and entropy band vs grpo", 600.0, [&] { return c7_uec_vs_grpo(runs); }},
      {8, "t' x s' sweep trend", 1800.0, c8_sweep},
      {9, "hard pass@k, uec vs grpo", 600.0, [&] { return c9_pass_at_k(runs); }},
      {10, "replay buffer vs reference queue", 1.0, c10_buffer},
      {11, "byte-identical reruns", 600.0, c11_determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("%s %2d %s (%.2fs / %.0fs%s): %s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs, c.budget_s,
                in_time ? "" : ", over budget", o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
