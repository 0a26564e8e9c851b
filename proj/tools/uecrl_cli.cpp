// uecrl: train, eval, verify-theorems, sweep, export-plots.
//
// Exit status: 0 success, 1 a verification verdict failed, 2 usage or
// configuration error, 3 corrupt state (non-finite values, bad files).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uecrl/uecrl.hpp"

namespace fs = std::filesystem;
using namespace uecrl;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string algorithm;
  std::optional<std::int64_t> steps;
  bool quiet = false;
};

Json cli_overrides(const Common& c) {
  Json o = Json::object();
  if (c.seed) o["seed"] = *c.seed;
  if (!c.algorithm.empty()) o["algorithm"] = c.algorithm;
  if (c.steps) o["train"] = {{"max_steps", *c.steps}};
  return o;
}

Json config_document(const Common& c) {
  return c.config.empty() ? Json::object() : read_config_document(c.config);
}

TrainConfig resolve(const Common& c) { return resolve_config(config_document(c), true, cli_overrides(c)); }

// UTC start time; SOURCE_DATE_EPOCH pins it for reproducible manifests.
std::string utc_now() {
  std::time_t t = std::time(nullptr);
  if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::stoll(e));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw CorruptState("cannot write " + path.string());
}

// Keeps the metrics lines with step <= last_step (resume after a crash).
void truncate_metrics(const fs::path& path, std::int64_t last_step) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::int64_t step = 0;
    try {
      step = Json::parse(line).at("step").get<std::int64_t>();
    } catch (const nlohmann::json::exception&) {
      break;  // torn final line
    }
    if (step <= last_step) kept += line + "\n";
  }
  in.close();
  write_text(path, kept);
}

void print_scores(const std::vector<ClassScores>& scores) {
  for (const auto& c : scores) {
    std::cout << c.name << " (" << c.n_tasks << " tasks):";
    for (const auto& [k, v] : c.pass) std::cout << "  pass@" << k << "=" << fmt_real(v, 4);
    std::cout << "\n";
  }
}

int cmd_train(const Common& c) {
  const TrainConfig cfg = resolve(c);
  const fs::path out = c.out.empty() ? fs::path("run") : fs::path(c.out);
  fs::create_directories(out);
  Experiment exp(cfg);
  const fs::path ckdir = c.checkpoint.empty() ? out / "checkpoints" : fs::path(c.checkpoint);
  const fs::path metrics_path = out / "metrics.jsonl";
  if (!c.checkpoint.empty()) {
    load_checkpoint(ckdir, exp);
    truncate_metrics(metrics_path, exp.state.global_step);
    if (!c.quiet) std::cout << "resumed at step " << exp.state.global_step << "\n";
  } else {
    ExperimentManifest m;
    m.config_hash = config_hash(cfg);
    m.seed = cfg.seed;
    m.start_time = utc_now();
    m.task_suite_digest = exp.curriculum.digest();
    write_manifest(out / "experiment.json", m);
    write_text(out / "config.json", config_to_json(cfg).dump(2) + "\n");
    std::ofstream cur(out / "curriculum.jsonl");
    write_curriculum(cur, exp.curriculum);
    std::ofstream(metrics_path, std::ios::trunc).close();
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw CorruptState("cannot open " + metrics_path.string());
  TrainOptions opts;
  opts.checkpoint_dir = ckdir;
  opts.keep_metrics = false;
  opts.on_record = [&](const MetricsRecord& r) {
    emit_metrics(metrics, r);
    if (!c.quiet && !r.eval.empty()) {
      std::cout << "step " << r.step << "  entropy " << fmt_real(r.token_entropy_mean, 4) << "  reward "
                << fmt_real(r.reward_mean, 4);
      for (const auto& [k, v] : r.eval) std::cout << "  " << k << " " << fmt_real(v, 4);
      std::cout << "\n";
    }
  };
  train(exp, opts);
  if (!c.quiet) std::cout << "done: " << exp.state.global_step << " steps, outputs in " << out.string() << "\n";
  return 0;
}

int cmd_eval(const Common& c) {
  const TrainConfig cfg = resolve(c);
  Experiment exp(cfg);
  if (c.checkpoint.empty()) throw InvalidArgument("eval needs --checkpoint (directory or .ckpt file)");
  const fs::path ck(c.checkpoint);
  if (fs::is_directory(ck)) {
    load_checkpoint(ck, exp);
  } else {
    std::ifstream in(ck);
    if (!in) throw InvalidArgument("cannot open checkpoint " + ck.string());
    auto loaded = load_policy(in);
    exp.state.params = std::move(loaded.params);
    exp.state.global_step = loaded.global_step;
  }
  const auto scores = exp.evaluate_all(exp.state.params, exp.state.global_step);
  std::cout << "checkpoint step " << exp.state.global_step << "\n";
  print_scores(scores);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    Json j;
    j["step"] = exp.state.global_step;
    for (const auto& s : scores) {
      for (const auto& [k, v] : s.pass) j[s.name]["pass@" + std::to_string(k)] = v;
    }
    write_text(fs::path(c.out) / "eval.json", j.dump(2) + "\n");
  }
  return 0;
}

int cmd_verify(const Common& c, std::size_t count) {
  const std::uint64_t first = c.seed.value_or(0);
  std::ostringstream rows;
  const auto suites = theory::run_theorem_suite(first, count, &rows);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "theorems.jsonl", rows.str());
  } else if (!c.quiet) {
    std::cout << rows.str();
  }
  bool ok = true;
  std::printf("%-24s %8s  %s\n", "check", "passed", "verdict");
  for (const auto& s : suites) {
    std::printf("%-24s %4zu/%-4zu %s\n", s.name.c_str(), s.passed, s.total, s.ok() ? "pass" : "FAIL");
    ok = ok && s.ok();
  }
  return ok ? 0 : 1;
}

int cmd_sweep(const Common& c, int n_seeds, std::vector<double> t_values, std::vector<std::size_t> s_values) {
  const TrainConfig base = resolve(c);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n_seeds; ++i) seeds.push_back(base.seed + static_cast<std::uint64_t>(i));
  const auto res = run_sweep(base, t_values, s_values, seeds);
  std::printf("%-8s", "t'\\s'");
  for (auto s : s_values) std::printf("  %-22zu", s);
  std::printf("\n");
  for (std::size_t ti = 0; ti < t_values.size(); ++ti) {
    std::printf("%-8.2f", t_values[ti]);
    for (std::size_t si = 0; si < s_values.size(); ++si) {
      const auto& cell = res.at(ti, si);
      std::printf("  acc %.3f  H %.4f   ", cell.hard_pass1, cell.entropy);
    }
    std::printf("\n");
  }
  const auto tr = res.trend();
  std::printf("trend comparisons satisfied: %d/%d\n", tr.satisfied, tr.total);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    Json j = Json::array();
    for (const auto& cell : res.cells) {
      j.push_back({{"t_prime", cell.t_prime},
                   {"s_prime", cell.s_prime},
                   {"hard_pass1", cell.hard_pass1},
                   {"entropy", cell.entropy}});
    }
    write_text(fs::path(c.out) / "sweep.json", j.dump(2) + "\n");
  }
  return 0;
}

int cmd_export(const std::string& metrics_path, const Common& c) {
  std::ifstream in(metrics_path);
  if (!in) throw InvalidArgument("cannot open metrics file " + metrics_path);
  const auto records = read_metrics(in);
  const fs::path out = c.out.empty() ? fs::path("plots") : fs::path(c.out);
  const auto files = export_plots(records, out);
  if (!c.quiet) std::cout << "wrote " << files.size() << " series to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uecrl: GRPO / UEC-RL policy optimization laboratory"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub, bool with_config = true) {
    if (with_config) {
      sub->add_option("--config", c.config, "config file (JSON)");
      sub->add_option("--algorithm", c.algorithm, "grpo | dapo | uec")->check(CLI::IsMember({"grpo", "dapo", "uec"}));
      sub->add_option("--steps", c.steps, "override train.max_steps");
      sub->add_option("--checkpoint", c.checkpoint, "checkpoint directory (resume / evaluate) or policy file");
    }
    sub->add_option("--seed", c.seed, "override seed");
    sub->add_option("--out", c.out, "output directory");
    sub->add_flag("--quiet", c.quiet, "suppress progress output");
  };

  auto* train_cmd = app.add_subcommand("train", "train from a config file");
  add_common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint");
  add_common(eval_cmd);
  auto* verify_cmd = app.add_subcommand("verify-theorems", "run the entropy theorem checks");
  add_common(verify_cmd, false);
  std::size_t count = 100;
  verify_cmd->add_option("--count", count, "instances per check");
  auto* sweep_cmd = app.add_subcommand("sweep", "grid over t' x s'");
  add_common(sweep_cmd);
  int n_seeds = 5;
  std::vector<double> t_values = {1.0, 1.1, 1.2};
  std::vector<std::size_t> s_values = {128, 256, 512};
  sweep_cmd->add_option("--seeds", n_seeds, "seeds per cell, starting at the config seed")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--t-values", t_values, "exploration temperatures");
  sweep_cmd->add_option("--s-values", s_values, "buffer sizes");
  auto* export_cmd = app.add_subcommand("export-plots", "metrics stream -> per-panel series files");
  add_common(export_cmd, false);
  std::string metrics_path;
  export_cmd->add_option("metrics", metrics_path, "metrics.jsonl")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(c);
    if (*eval_cmd) return cmd_eval(c);
    if (*verify_cmd) return cmd_verify(c, count);
    if (*sweep_cmd) return cmd_sweep(c, n_seeds, t_values, s_values);
    if (*export_cmd) return cmd_export(metrics_path, c);
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CorruptState& e) {
    std::cerr << "corrupt state: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
