#pragma once

// Outer loop: minibatch -> snapshot -> collection (GRPO path or the UEC
// controller) -> one ascent step on O_eff -> scheduled replay step ->
// metrics, evaluation and checkpoints.
//
// All randomness is counter-based: every draw derives from (seed, step, ...)
// so a run is reproducible from its config alone and resumable from a
// checkpoint without saving generator state beyond the step counter.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uecrl/config.hpp"
#include "uecrl/metrics.hpp"
#include "uecrl/objective.hpp"
#include "uecrl/policy.hpp"
#include "uecrl/policy_io.hpp"
#include "uecrl/rollout.hpp"
#include "uecrl/tasks.hpp"
#include "uecrl/uec.hpp"

namespace uecrl {

namespace seed_tag {
inline constexpr std::uint64_t minibatch = 0x1b;
inline constexpr std::uint64_t rollout = 0x2c;
inline constexpr std::uint64_t replay = 0x3d;
inline constexpr std::uint64_t eval = 0x4e;
}  // namespace seed_tag

// ---- evaluation ---------------------------------------------------------------

struct ClassScores {
  std::string name;  // easy | hard | heldout
  std::size_t n_tasks = 0;
  std::vector<std::pair<int, double>> pass;  // (k, pass@k), in the order of ks

  double at(int k) const {
    for (const auto& [kk, v] : pass) {
      if (kk == k) return v;
    }
    throw InvalidArgument("pass@" + std::to_string(k) + " was not evaluated");
  }
};

struct EvalOptions {
  std::vector<int> k = {1};
  int samples_per_task = 16;
  double temperature = 0.2;
  double top_p = 0.95;
};

/// Mean over tasks of the unbiased pass@k estimate from samples_per_task
/// draws each. Sample i of task p uses derive_seed(seed, {p, i}).
inline ClassScores evaluate(const PolicyParams& params, std::span<const TaskInstance> tasks, const EvalOptions& opts,
                            std::uint64_t seed, std::string name = "all") {
  if (opts.k.empty()) throw InvalidArgument("evaluate: no k values");
  for (int k : opts.k) {
    if (k < 1) throw InvalidArgument("evaluate: k must be >= 1");
    if (k > opts.samples_per_task) throw InvalidArgument("evaluate: k exceeds samples_per_task");
  }
  ClassScores out;
  out.name = std::move(name);
  out.n_tasks = tasks.size();
  std::vector<double> sums(opts.k.size(), 0.0);
  const SamplingOptions so{opts.temperature, opts.top_p};
  for (const auto& task : tasks) {
    int c = 0;
    for (int i = 0; i < opts.samples_per_task; ++i) {
      Rng rng(derive_seed(seed, {task.prompt_id, static_cast<std::uint64_t>(i)}));
      c += verify(task, sample_sequence(params, task.prompt_id, so, task.max_len, task.terminal, rng).tokens);
    }
    for (std::size_t j = 0; j < opts.k.size(); ++j) sums[j] += pass_at_k(opts.samples_per_task, c, opts.k[j]);
  }
  for (std::size_t j = 0; j < opts.k.size(); ++j) {
    out.pass.emplace_back(opts.k[j], tasks.empty() ? 0.0 : sums[j] / static_cast<double>(tasks.size()));
  }
  return out;
}

// ---- initial policy -------------------------------------------------------------

/// Response the prior leans toward: the first accepting sequence (plus the
/// terminal token if any); for hard tasks its last token is shifted by one,
/// so the prior is confidently wrong on exactly one position.
inline TokenSeq prior_reference(const TaskInstance& task) {
  TokenSeq ref = task.accepting.front();
  if (task.difficulty == Difficulty::hard) {
    ref.back() = static_cast<Token>((ref.back() + 1) % task.vocab);
  }
  if (task.terminal && static_cast<int>(ref.size()) < task.max_len) ref.push_back(*task.terminal);
  return ref;
}

inline PolicyParams initial_policy(const TrainConfig& cfg, std::span<const TaskInstance> tasks, int vocab) {
  PolicyParams p = cfg.policy_kind == PolicyKind::tabular ? PolicyParams::tabular(vocab)
                                                          : PolicyParams::linear(vocab, cfg.featurizer);
  if (cfg.init.prior == "none") return p;
  if (cfg.policy_kind != PolicyKind::tabular) throw InvalidArgument("init.prior=reference needs a tabular policy");
  for (const auto& task : tasks) {
    const double b = task.difficulty == Difficulty::hard ? cfg.init.hard_confidence : cfg.init.easy_confidence;
    if (b == 0.0) continue;
    const TokenSeq ref = prior_reference(task);
    ContextKey ctx{task.prompt_id, {}};
    for (Token t : ref) {
      std::vector<double> row(vocab, 0.0);
      row[t] = b;
      p.set_row(ctx, std::move(row));
      ctx.prefix.push_back(t);
    }
  }
  return p;
}

// ---- state ------------------------------------------------------------------

struct TrainState {
  PolicyParams params = PolicyParams::tabular(2);
  PolicyParams reference = PolicyParams::tabular(2);  // pi_ref for the KL term: the initial policy
  ReplayBuffer buffer{1};
  std::int64_t global_step = 0;
  std::vector<MetricsRecord> metrics;
};

/// Curriculum, held-out set and initial state built from a config.
struct Experiment {
  TrainConfig config;
  Curriculum curriculum;
  std::vector<TaskInstance> heldout;
  int vocab = 2;
  TrainState state;

  explicit Experiment(TrainConfig cfg) : config(std::move(cfg)) {
    config.validate();
    curriculum = make_curriculum(config.curriculum, config.curriculum_seed);
    heldout = make_heldout_hard(config.curriculum, config.curriculum_seed, config.curriculum.heldout_hard);
    for (const auto& t : curriculum.instances) vocab = std::max(vocab, t.vocab);
    for (const auto& t : heldout) vocab = std::max(vocab, t.vocab);
    std::vector<TaskInstance> all = curriculum.instances;
    all.insert(all.end(), heldout.begin(), heldout.end());
    state.params = initial_policy(config, all, vocab);
    state.reference = state.params;
    state.buffer = ReplayBuffer(config.uec.s_prime);
  }

  std::vector<TaskInstance> tasks_of(Difficulty d) const {
    std::vector<TaskInstance> out;
    for (const auto& t : curriculum.instances) {
      if (t.difficulty == d) out.push_back(t);
    }
    return out;
  }

  /// Scores per class (easy, hard, and heldout when configured) with the
  /// evaluation stream of the given step.
  std::vector<ClassScores> evaluate_all(const PolicyParams& params, std::int64_t step) const {
    const EvalOptions eo{config.eval.k, config.eval.samples_per_task, config.eval.temperature, config.eval.top_p};
    const std::uint64_t s = derive_seed(config.seed, {seed_tag::eval, static_cast<std::uint64_t>(step)});
    std::vector<ClassScores> out;
    out.push_back(evaluate(params, tasks_of(Difficulty::easy), eo, s, "easy"));
    out.push_back(evaluate(params, tasks_of(Difficulty::hard), eo, s, "hard"));
    if (!heldout.empty()) out.push_back(evaluate(params, heldout, eo, s, "heldout"));
    return out;
  }
};

// ---- checkpoints --------------------------------------------------------------

inline std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06lld", static_cast<long long>(step));
  return buf;
}

inline void write_buffer(std::ostream& out, const ReplayBuffer& buffer) {
  for (const auto& e : buffer.entries()) write_trajectory(out, e.trajectory, 17, e.insertion_index);
}

inline ReplayBuffer read_buffer(std::istream& in, std::size_t capacity, std::uint64_t total_pushed) {
  ReplayBuffer b(capacity);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      b.restore(parse_trajectory(j), j.at("insertion_index").get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
      throw CorruptState(std::string("malformed buffer record: ") + e.what());
    }
  }
  if (b.total_pushed() > total_pushed) throw CorruptState("buffer insertion index beyond recorded push count");
  b.set_total_pushed(total_pushed);
  return b;
}

/// Writes <dir>/step_NNNNNN.ckpt and .buffer and rewrites <dir>/manifest.json.
inline void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg, const TrainState& st) {
  std::filesystem::create_directories(dir);
  const std::string base = step_name(st.global_step);
  {
    std::ofstream out(dir / (base + ".ckpt"));
    save_policy(out, st.params, st.global_step);
    if (!out) throw CorruptState("cannot write checkpoint " + base);
  }
  {
    std::ofstream out(dir / (base + ".buffer"));
    write_buffer(out, st.buffer);
    if (!out) throw CorruptState("cannot write buffer " + base);
  }
  nlohmann::ordered_json m;
  const auto mpath = dir / "manifest.json";
  if (std::filesystem::exists(mpath)) {
    std::ifstream in(mpath);
    m = nlohmann::ordered_json::parse(in);
    if (m.at("config_hash") != config_hash(cfg)) throw InvalidArgument("checkpoint directory belongs to another config");
  } else {
    m["config_hash"] = config_hash(cfg);
    m["seed"] = cfg.seed;
    m["checkpoints"] = nlohmann::ordered_json::array();
  }
  // Generators are counter-based; the step counter is the whole rng state.
  m["rng_state"] = {{"seed", cfg.seed}, {"counter", st.global_step}};
  m["latest_step"] = st.global_step;
  auto& list = m["checkpoints"];
  for (auto it = list.begin(); it != list.end();) {
    it = it->at("step") == st.global_step ? list.erase(it) : it + 1;
  }
  list.push_back({{"step", st.global_step},
                  {"policy", base + ".ckpt"},
                  {"buffer", base + ".buffer"},
                  {"buffer_total_pushed", st.buffer.total_pushed()}});
  std::ofstream out(mpath);
  out << m.dump(2) << '\n';
  if (!out) throw CorruptState("cannot write checkpoint manifest");
}

/// Loads the latest (or the given) step from a checkpoint directory into
/// `exp.state`. The directory's config hash must match.
inline void load_checkpoint(const std::filesystem::path& dir, Experiment& exp,
                            std::optional<std::int64_t> step = std::nullopt) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw InvalidArgument("no checkpoint manifest in " + dir.string());
  nlohmann::ordered_json m;
  try {
    m = nlohmann::ordered_json::parse(min);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptState(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (m.at("config_hash").get<std::string>() != config_hash(exp.config)) {
    throw InvalidArgument("checkpoint was written under a different config");
  }
  const std::int64_t want = step.value_or(m.at("latest_step").get<std::int64_t>());
  for (const auto& e : m.at("checkpoints")) {
    if (e.at("step").get<std::int64_t>() != want) continue;
    std::ifstream pin(dir / e.at("policy").get<std::string>());
    if (!pin) throw CorruptState("missing policy file for step " + std::to_string(want));
    auto loaded = load_policy(pin);
    if (loaded.global_step != want) throw CorruptState("policy file step disagrees with manifest");
    std::ifstream bin(dir / e.at("buffer").get<std::string>());
    if (!bin) throw CorruptState("missing buffer file for step " + std::to_string(want));
    exp.state.buffer = read_buffer(bin, exp.config.uec.s_prime, e.at("buffer_total_pushed").get<std::uint64_t>());
    exp.state.params = std::move(loaded.params);
    exp.state.global_step = want;
    exp.state.metrics.clear();
    return;
  }
  throw InvalidArgument("no checkpoint for step " + std::to_string(want));
}

// ---- training step ------------------------------------------------------------

namespace detail {

inline double token_cov(std::span<const Trajectory> batch) {
  double n = 0.0, sx = 0.0, sy = 0.0, sxy = 0.0;
  for (const auto& t : batch) {
    for (double lp : t.old_logprobs_t1) {
      n += 1.0;
      sx += lp;
      sy += t.advantage;
      sxy += lp * t.advantage;
    }
  }
  return n == 0.0 ? 0.0 : sxy / n - (sx / n) * (sy / n);
}

inline std::vector<const TaskInstance*> sample_minibatch(const Curriculum& c, int batch_size, std::uint64_t seed) {
  const std::size_t n = c.instances.size();
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(batch_size), n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  std::vector<const TaskInstance*> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(&c.instances[idx[i]]);
  return out;
}

}  // namespace detail

/// One loop iteration. global_step advances by exactly one, also when O_eff
/// is empty and the main update is skipped.
inline MetricsRecord train_step(Experiment& exp) {
  const TrainConfig& cfg = exp.config;
  TrainState& st = exp.state;
  const auto k = static_cast<std::uint64_t>(st.global_step);
  const auto tasks = detail::sample_minibatch(exp.curriculum, cfg.batch_size,
                                              derive_seed(cfg.seed, {seed_tag::minibatch, k}));
  const FrozenPolicy old = snapshot(st.params);
  UecStepOptions opts;
  opts.eps_std = cfg.objective.eps_std;
  opts.exploration = cfg.algorithm == Algorithm::uec && cfg.uec.exploration_enabled();
  opts.buffering = cfg.algorithm == Algorithm::uec && cfg.uec.replay_enabled();
  const auto res = uec_step(*old, tasks, cfg.uec, opts.buffering ? &st.buffer : nullptr,
                            derive_seed(cfg.seed, {seed_tag::rollout, k}), st.global_step, opts);

  MetricsRecord rec;
  double reward = 0.0, ent = 0.0, seq_ent = 0.0, len = 0.0, n_traj = 0.0, n_tok = 0.0;
  for (const auto& g : res.regular_groups) {
    for (const auto& t : g.trajectories) {
      reward += t.reward;
      len += static_cast<double>(t.length());
      double h = 0.0;
      for (double e : t.old_entropy_t1) h += e;
      ent += h;
      seq_ent += h;
      n_tok += static_cast<double>(t.length());
      n_traj += 1.0;
    }
  }
  rec.reward_mean = reward / n_traj;
  rec.token_entropy_mean = ent / n_tok;
  rec.entropy_seq_mean = seq_ent / n_traj;
  rec.response_length_mean = len / n_traj;
  rec.difficult_fraction = static_cast<double>(res.difficult) / static_cast<double>(tasks.size());
  rec.explored_prompts = static_cast<std::int64_t>(res.explored);
  rec.effective_size = static_cast<std::int64_t>(res.effective.size());
  rec.cov_diagnostic = detail::token_cov(res.effective);

  const PolicyParams* ref = cfg.objective.beta > 0.0 ? &st.reference : nullptr;
  if (!res.effective.empty()) {
    const auto obj = objective_and_gradient(st.params, res.effective, cfg.objective, ref);
    rec.clip_fraction = obj.clip_fraction();
    st.params.apply(obj.gradient, cfg.learning_rate);
    if (!st.params.all_finite()) throw CorruptState("non-finite parameters after update");
  }
  ++st.global_step;

  if (cfg.algorithm == Algorithm::uec && cfg.uec.replay_enabled() && st.global_step % cfg.uec.f_replay == 0 &&
      !st.buffer.empty()) {
    // The replay phase walks the whole buffer in shuffled minibatches, so a
    // larger s' means more replayed updates per phase.
    const std::size_t m = cfg.uec.replay_batch > 0 ? static_cast<std::size_t>(cfg.uec.replay_batch)
                                                   : static_cast<std::size_t>(cfg.batch_size * cfg.uec.G);
    const auto order = replay_batch(st.buffer, st.buffer.size(), derive_seed(cfg.seed, {seed_tag::replay, k}));
    std::size_t clipped = 0, tokens = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += m) {
      const std::span<const Trajectory> chunk(order.data() + lo, std::min(m, order.size() - lo));
      const auto obj = objective_and_gradient(st.params, chunk, cfg.objective, ref);
      clipped += obj.clipped_tokens;
      tokens += obj.total_tokens;
      st.params.apply(obj.gradient, cfg.learning_rate);
      if (!st.params.all_finite()) throw CorruptState("non-finite parameters after replay update");
    }
    rec.replay_size = static_cast<std::int64_t>(order.size());
    rec.replay_clip_fraction = tokens ? static_cast<double>(clipped) / static_cast<double>(tokens) : 0.0;
  }

  rec.step = st.global_step;
  rec.buffer_size = static_cast<std::int64_t>(st.buffer.size());
  if (st.global_step % cfg.eval_every == 0) {
    for (const auto& cls : exp.evaluate_all(st.params, st.global_step)) {
      for (const auto& [kk, v] : cls.pass) rec.eval.emplace_back("pass@" + std::to_string(kk) + "_" + cls.name, v);
    }
  }
  return rec;
}

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const MetricsRecord&)> on_record;  // may throw to abort
  bool keep_metrics = true;
};

/// Runs until global_step reaches config.max_steps. On a corrupt-state
/// failure the pre-step snapshot is written as diagnostic_<step>.ckpt.
inline void train(Experiment& exp, const TrainOptions& opts = {}) {
  while (exp.state.global_step < exp.config.max_steps) {
    const PolicyParams before = exp.state.params;
    MetricsRecord rec;
    try {
      rec = train_step(exp);
    } catch (const CorruptState&) {
      if (opts.checkpoint_dir) {
        std::filesystem::create_directories(*opts.checkpoint_dir);
        std::ofstream out(*opts.checkpoint_dir / ("diagnostic_" + step_name(exp.state.global_step) + ".ckpt"));
        save_policy(out, before, exp.state.global_step);
      }
      throw;
    }
    if (opts.keep_metrics) exp.state.metrics.push_back(rec);
    try {
      if (opts.on_record) opts.on_record(rec);
    } catch (...) {
      if (opts.checkpoint_dir) save_checkpoint(*opts.checkpoint_dir, exp.config, exp.state);
      throw;
    }
    if (opts.checkpoint_dir &&
        (exp.state.global_step % exp.config.checkpoint_every == 0 || exp.state.global_step == exp.config.max_steps)) {
      save_checkpoint(*opts.checkpoint_dir, exp.config, exp.state);
    }
  }
}

/// Builds the experiment and trains it from scratch.
inline Experiment train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
  Experiment exp(cfg);
  train(exp, opts);
  return exp;
}

}  // namespace uecrl
