#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "uecrl/trainer.hpp"

using namespace uecrl;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(Algorithm algo, std::uint64_t seed) {
  TrainConfig c;
  c.algorithm = algo;
  c.seed = seed;
  c.curriculum_seed = seed;
  c.learning_rate = 5.0;
  c.batch_size = 8;
  c.max_steps = 20;
  c.eval_every = 10;
  c.checkpoint_every = 5;
  c.curriculum.size = 20;
  c.curriculum.hard_fraction = 0.3;
  c.curriculum.easy_accepting = 1;
  c.init.prior = "reference";
  c.init.hard_confidence = 6.5;
  c.eval.k = {1, 4};
  c.eval.samples_per_task = 8;
  if (algo != Algorithm::uec) {
    c.uec.G_prime = c.uec.G;
    c.uec.t_prime = 1.0;
    c.uec.f_replay = 0;
  }
  return c;
}

std::string dump(const std::vector<MetricsRecord>& recs) {
  std::string s;
  for (const auto& r : recs) s += format_metrics(r) + "\n";
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("uecrl_trainer_" + name)) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(PassAtK, Examples) {
  EXPECT_EQ(pass_at_k(16, 16, 1), 1.0);
  EXPECT_EQ(pass_at_k(16, 16, 16), 1.0);
  EXPECT_EQ(pass_at_k(16, 0, 4), 0.0);
  EXPECT_NEAR(pass_at_k(10, 3, 1), 0.3, 1e-15);
  // 1 - C(7,2)/C(10,2) computed by hand.
  EXPECT_NEAR(pass_at_k(10, 3, 2), 1.0 - 21.0 / 45.0, 1e-15);
  EXPECT_THROW(pass_at_k(4, 1, 5), InvalidArgument);
  EXPECT_THROW(pass_at_k(4, 5, 1), InvalidArgument);
}

TEST(PassAtK, NonDecreasingInK) {
  for (int n = 1; n <= 20; ++n) {
    for (int c = 0; c <= n; ++c) {
      for (int k = 1; k < n; ++k) EXPECT_LE(pass_at_k(n, c, k), pass_at_k(n, c, k + 1));
    }
  }
}

TEST(Evaluate, AlwaysCorrectPolicyScoresOne) {
  const auto task = make_combination_lock(4, 3, 2, 5);
  auto p = PolicyParams::tabular(4);
  ContextKey ctx{task.prompt_id, {}};
  for (Token t : task.accepting[0]) {
    std::vector<double> row(4, 0.0);
    row[t] = 50.0;
    p.set_row(ctx, row);
    ctx.prefix.push_back(t);
  }
  const std::vector<TaskInstance> tasks = {task};
  const auto s = evaluate(p, tasks, EvalOptions{{1, 4, 16}, 16, 0.2, 0.95}, 3, "hard");
  EXPECT_EQ(s.at(1), 1.0);
  EXPECT_EQ(s.at(16), 1.0);
  EXPECT_EQ(s.n_tasks, 1u);
}

TEST(Evaluate, UniformPolicyPassAt4OnSingleTokenLock) {
  std::vector<TaskInstance> tasks;
  for (std::uint64_t i = 0; i < 4000; ++i) tasks.push_back(make_combination_lock(4, 1, i, static_cast<PromptId>(i)));
  const auto s = evaluate(PolicyParams::tabular(4), tasks, EvalOptions{{1, 4}, 16, 1.0, 1.0}, 11);
  EXPECT_NEAR(s.at(4), 1.0 - std::pow(0.75, 4), 0.01);
  EXPECT_NEAR(s.at(1), 0.25, 0.01);
  EXPECT_THROW(evaluate(PolicyParams::tabular(4), tasks, EvalOptions{{17}, 16, 1.0, 1.0}, 1), InvalidArgument);
}

TEST(InitialPolicy, ReferencePrior) {
  auto easy = make_combination_lock(4, 3, 1, 1);
  auto hard = make_combination_lock(4, 5, 2, 2);
  hard.difficulty = Difficulty::hard;
  EXPECT_EQ(prior_reference(easy), easy.accepting[0]);
  const auto near = prior_reference(hard);
  ASSERT_EQ(near.size(), 5u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(near[i], hard.accepting[0][i]);
  EXPECT_EQ(near[4], (hard.accepting[0][4] + 1) % 4);
  EXPECT_EQ(verify(hard, near), 0);

  TrainConfig cfg;
  cfg.init.prior = "reference";
  cfg.init.easy_confidence = 0.0;
  cfg.init.hard_confidence = 6.5;
  const std::vector<TaskInstance> tasks = {easy, hard};
  const auto p = initial_policy(cfg, tasks, 4);
  EXPECT_EQ(p.logits({easy.prompt_id, {}}), std::vector<double>(4, 0.0));
  ContextKey ctx{hard.prompt_id, {}};
  for (Token t : near) {
    const auto z = p.logits(ctx);
    EXPECT_EQ(z[t], 6.5);
    ctx.prefix.push_back(t);
  }
  cfg.policy_kind = PolicyKind::linear;
  EXPECT_THROW(initial_policy(cfg, tasks, 4), InvalidArgument);
}

TEST(SampleMinibatch, DistinctAndBounded) {
  CurriculumSpec spec;
  spec.size = 10;
  const auto c = make_curriculum(spec, 3);
  for (int b : {1, 4, 10, 25}) {
    const auto mb = detail::sample_minibatch(c, b, 99);
    EXPECT_EQ(mb.size(), static_cast<std::size_t>(std::min(b, 10)));
    for (std::size_t i = 0; i < mb.size(); ++i) {
      for (std::size_t j = i + 1; j < mb.size(); ++j) EXPECT_NE(mb[i], mb[j]);
    }
  }
  EXPECT_EQ(detail::sample_minibatch(c, 4, 5), detail::sample_minibatch(c, 4, 5));
}

TEST(TokenCov, MatchesDirectFormula) {
  Trajectory a, b;
  a.tokens = {0, 1};
  a.old_logprobs_t1 = {-0.1, -2.0};
  a.advantage = 1.5;
  b.tokens = {1};
  b.old_logprobs_t1 = {-0.7};
  b.advantage = -1.5;
  const std::vector<Trajectory> batch = {a, b};
  const double x[] = {-0.1, -2.0, -0.7}, y[] = {1.5, 1.5, -1.5};
  double mx = 0, my = 0, c = 0;
  for (int i = 0; i < 3; ++i) mx += x[i] / 3, my += y[i] / 3;
  for (int i = 0; i < 3; ++i) c += (x[i] - mx) * (y[i] - my) / 3;
  EXPECT_NEAR(detail::token_cov(batch), c, 1e-12);
}

TEST(Train, ZeroStepsLeavesInitialState) {
  auto cfg = small_config(Algorithm::uec, 1);
  cfg.max_steps = 0;
  const Experiment fresh(cfg);
  const auto exp = train(cfg);
  EXPECT_EQ(exp.state.global_step, 0);
  EXPECT_TRUE(exp.state.metrics.empty());
  EXPECT_TRUE(exp.state.params == fresh.state.params);
  EXPECT_TRUE(exp.state.buffer.empty());
}

TEST(Train, StepCounterAndRecords) {
  const auto exp = train(small_config(Algorithm::uec, 2));
  ASSERT_EQ(exp.state.metrics.size(), 20u);
  for (std::size_t i = 0; i < exp.state.metrics.size(); ++i) {
    const auto& r = exp.state.metrics[i];
    EXPECT_EQ(r.step, static_cast<std::int64_t>(i + 1));
    EXPECT_EQ(r.eval.empty(), r.step % 10 != 0);
    EXPECT_GE(r.clip_fraction, 0.0);
    EXPECT_LE(r.clip_fraction, 1.0);
    EXPECT_LE(r.buffer_size, 512);
  }
  EXPECT_EQ(exp.state.global_step, 20);
  for (const auto& e : exp.state.buffer.entries()) EXPECT_GT(e.trajectory.advantage, 1.0);
}

TEST(Train, GrpoOnEasyCurriculumLowersEntropy) {
  auto cfg = small_config(Algorithm::grpo, 3);
  cfg.curriculum.hard_fraction = 0.0;
  cfg.curriculum.easy_accepting = 1;
  cfg.init.prior = "none";
  cfg.max_steps = 200;
  cfg.eval_every = 1000;
  const auto exp = train(cfg);
  const auto& m = exp.state.metrics;
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += m[i].token_entropy_mean / 10;
    tail += m[m.size() - 1 - i].token_entropy_mean / 10;
  }
  EXPECT_LT(tail, 0.5 * head);
  EXPECT_GT(m.back().reward_mean, m.front().reward_mean);
}

TEST(Train, SameSeedSameMetrics) {
  const auto cfg = small_config(Algorithm::uec, 4);
  EXPECT_EQ(dump(train(cfg).state.metrics), dump(train(cfg).state.metrics));
  auto other = cfg;
  other.seed = 5;
  EXPECT_NE(dump(train(cfg).state.metrics), dump(train(other).state.metrics));
}

TEST(Train, UecWithoutExplorationOrReplayIsGrpo) {
  auto grpo = small_config(Algorithm::grpo, 6);
  auto uec = grpo;
  uec.algorithm = Algorithm::uec;
  grpo.max_steps = uec.max_steps = 40;
  const auto a = train(grpo), b = train(uec);
  EXPECT_EQ(dump(a.state.metrics), dump(b.state.metrics));
  EXPECT_TRUE(a.state.params == b.state.params);
}

TEST(Checkpoint, ResumeReproducesTheRun) {
  TempDir dir("resume");
  const auto cfg = small_config(Algorithm::uec, 7);
  Experiment full(cfg);
  train(full, {dir.path, nullptr, true});
  ASSERT_TRUE(fs::exists(dir.path / "manifest.json"));
  ASSERT_TRUE(fs::exists(dir.path / "step_000010.ckpt"));

  Experiment resumed(cfg);
  load_checkpoint(dir.path, resumed, 10);
  EXPECT_EQ(resumed.state.global_step, 10);
  train(resumed);
  EXPECT_TRUE(resumed.state.params == full.state.params);
  const std::vector<MetricsRecord> tail(full.state.metrics.begin() + 10, full.state.metrics.end());
  EXPECT_EQ(dump(resumed.state.metrics), dump(tail));
  ASSERT_EQ(resumed.state.buffer.size(), full.state.buffer.size());
  EXPECT_EQ(resumed.state.buffer.total_pushed(), full.state.buffer.total_pushed());
  for (std::size_t i = 0; i < full.state.buffer.size(); ++i) {
    EXPECT_EQ(resumed.state.buffer.entries()[i].trajectory, full.state.buffer.entries()[i].trajectory);
  }
}

TEST(Checkpoint, RejectsOtherConfigAndMissingStep) {
  TempDir dir("mismatch");
  auto cfg = small_config(Algorithm::uec, 8);
  cfg.max_steps = 5;
  Experiment exp(cfg);
  train(exp, {dir.path, nullptr, true});
  auto other = cfg;
  other.uec.t_prime = 1.1;
  Experiment wrong(other);
  EXPECT_THROW(load_checkpoint(dir.path, wrong), InvalidArgument);
  Experiment right(cfg);
  EXPECT_THROW(load_checkpoint(dir.path, right, 3), InvalidArgument);
  EXPECT_THROW(save_checkpoint(dir.path, other, wrong.state), InvalidArgument);
  EXPECT_THROW(load_checkpoint(dir.path / "nope", right), InvalidArgument);
}

TEST(Checkpoint, CorruptFilesAreReported) {
  TempDir dir("corrupt");
  auto cfg = small_config(Algorithm::uec, 9);
  cfg.max_steps = 5;
  Experiment exp(cfg);
  train(exp, {dir.path, nullptr, true});
  fs::remove(dir.path / "step_000005.buffer");
  Experiment again(cfg);
  EXPECT_THROW(load_checkpoint(dir.path, again), CorruptState);
  std::ofstream(dir.path / "manifest.json") << "{ not json";
  EXPECT_THROW(load_checkpoint(dir.path, again), CorruptState);
}

TEST(Checkpoint, IdenticalRunsWriteIdenticalFiles) {
  TempDir a("bytes_a"), b("bytes_b");
  const auto cfg = small_config(Algorithm::uec, 10);
  train(cfg, {a.path, nullptr, true});
  train(cfg, {b.path, nullptr, true});
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a.path)) {
    EXPECT_EQ(slurp(e.path()), slurp(b.path / e.path().filename())) << e.path().filename();
    ++files;
  }
  EXPECT_EQ(files, 1u + 2u * 4u);
}

TEST(BufferIo, RoundTrip) {
  ReplayBuffer buf(3);
  for (int i = 0; i < 5; ++i) {
    Trajectory t;
    t.prompt_id = static_cast<PromptId>(i);
    t.tokens = {static_cast<Token>(i % 2)};
    t.old_logprobs_t1 = t.behavior_logprobs = {-0.1 * (i + 1)};
    t.advantage = 1.5 + i;
    std::vector<Trajectory> one = {t};
    buffer_push(buf, one, 1.0);
  }
  std::stringstream ss;
  write_buffer(ss, buf);
  const auto back = read_buffer(ss, 3, buf.total_pushed());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.entries()[i].trajectory, buf.entries()[i].trajectory);
    EXPECT_EQ(back.entries()[i].insertion_index, buf.entries()[i].insertion_index);
  }
  std::stringstream again;
  write_buffer(again, buf);
  EXPECT_THROW(read_buffer(again, 3, 1), CorruptState);
}

TEST(Train, DiagnosticSnapshotOnCorruptState) {
  TempDir dir("diag");
  auto cfg = small_config(Algorithm::grpo, 11);
  Experiment exp(cfg);
  exp.state.params.set_row({exp.curriculum.instances[0].prompt_id, {}}, std::vector<double>(exp.vocab, NAN));
  EXPECT_THROW(train(exp, {dir.path, nullptr, true}), CorruptState);
  bool found = false;
  for (const auto& e : fs::directory_iterator(dir.path)) {
    found = found || e.path().filename() == "diagnostic_step_000000.ckpt";
  }
  EXPECT_TRUE(found);
  EXPECT_EQ(exp.state.global_step, 0);
}
