#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "sambay/training.hpp"

using namespace sambay;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny(Arch arch, std::size_t depth = 4) {
  ModelConfig c;
  c.arch = arch;
  c.depth = depth;
  c.width = 16;
  c.attn_width = 16;
  c.head_dim = 4;
  c.kv_group = 2;
  c.mlp_width = 32;
  c.window = 8;
  c.vocab_size = 16;
  c.ssm_state = 4;
  return c;
}

OptimState<double> single_state(double wd, double lr_mult = 1.0) {
  OptimState<double> o;
  o.m = {{0.0}};
  o.v = {{0.0}};
  o.groups = {ParamGroup::Hidden};
  o.lr_multiplier = {lr_mult};
  o.weight_decay = {wd};
  return o;
}

}  // namespace

TEST(AdamW, ZeroGradWithoutDecayLeavesParams) {
  std::vector<Tensor<double>> p{Tensor<double>({1}, std::vector<double>{0.7})};
  auto o = single_state(0.0);
  adamw_step<double>(p, {{0.0}}, o, 1e-2);
  EXPECT_EQ(p[0][0], 0.7);
  EXPECT_EQ(o.step, 1u);
}

TEST(AdamW, ZeroGradIsPureDecoupledDecay) {
  std::vector<Tensor<double>> p{Tensor<double>({1}, std::vector<double>{0.7})};
  auto o = single_state(0.1);
  adamw_step<double>(p, {{0.0}}, o, 1e-2);
  EXPECT_DOUBLE_EQ(p[0][0], 0.7 * (1 - 1e-2 * 0.1));
}

TEST(AdamW, QuadraticConvergesToOptimum) {
  // f(x) = (x - 3)^2, no decay.
  std::vector<Tensor<double>> p{Tensor<double>({1}, std::vector<double>{-2.0})};
  auto o = single_state(0.0);
  const std::size_t steps = 5000;
  for (std::size_t s = 0; s < steps; ++s) {
    const double x = p[0][0];
    adamw_step<double>(p, {{2 * (x - 3)}}, o, 0.05 * lr_schedule(s, steps, 50));
  }
  EXPECT_NEAR(p[0][0], 3.0, 1e-6);
}

TEST(AdamW, FirstStepMovesByLr) {
  // Bias-corrected first step is lr * sign(g).
  std::vector<Tensor<double>> p{Tensor<double>({2}, std::vector<double>{1.0, 1.0})};
  OptimState<double> o;
  o.m = {{0, 0}};
  o.v = {{0, 0}};
  o.lr_multiplier = {0.5};
  o.weight_decay = {0};
  adamw_step<double>(p, {{3.0, -0.01}}, o, 0.1);
  EXPECT_NEAR(p[0][0], 1.0 - 0.05, 1e-9);
  EXPECT_NEAR(p[0][1], 1.0 + 0.05, 1e-6);
}

TEST(AdamW, RejectsShapeMismatch) {
  std::vector<Tensor<double>> p{Tensor<double>({2}, std::vector<double>{1.0, 1.0})};
  auto o = single_state(0.0);
  EXPECT_THROW(adamw_step<double>(p, {{0.0}}, o, 0.1), ShapeError);
  EXPECT_THROW(adamw_step<double>(p, {{0.0, 0.0}, {1.0}}, o, 0.1), ShapeError);
}

TEST(AdamW, MuPPPZeroGradExemptsVectorLikeAndEmbeddings) {
  auto cfg = tiny(Arch::SambaY, 4);
  auto model = Model<float>::init(cfg, 3);
  std::vector<Tensor<float>> params = model.params();
  std::vector<std::vector<float>> before, grads;
  for (const auto& t : params) {
    before.emplace_back(t.data().begin(), t.data().end());
    grads.emplace_back(t.numel(), 0.0f);
  }
  auto opt = make_optim_state(model, mup_plan(cfg));
  adamw_step<float>(params, grads, opt, 1e-2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& spec = model.specs()[i];
    const auto now = params[i].data();
    bool same = true;
    for (std::size_t j = 0; j < now.size(); ++j) same = same && now[j] == before[i][j];
    if (spec.group == ParamGroup::Hidden) {
      EXPECT_FALSE(same) << spec.name;
    } else {
      EXPECT_TRUE(same) << spec.name;
    }
  }
}

TEST(Clip, GlobalNorm) {
  std::vector<std::vector<double>> g{{3.0}, {4.0}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(g[0][0], 0.6);
  EXPECT_DOUBLE_EQ(g[1][0], 0.8);
  std::vector<std::vector<double>> h{{0.3}, {0.4}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(h, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(h[0][0], 0.3);
}

TEST(Tasks, DeterministicAndWellFormed) {
  for (TaskKind k : {TaskKind::AssociativeRecall, TaskKind::PhonebookMini, TaskKind::Copy}) {
    TaskSpec s;
    s.kind = k;
    s.n_pairs = 12;
    s.key_len = 2;
    s.value_len = 3;
    s.sequence_length = 100;
    s.seed = 4;
    const auto a = make_task(s, 9), b = make_task(s, 9), c = make_task(s, 10);
    EXPECT_EQ(a.tokens, b.tokens) << task_name(k);
    EXPECT_NE(a.tokens, c.tokens) << task_name(k);
    ASSERT_EQ(a.tokens.size(), 100u);
    ASSERT_EQ(a.answer.size(), a.answer_positions.size());
    std::size_t masked = 0;
    for (auto m : a.mask) masked += m;
    EXPECT_EQ(masked, a.answer.size());
    for (std::size_t j = 0; j < a.answer.size(); ++j) {
      EXPECT_EQ(a.tokens[a.answer_positions[j] + 1], a.answer[j]);
    }
    EXPECT_EQ(a.answer_positions.back(), 98);
    for (int t : a.tokens) {
      EXPECT_GE(t, 0);
      EXPECT_LT(t, 64);
    }
  }
}

TEST(Tasks, AnswerAppearsInContextExactlyOnce) {
  for (TaskKind k : {TaskKind::AssociativeRecall, TaskKind::PhonebookMini}) {
    TaskSpec s;
    s.kind = k;
    s.n_pairs = 20;
    s.value_len = 2;
    s.sequence_length = 128;
    for (std::uint64_t ep = 0; ep < 50; ++ep) {
      const auto e = make_task(s, ep);
      const std::size_t ctx_end = static_cast<std::size_t>(e.answer_positions.front()) - s.key_len;
      std::size_t hits = 0;
      const std::size_t rec = s.key_len + s.value_len + (k == TaskKind::PhonebookMini ? 2 : 0);
      const std::size_t voff = s.key_len + (k == TaskKind::PhonebookMini ? 1 : 0);
      for (std::size_t r = 0; r < s.n_pairs; ++r) {
        const auto v0 = e.tokens.begin() + static_cast<std::ptrdiff_t>(r * rec + voff);
        hits += std::equal(e.answer.begin(), e.answer.end(), v0);
      }
      EXPECT_LT(s.n_pairs * rec, ctx_end);
      EXPECT_EQ(hits, 1u) << task_name(k) << " episode " << ep;
    }
  }
}

TEST(Tasks, QueryKeyIdentifiesTheAnswer) {
  TaskSpec s;
  s.n_pairs = 8;
  s.key_len = 1;
  s.value_len = 1;
  s.sequence_length = 32;
  const auto e = make_task(s, 3);
  const int key = e.tokens[static_cast<std::size_t>(e.answer_positions[0])];
  for (std::size_t r = 0; r < s.n_pairs; ++r) {
    if (e.tokens[2 * r] == key) EXPECT_EQ(e.tokens[2 * r + 1], e.answer[0]);
  }
}

TEST(Tasks, RejectOverflowAndImpossibleDraws) {
  TaskSpec s;
  s.n_pairs = 32;
  s.sequence_length = 60;
  EXPECT_THROW(make_task(s), ConfigError);
  s.sequence_length = 512;
  s.vocab_size = 20;  // 16 content tokens < 32 distinct keys
  EXPECT_THROW(make_task(s), ConfigError);
  s.vocab_size = 64;
  EXPECT_NO_THROW(make_task(s));
  EXPECT_THROW(parse_task("sorting"), ConfigError);
}

TEST(Eval, StderrAndOracle) {
  const auto r = recall_result(30, 40);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(r.stderr_, std::sqrt(0.75 * 0.25 / 40));
  EXPECT_DOUBLE_EQ(recall_result(7, 7).accuracy, 1.0);
  EXPECT_DOUBLE_EQ(recall_result(7, 7).stderr_, 0.0);
  EXPECT_THROW(recall_result(0, 0), ConfigError);
}

TEST(Eval, UntrainedModelIsNearChance) {
  ModelConfig c = tiny(Arch::SambaY);
  c.vocab_size = 64;
  TaskSpec s;
  s.n_pairs = 8;
  s.value_len = 2;
  s.sequence_length = 40;
  const auto m = Model<float>::init(c, 1);
  const auto r = evaluate_recall(m, s, 200);
  EXPECT_LE(r.accuracy, 0.05);
}

TEST(Train, InitialLossIsLogVocab) {
  ModelConfig c = tiny(Arch::SambaY);
  c.vocab_size = 64;
  TaskSpec s;
  s.n_pairs = 8;
  s.sequence_length = 32;
  TrainConfig tc;
  tc.steps = 1;
  tc.batch = 8;
  tc.lr = 1e-3;
  const auto r = train<float>(c, s, tc);
  EXPECT_NEAR(r.trace[0].loss, std::log(64.0), 0.05 * std::log(64.0));
}

TEST(Train, SameSeedSameTraceAndLrFollowsSchedule) {
  const ModelConfig c = tiny(Arch::SambaYDA);
  TaskSpec s;
  s.vocab_size = 16;
  s.n_pairs = 4;
  s.sequence_length = 24;
  TrainConfig tc;
  tc.steps = 12;
  tc.batch = 2;
  tc.lr = 3e-3;
  tc.warmup_fraction = 0.25;
  const auto a = train<float>(c, s, tc);
  const auto b = train<float>(c, s, tc);
  ASSERT_EQ(a.trace.size(), 12u);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
    EXPECT_DOUBLE_EQ(a.trace[i].lr, 3e-3 * lr_schedule(i, 12, 3));
  }
  tc.seed = 1;
  const auto d = train<float>(c, s, tc);
  EXPECT_NE(a.trace[0].loss, d.trace[0].loss);
}

TEST(Train, CopyLossDecreasesEarly) {
  ModelConfig c = tiny(Arch::TransformerPP, 2);
  TaskSpec s;
  s.kind = TaskKind::Copy;
  s.vocab_size = 16;
  s.n_pairs = 6;
  s.sequence_length = 13;
  TrainConfig tc;
  tc.steps = 60;
  tc.batch = 8;
  tc.lr = 1e-2;
  tc.warmup_fraction = 0;
  const auto r = train<float>(c, s, tc);
  // Mean over windows of 10 steps.
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 10 <= 50; i += 10) {
    double m = 0;
    for (std::size_t j = i; j < i + 10; ++j) m += r.trace[j].loss;
    smooth.push_back(m / 10);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LT(smooth[i], smooth[i - 1]) << "window " << i;
}

TEST(Train, SinglePairTaskIsLearned) {
  ModelConfig c = tiny(Arch::SambaY);
  TaskSpec s;
  s.vocab_size = 16;
  s.n_pairs = 1;
  s.sequence_length = 8;
  TrainConfig tc;
  tc.steps = 500;
  tc.batch = 16;
  tc.lr = 1e-2;
  tc.eval_every = 50;
  tc.eval_episodes = 64;
  tc.target_accuracy = 1.0;
  const auto r = train<float>(c, s, tc);
  ASSERT_FALSE(r.evals.empty());
  EXPECT_EQ(r.evals.back().accuracy, 1.0);
  EXPECT_EQ(r.stop_reason, "target");
}

TEST(Train, DivergenceIsReported) {
  ModelConfig c = tiny(Arch::TransformerPP, 2);
  TaskSpec s;
  s.vocab_size = 16;
  s.n_pairs = 2;
  s.sequence_length = 8;
  TrainConfig tc;
  tc.steps = 5;
  tc.batch = 2;
  tc.lr = 1e30;
  tc.clip_norm = 0;
  tc.warmup_fraction = 0;
  EXPECT_THROW(train<float>(c, s, tc), DivergenceError);
}

TEST(Train, CorpusModeAndTraceCsv) {
  const auto dir = fs::temp_directory_path() / ("sambay_tr_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "corpus.txt");
    for (int i = 0; i < 40; ++i) out << "the quick brown fox " << i << "\n";
  }
  const auto corpus = load_corpus(dir / "corpus.txt");
  EXPECT_EQ(corpus.tokens.front(), 256);
  EXPECT_EQ(corpus.tokens[1], 't');
  ModelConfig c = tiny(Arch::SambaY);
  c.vocab_size = 260;
  TrainConfig tc;
  tc.steps = 4;
  tc.batch = 2;
  tc.lr = 1e-3;
  const auto r = train<float>(c, corpus, 32, tc);
  EXPECT_NEAR(r.trace[0].loss, std::log(260.0), 0.05 * std::log(260.0));
  write_trace_csv(dir / "trace.csv", r.trace);
  std::ifstream in(dir / "trace.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,loss,lr,grad_norm");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 4u);
  EXPECT_THROW(load_corpus(dir / "missing.txt"), IoError);
  c.vocab_size = 64;
  EXPECT_THROW(train<float>(c, corpus, 32, tc), ConfigError);
  fs::remove_all(dir);
}
