#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sambay/arch.hpp"
#include "sambay/scaling.hpp"

namespace sambay {

// ---------------------------------------------------------------------------
// AdamW with per-parameter groups.

template <typename T>
struct OptimState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t step = 0;
  std::vector<ParamGroup> groups;
  std::vector<double> lr_multiplier;
  std::vector<double> weight_decay;
  double beta1 = BaseConstants::beta1;
  double beta2 = BaseConstants::beta2;
  double eps = BaseConstants::eps;
};

template <typename T>
OptimState<T> make_optim_state(const Model<T>& model, const MuPPlan& plan);

// p <- p (1 - lr_g wd_g) - lr_g mhat / (sqrt(vhat) + eps), lr_g = lr * group
// multiplier. Parameters with wd_g = 0 skip the decay multiply entirely.
template <typename T>
void adamw_step(std::span<Tensor<T>> params, const std::vector<std::vector<T>>& grads, OptimState<T>& opt,
                double lr);

// Scales grads in place so that their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<std::vector<T>>& grads, double max_norm);

// ---------------------------------------------------------------------------
// Synthetic retrieval tasks.
//
// Token ids 0..3 are reserved: 0 pad, 1 query marker, 2 key/value separator,
// 3 record end. Content tokens are 4..vocab_size-1.

enum class TaskKind { PhonebookMini, AssociativeRecall, Copy };

std::string task_name(TaskKind k);
TaskKind parse_task(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::AssociativeRecall;
  std::size_t vocab_size = 64;
  std::size_t n_pairs = 32;   // copy: number of tokens to copy
  std::size_t key_len = 1;
  std::size_t value_len = 1;
  std::size_t sequence_length = 512;
  std::uint64_t seed = 0;

  std::size_t min_length() const;
  void validate() const;  // ConfigError on overflow or an impossible draw
};

struct Episode {
  std::vector<int> tokens;            // sequence_length ids
  std::vector<int> answer_positions;  // positions whose next-token prediction is an answer token
  std::vector<int> answer;            // the answer tokens, in order
  std::vector<std::uint8_t> mask;     // mask[t] = 1 iff t is in answer_positions
};

// Episode index selects an independent draw from the spec's seed.
Episode make_task(const TaskSpec& spec, std::uint64_t episode = 0);

// ---------------------------------------------------------------------------
// Byte-level corpus: each line becomes 256 (bos), its UTF-8 bytes, 257 (eos).

struct Corpus {
  std::vector<int> tokens;
};

Corpus load_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training loop.

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 32;
  double lr = 0;  // peak; 0 selects learning_rate(depth, batch tokens)
  double warmup_fraction = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: no periodic evaluation
  std::size_t eval_episodes = 256;
  double target_accuracy = 0;  // stop early once periodic evaluation reaches it (0: never)
  double time_budget_s = 0;    // stop early after this much wall time (0: unlimited)
  std::function<void(std::size_t step, double loss, double lr)> on_step;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

struct EvalPoint {
  std::size_t step = 0;
  double accuracy = 0;
  double stderr_ = 0;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  std::vector<TraceRow> trace;
  std::vector<EvalPoint> evals;
  std::size_t steps_done = 0;
  double seconds = 0;
  std::string stop_reason;  // "steps", "target", "time"
};

// Task mode: loss is the cross-entropy over answer positions only.
template <typename T>
TrainResult<T> train(const ModelConfig& cfg, const TaskSpec& task, const TrainConfig& tc);
// Corpus mode: full-sequence cross-entropy on random windows of the corpus.
template <typename T>
TrainResult<T> train(const ModelConfig& cfg, const Corpus& corpus, std::size_t sequence_length,
                     const TrainConfig& tc);

// The run's LR at a step: peak * lr_schedule(step, steps, warmup).
double train_lr(const TrainConfig& tc, const ModelConfig& cfg, std::size_t sequence_length, std::size_t step);

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

struct RecallResult {
  double accuracy = 0;
  double stderr_ = 0;
  std::size_t episodes = 0;
  std::size_t correct = 0;
};

// Binomial standard error sqrt(p (1 - p) / n).
RecallResult recall_result(std::size_t correct, std::size_t n);

// Exact match of the teacher-forced argmax over the whole answer span.
// Evaluation episodes are drawn from a stream disjoint from training.
template <typename T>
RecallResult evaluate_recall(const Model<T>& model, const TaskSpec& task, std::size_t n_episodes);

// Episode index offset used for evaluation draws.
inline constexpr std::uint64_t kEvalEpisodeOffset = 1ull << 40;

}  // namespace sambay
