#include "sambay/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "sambay/ops.hpp"

namespace sambay {

template <typename T>
OptimState<T> make_optim_state(const Model<T>& model, const MuPPlan& plan) {
  OptimState<T> o;
  o.beta1 = plan.beta1;
  o.beta2 = plan.beta2;
  o.eps = plan.eps;
  for (std::size_t i = 0; i < model.specs().size(); ++i) {
    const auto& spec = model.specs()[i];
    const std::size_t n = model.params()[i].numel();
    o.m.emplace_back(n, T{0});
    o.v.emplace_back(n, T{0});
    o.groups.push_back(spec.group);
    o.lr_multiplier.push_back(lr_multiplier_for(plan, spec));
    o.weight_decay.push_back(weight_decay_for(plan, spec));
  }
  return o;
}

template <typename T>
void adamw_step(std::span<Tensor<T>> params, const std::vector<std::vector<T>>& grads, OptimState<T>& opt,
                double lr) {
  if (!(lr >= 0)) throw ConfigError("adamw_step: lr must be >= 0");
  if (params.size() != grads.size() || params.size() != opt.m.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(opt.m.size()) + " moment buffers");
  }
  ++opt.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const auto& g = grads[i];
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    if (g.size() != p.size() || m.size() != p.size()) {
      throw ShapeError("adamw_step: gradient " + std::to_string(i) + " has " + std::to_string(g.size()) +
                       " values for a parameter of " + std::to_string(p.size()));
    }
    const double lr_g = lr * opt.lr_multiplier[i];
    const double wd = opt.weight_decay[i];
    const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double x = p[j];
      if (wd != 0) x *= 1.0 - lr_g * wd;
      x -= lr_g * mhat / (std::sqrt(vhat) + opt.eps);
      p[j] = static_cast<T>(x);
    }
  }
}

template <typename T>
double clip_grad_norm(std::vector<std::vector<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& x : g) x *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::string task_name(TaskKind k) {
  switch (k) {
    case TaskKind::PhonebookMini: return "phonebook_mini";
    case TaskKind::AssociativeRecall: return "associative_recall";
    case TaskKind::Copy: return "copy";
  }
  return "?";
}

TaskKind parse_task(const std::string& s) {
  if (s == "phonebook_mini" || s == "phonebook") return TaskKind::PhonebookMini;
  if (s == "associative_recall" || s == "recall") return TaskKind::AssociativeRecall;
  if (s == "copy") return TaskKind::Copy;
  throw ConfigError("unknown task \"" + s + "\" (phonebook_mini, associative_recall, copy)");
}

namespace {

constexpr int kPad = 0, kQuery = 1, kSep = 2, kEnd = 3, kFirstContent = 4;

struct Alphabet {
  int lo = kFirstContent;
  int size = 0;
};

// Keys and values for phonebook records use disjoint halves of the content
// range (names and digits); recall and copy use the whole range.
std::pair<Alphabet, Alphabet> alphabets(const TaskSpec& s) {
  const int content = static_cast<int>(s.vocab_size) - kFirstContent;
  if (s.kind == TaskKind::PhonebookMini) {
    const int half = content / 2;
    return {{kFirstContent, half}, {kFirstContent + half, content - half}};
  }
  return {{kFirstContent, content}, {kFirstContent, content}};
}

double space(const Alphabet& a, std::size_t len) {
  return std::pow(static_cast<double>(a.size), static_cast<double>(len));
}

std::vector<std::vector<int>> distinct_strings(const Alphabet& a, std::size_t len, std::size_t n,
                                               std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, a.size - 1);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> out;
  while (out.size() < n) {
    std::vector<int> s(len);
    for (auto& x : s) x = a.lo + pick(rng);
    if (seen.insert(s).second) out.push_back(std::move(s));
  }
  return out;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::size_t TaskSpec::min_length() const {
  switch (kind) {
    case TaskKind::AssociativeRecall: return n_pairs * (key_len + value_len) + 1 + key_len + value_len;
    case TaskKind::PhonebookMini: return n_pairs * (key_len + value_len + 2) + 1 + key_len + 1 + value_len;
    case TaskKind::Copy: return 2 * n_pairs + 1;
  }
  return 0;
}

void TaskSpec::validate() const {
  if (vocab_size < kFirstContent + 2) throw ConfigError("task: vocab_size must be >= 6");
  if (n_pairs == 0) throw ConfigError("task: n_pairs must be >= 1");
  if (kind != TaskKind::Copy && (key_len == 0 || value_len == 0)) {
    throw ConfigError("task: key_len and value_len must be >= 1");
  }
  if (min_length() > sequence_length) {
    throw ConfigError("task: " + task_name(kind) + " with " + std::to_string(n_pairs) + " pairs needs " +
                      std::to_string(min_length()) + " tokens, sequence_length is " +
                      std::to_string(sequence_length));
  }
  if (kind != TaskKind::Copy) {
    const auto [ka, va] = alphabets(*this);
    if (space(ka, key_len) < static_cast<double>(n_pairs) || space(va, value_len) < static_cast<double>(n_pairs)) {
      throw ConfigError("task: vocabulary too small for " + std::to_string(n_pairs) +
                        " distinct keys and values");
    }
  }
}

Episode make_task(const TaskSpec& spec, std::uint64_t episode) {
  spec.validate();
  std::mt19937_64 rng(mix(spec.seed, episode));
  Episode e;
  e.tokens.reserve(spec.sequence_length);
  std::vector<int> query;  // marker and prompt; the answer follows
  if (spec.kind == TaskKind::Copy) {
    const auto [a, unused] = alphabets(spec);
    std::uniform_int_distribution<int> pick(0, a.size - 1);
    for (std::size_t i = 0; i < spec.n_pairs; ++i) e.answer.push_back(a.lo + pick(rng));
    e.tokens = e.answer;
    query = {kQuery};
  } else {
    const auto [ka, va] = alphabets(spec);
    const auto keys = distinct_strings(ka, spec.key_len, spec.n_pairs, rng);
    const auto values = distinct_strings(va, spec.value_len, spec.n_pairs, rng);
    const bool book = spec.kind == TaskKind::PhonebookMini;
    for (std::size_t i = 0; i < spec.n_pairs; ++i) {
      e.tokens.insert(e.tokens.end(), keys[i].begin(), keys[i].end());
      if (book) e.tokens.push_back(kSep);
      e.tokens.insert(e.tokens.end(), values[i].begin(), values[i].end());
      if (book) e.tokens.push_back(kEnd);
    }
    const std::size_t q = std::uniform_int_distribution<std::size_t>(0, spec.n_pairs - 1)(rng);
    query.push_back(kQuery);
    query.insert(query.end(), keys[q].begin(), keys[q].end());
    if (book) query.push_back(kSep);
    e.answer = values[q];
  }
  const std::size_t tail = query.size() + e.answer.size();
  e.tokens.resize(spec.sequence_length - tail, kPad);
  e.tokens.insert(e.tokens.end(), query.begin(), query.end());
  const std::size_t first = e.tokens.size();
  e.tokens.insert(e.tokens.end(), e.answer.begin(), e.answer.end());
  e.mask.assign(spec.sequence_length, 0);
  for (std::size_t j = 0; j < e.answer.size(); ++j) {
    const int p = static_cast<int>(first + j) - 1;
    e.answer_positions.push_back(p);
    e.mask[static_cast<std::size_t>(p)] = 1;
  }
  return e;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  Corpus c;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    c.tokens.push_back(256);
    for (unsigned char ch : line) c.tokens.push_back(ch);
    c.tokens.push_back(257);
  }
  if (c.tokens.empty()) throw IoError("corpus " + path.string() + " is empty");
  return c;
}

// ---------------------------------------------------------------------------

double train_lr(const TrainConfig& tc, const ModelConfig& cfg, std::size_t sequence_length, std::size_t step) {
  const double peak = tc.lr > 0 ? tc.lr
                                : learning_rate(static_cast<double>(cfg.depth),
                                                static_cast<double>(tc.batch * sequence_length));
  const auto warm = static_cast<std::size_t>(std::llround(tc.warmup_fraction * static_cast<double>(tc.steps)));
  return peak * lr_schedule(step, tc.steps, warm);
}

RecallResult recall_result(std::size_t correct, std::size_t n) {
  if (n == 0) throw ConfigError("evaluate_recall: n_episodes must be >= 1");
  RecallResult r;
  r.episodes = n;
  r.correct = correct;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.stderr_ = std::sqrt(r.accuracy * (1 - r.accuracy) / static_cast<double>(n));
  return r;
}

template <typename T>
RecallResult evaluate_recall(const Model<T>& model, const TaskSpec& task, std::size_t n_episodes) {
  if (n_episodes == 0) throw ConfigError("evaluate_recall: n_episodes must be >= 1");
  NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    const Episode e = make_task(task, kEvalEpisodeOffset + i);
    const auto logits = model.forward(e.tokens, e.answer_positions);
    const std::size_t v = logits.cols();
    bool ok = true;
    for (std::size_t j = 0; j < e.answer.size() && ok; ++j) {
      const auto row = logits.data().subspan(j * v, v);
      const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
      ok = arg == e.answer[j];
    }
    correct += ok;
  }
  return recall_result(correct, n_episodes);
}

namespace {

struct Batch {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> targets;
};

template <typename T>
TrainResult<T> train_loop(const ModelConfig& cfg, std::size_t seq_len, const TrainConfig& tc,
                          const std::function<Batch(std::size_t step, std::size_t b)>& batch_item,
                          const TaskSpec* task) {
  if (tc.steps == 0 || tc.batch == 0) throw ConfigError("train: steps and batch must be >= 1");
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  TrainResult<T> r;
  r.model = Model<T>::init(cfg, tc.seed);
  r.model.set_requires_grad(true);
  std::vector<Tensor<T>> params = r.model.params();
  auto opt = make_optim_state(r.model, mup_plan(cfg));
  std::vector<std::vector<T>> grads(params.size());
  r.stop_reason = "steps";

  for (std::size_t step = 0; step < tc.steps; ++step) {
    double loss_sum = 0;
    for (std::size_t b = 0; b < tc.batch; ++b) {
      const Batch item = batch_item(step, b);
      Tensor<T> loss;
      try {
        loss = cross_entropy(r.model.forward(item.tokens, item.positions), item.targets);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NumericError& e) {
        throw DivergenceError("train: non-finite values at step " + std::to_string(step) + " (lr " +
                              std::to_string(train_lr(tc, cfg, seq_len, step)) + "): " + e.what());
      }
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l)) {
        std::ostringstream msg;
        msg << "train: loss is " << l << " at step " << step << " (sequence " << b << " of the batch, lr "
            << train_lr(tc, cfg, seq_len, step) << ")";
        throw DivergenceError(msg.str());
      }
      loss_sum += l;
      backward(scale(loss, static_cast<T>(1.0 / static_cast<double>(tc.batch))));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto g = params[i].grad();
      if (params[i].has_grad()) grads[i].assign(g.begin(), g.end());
      else grads[i].assign(params[i].numel(), T{0});
      params[i].zero_grad();
    }
    const double gnorm = clip_grad_norm(grads, tc.clip_norm);
    if (!std::isfinite(gnorm)) {
      throw DivergenceError("train: gradient norm is " + std::to_string(gnorm) + " at step " + std::to_string(step));
    }
    const double lr = train_lr(tc, cfg, seq_len, step);
    adamw_step<T>(params, grads, opt, lr);
    const double loss = loss_sum / static_cast<double>(tc.batch);
    r.trace.push_back({step, loss, lr, gnorm});
    r.steps_done = step + 1;
    if (tc.on_step) tc.on_step(step, loss, lr);

    const bool last = step + 1 == tc.steps;
    if (task && tc.eval_every && ((step + 1) % tc.eval_every == 0 || last)) {
      const auto acc = evaluate_recall(r.model, *task, tc.eval_episodes);
      r.evals.push_back({step + 1, acc.accuracy, acc.stderr_});
      if (tc.target_accuracy > 0 && acc.accuracy >= tc.target_accuracy) {
        r.stop_reason = "target";
        break;
      }
    }
    if (tc.time_budget_s > 0 && elapsed() > tc.time_budget_s && !last) {
      r.stop_reason = "time";
      break;
    }
  }
  r.model.set_requires_grad(false);
  r.seconds = elapsed();
  return r;
}

}  // namespace

template <typename T>
TrainResult<T> train(const ModelConfig& cfg, const TaskSpec& task, const TrainConfig& tc) {
  task.validate();
  if (task.vocab_size > cfg.vocab_size) {
    throw ConfigError("train: task vocabulary " + std::to_string(task.vocab_size) + " exceeds model vocabulary " +
                      std::to_string(cfg.vocab_size));
  }
  auto item = [&](std::size_t step, std::size_t b) {
    Episode e = make_task(task, step * tc.batch + b);
    return Batch{std::move(e.tokens), std::move(e.answer_positions), std::move(e.answer)};
  };
  return train_loop<T>(cfg, task.sequence_length, tc, item, &task);
}

template <typename T>
TrainResult<T> train(const ModelConfig& cfg, const Corpus& corpus, std::size_t sequence_length,
                     const TrainConfig& tc) {
  if (sequence_length < 2) throw ConfigError("train: sequence_length must be >= 2");
  if (corpus.tokens.size() < sequence_length + 1) {
    throw ConfigError("train: corpus has " + std::to_string(corpus.tokens.size()) + " tokens, need at least " +
                      std::to_string(sequence_length + 1));
  }
  if (cfg.vocab_size < 258) throw ConfigError("train: corpus mode needs vocab_size >= 258");
  auto item = [&](std::size_t step, std::size_t b) {
    std::mt19937_64 rng(mix(tc.seed, step * tc.batch + b));
    const std::size_t start =
        std::uniform_int_distribution<std::size_t>(0, corpus.tokens.size() - sequence_length - 1)(rng);
    Batch out;
    out.tokens.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                      corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start + sequence_length));
    out.targets.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start + 1),
                       corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start + sequence_length + 1));
    return out;
  };
  return train_loop<T>(cfg, sequence_length, tc, item, nullptr);
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss,lr,grad_norm\n";
  out.precision(17);
  for (const auto& r : trace) out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

#define SAMBAY_INSTANTIATE_TRAINING(T)                                                                    \
  template OptimState<T> make_optim_state<T>(const Model<T>&, const MuPPlan&);                           \
  template void adamw_step<T>(std::span<Tensor<T>>, const std::vector<std::vector<T>>&, OptimState<T>&, \
                              double);                                                                   \
  template double clip_grad_norm<T>(std::vector<std::vector<T>>&, double);                               \
  template RecallResult evaluate_recall<T>(const Model<T>&, const TaskSpec&, std::size_t);               \
  template TrainResult<T> train<T>(const ModelConfig&, const TaskSpec&, const TrainConfig&);            \
  template TrainResult<T> train<T>(const ModelConfig&, const Corpus&, std::size_t, const TrainConfig&);

SAMBAY_INSTANTIATE_TRAINING(float)
SAMBAY_INSTANTIATE_TRAINING(double)

}  // namespace sambay
