// sambay: command-line front end.
//
// Exit codes: 0 ok, 1 internal error, 2 configuration / usage error,
// 3 numeric failure, 4 training divergence, 5 file I/O error.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "sambay/checkpoint.hpp"
#include "sambay/runtime.hpp"
#include "sambay/scaling.hpp"
#include "sambay/training.hpp"

using namespace sambay;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kNumeric = 3, kDivergence = 4, kIo = 5 };

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string millions(double n) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << n / 1e6 << "M";
  return s.str();
}

// Left-aligned text table.
class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }
  void print(std::ostream& os) const {
    std::vector<std::size_t> w;
    for (const auto& r : rows_)
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (w.size() <= i) w.push_back(0);
        w[i] = std::max(w[i], r[i].size());
      }
    for (std::size_t k = 0; k < rows_.size(); ++k) {
      for (std::size_t i = 0; i < rows_[k].size(); ++i) {
        os << std::left << std::setw(static_cast<int>(w[i] + 2)) << rows_[k][i];
      }
      os << "\n";
      if (k == 0) {
        std::size_t total = 0;
        for (auto x : w) total += x + 2;
        os << std::string(total, '-') << "\n";
      }
    }
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

template <typename V>
std::string str(V v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// Run files. A run file (and every manifest) is a JSON object with optional
// sections "model", "task", "train", "sampler" and an optional "seed"; the
// remaining manifest keys are informational.

struct RunFile {
  json model, task, train, sampler;
  std::optional<std::uint64_t> seed;
};

RunFile load_run_file(const std::string& path) {
  RunFile r;
  if (path.empty()) return r;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config " + path + ": expected a JSON object");
  static const std::set<std::string> known{"model",   "task",    "train",    "sampler", "seed",   "command",
                                           "version", "started", "finished", "outputs", "argv",   "precision",
                                           "options", "format"};
  const bool bare_model = !j.contains("model") && !j.contains("task") && !j.contains("train");
  if (bare_model) {
    r.model = j;
    return r;
  }
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("config " + path + ": unknown section \"" + k + "\"");
  }
  if (j.contains("model")) r.model = j["model"];
  if (j.contains("task")) r.task = j["task"];
  if (j.contains("train")) r.train = j["train"];
  if (j.contains("sampler")) r.sampler = j["sampler"];
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ConfigError("config " + path + ": seed must be a non-negative integer");
    r.seed = j["seed"].get<std::uint64_t>();
  }
  return r;
}

template <typename V>
void read_key(const json& j, const char* key, V& dst, const std::string& section) {
  if (!j.is_object() || !j.contains(key)) return;
  try {
    dst = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(section + ": key \"" + key + "\" has the wrong type");
  }
}

void check_keys(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (j.is_null()) return;
  if (!j.is_object()) throw ConfigError(section + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(section + ": unknown key \"" + k + "\"");
}

json task_to_json(const TaskSpec& t) {
  return {{"kind", task_name(t.kind)},       {"vocab_size", t.vocab_size}, {"n_pairs", t.n_pairs},
          {"key_len", t.key_len},            {"value_len", t.value_len},   {"sequence_length", t.sequence_length},
          {"seed", t.seed}};
}

TaskSpec task_from_json(const json& j) {
  check_keys(j, {"kind", "vocab_size", "n_pairs", "key_len", "value_len", "sequence_length", "seed"}, "task");
  TaskSpec t;
  std::string kind = task_name(t.kind);
  read_key(j, "kind", kind, "task");
  t.kind = parse_task(kind);
  read_key(j, "vocab_size", t.vocab_size, "task");
  read_key(j, "n_pairs", t.n_pairs, "task");
  read_key(j, "key_len", t.key_len, "task");
  read_key(j, "value_len", t.value_len, "task");
  read_key(j, "sequence_length", t.sequence_length, "task");
  read_key(j, "seed", t.seed, "task");
  return t;
}

struct TrainSection {
  TrainConfig tc;
  std::string corpus;
  std::size_t corpus_sequence_length = 256;
};

json train_to_json(const TrainSection& s) {
  const auto& t = s.tc;
  json j{{"steps", t.steps},
         {"batch", t.batch},
         {"lr", t.lr},
         {"warmup_fraction", t.warmup_fraction},
         {"clip_norm", t.clip_norm},
         {"eval_every", t.eval_every},
         {"eval_episodes", t.eval_episodes},
         {"target_accuracy", t.target_accuracy},
         {"time_budget_s", t.time_budget_s}};
  if (!s.corpus.empty()) {
    j["corpus"] = s.corpus;
    j["corpus_sequence_length"] = s.corpus_sequence_length;
  }
  return j;
}

TrainSection train_from_json(const json& j) {
  check_keys(j,
             {"steps", "batch", "lr", "warmup_fraction", "clip_norm", "eval_every", "eval_episodes",
              "target_accuracy", "time_budget_s", "corpus", "corpus_sequence_length"},
             "train");
  TrainSection s;
  auto& t = s.tc;
  read_key(j, "steps", t.steps, "train");
  read_key(j, "batch", t.batch, "train");
  read_key(j, "lr", t.lr, "train");
  read_key(j, "warmup_fraction", t.warmup_fraction, "train");
  read_key(j, "clip_norm", t.clip_norm, "train");
  read_key(j, "eval_every", t.eval_every, "train");
  read_key(j, "eval_episodes", t.eval_episodes, "train");
  read_key(j, "target_accuracy", t.target_accuracy, "train");
  read_key(j, "time_budget_s", t.time_budget_s, "train");
  read_key(j, "corpus", s.corpus, "train");
  read_key(j, "corpus_sequence_length", s.corpus_sequence_length, "train");
  return s;
}

json sampler_to_json(const Sampler& s) {
  return {{"kind", s.kind == Sampler::Kind::Greedy ? "greedy" : "top_p"},
          {"temperature", s.temperature},
          {"top_p", s.top_p},
          {"seed", s.seed}};
}

Sampler sampler_from_json(const json& j) {
  check_keys(j, {"kind", "temperature", "top_p", "seed"}, "sampler");
  Sampler s;
  std::string kind = "greedy";
  read_key(j, "kind", kind, "sampler");
  if (kind == "greedy") s.kind = Sampler::Kind::Greedy;
  else if (kind == "top_p" || kind == "top-p") s.kind = Sampler::Kind::TopP;
  else throw ConfigError("sampler: kind must be greedy or top_p");
  read_key(j, "temperature", s.temperature, "sampler");
  read_key(j, "top_p", s.top_p, "sampler");
  read_key(j, "seed", s.seed, "sampler");
  return s;
}

// ---------------------------------------------------------------------------

struct Globals {
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::string out;
  std::string config;
  std::vector<std::string> argv;
};

struct Manifest {
  json j;
  std::vector<std::string> outputs;

  Manifest(const std::string& command, const Globals& g) {
    j["format"] = "sambay-run";
    j["command"] = command;
    j["seed"] = g.seed;
    j["precision"] = g.precision;
    j["version"] = SAMBAY_GIT_HASH;
    j["started"] = now_iso();
    j["argv"] = g.argv;
  }
  void write(const Globals& g) {
    if (g.out.empty()) return;
    j["finished"] = now_iso();
    j["outputs"] = outputs;
    std::ofstream out(fs::path(g.out) / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (fs::path(g.out) / "manifest.json").string());
    out << j.dump(2) << "\n";
  }
};

void ensure_out(const Globals& g) {
  if (g.out.empty()) return;
  std::error_code ec;
  fs::create_directories(g.out, ec);
  if (ec) throw IoError("cannot create " + g.out + ": " + ec.message());
}

void write_json(const Globals& g, Manifest& m, const std::string& name, const json& j) {
  if (g.out.empty()) return;
  std::ofstream out(fs::path(g.out) / name, std::ios::trunc);
  if (!out) throw IoError("cannot write " + (fs::path(g.out) / name).string());
  out << j.dump(2) << "\n";
  m.outputs.push_back(name);
}

// Model flags shared by train / generate / bench.
struct ModelFlags {
  std::string arch;
  std::size_t depth = 0, width = 0, vocab = 0, window = 0;
  std::string parameterization;

  void add(CLI::App* c) {
    c->add_option("--arch", arch, "Architecture (overrides the config file)");
    c->add_option("--depth", depth, "Number of layers");
    c->add_option("--width", width, "Model width");
    c->add_option("--vocab", vocab, "Vocabulary size");
    c->add_option("--window", window, "Sliding-window size");
    c->add_option("--param", parameterization, "Parameterization: sp, mup, mupp");
  }
  ModelConfig resolve(const json& file_model) const {
    json j = file_model.is_null() ? json::object() : file_model;
    if (!arch.empty()) j["arch"] = arch_name(parse_arch(arch));
    if (depth) j["depth"] = depth;
    if (width) j["width"] = width;
    if (vocab) j["vocab_size"] = vocab;
    if (window) j["window"] = window;
    if (!parameterization.empty()) j["parameterization"] = parameterization;
    return config_from_json(j);
  }
};

struct TaskFlags {
  std::string kind;
  std::size_t pairs = 0, key_len = 0, value_len = 0, seq_len = 0, vocab = 0;

  void add(CLI::App* c) {
    c->add_option("--task", kind, "Task: associative_recall, phonebook_mini, copy");
    c->add_option("--pairs", pairs, "Key-value pairs (copy: tokens to copy)");
    c->add_option("--key-len", key_len, "Tokens per key");
    c->add_option("--value-len", value_len, "Tokens per value");
    c->add_option("--seq-len", seq_len, "Sequence length");
    c->add_option("--task-vocab", vocab, "Task vocabulary size (default: model vocabulary, at most 64)");
  }
  TaskSpec resolve(const json& file_task, const ModelConfig& cfg, std::uint64_t seed) const {
    TaskSpec t = task_from_json(file_task);
    if (file_task.is_null() || !file_task.contains("vocab_size")) t.vocab_size = std::min<std::size_t>(cfg.vocab_size, 64);
    if (file_task.is_null() || !file_task.contains("seed")) t.seed = seed;
    if (!kind.empty()) t.kind = parse_task(kind);
    if (pairs) t.n_pairs = pairs;
    if (key_len) t.key_len = key_len;
    if (value_len) t.value_len = value_len;
    if (seq_len) t.sequence_length = seq_len;
    if (vocab) t.vocab_size = vocab;
    t.validate();
    return t;
  }
};

// ---------------------------------------------------------------------------
// plan

struct PlanArgs {
  std::string arch;
  std::size_t depth = 0;
  std::string parameterization = "mupp";
};

int cmd_plan(const Globals& g, const PlanArgs& a) {
  ModelConfig cfg;
  bool full_scale = true;
  if (!a.arch.empty()) {
    if (a.depth == 0) throw ConfigError("plan: depth is required with an architecture");
    cfg = full_scale_config(parse_arch(a.arch), a.depth);
    cfg.parameterization = parse_parameterization(a.parameterization);
  } else {
    const RunFile rf = load_run_file(g.config);
    if (rf.model.is_null()) throw ConfigError("plan: give ARCH DEPTH or --config");
    cfg = config_from_json(rf.model);
    full_scale = false;
  }
  cfg.validate();
  ensure_out(g);
  Manifest man("plan", g);
  const LayerPlan plan = build_layer_plan(cfg);
  const ParamCount pc = count_params(cfg);
  const MuPPlan mp = mup_plan(cfg);
  const auto specs = enumerate_params(cfg);
  std::ostream& os = std::cout;

  os << arch_name(cfg.arch) << "  d=" << cfg.depth << "  " << parameterization_name(cfg.parameterization)
     << (full_scale ? "  (full scale)" : "  (from config)") << "\n";
  if (full_scale) os << "α=" << cfg.resolved_aspect_ratio() << "  ";
  os << "width=" << cfg.w() << "  attn_width=" << cfg.w_attn() << "  heads=" << cfg.n_heads() << "x" << cfg.d_head()
     << "  kv_heads=" << cfg.n_kv_heads() << "  mlp=" << cfg.w_mlp() << "  window=" << cfg.window
     << "  vocab=" << cfg.vocab_size << "\n\n";

  Table layers({"layer", "mixer", "decoder", "kv", "tap", "params"});
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i) + ".";
    double n = 0;
    for (const auto& s : specs)
      if (s.name.rfind(prefix, 0) == 0) n += static_cast<double>(numel(s.shape));
    const auto& l = plan.layers[i];
    std::string kv = l.kv_producer ? "producer" : (l.mixer == MixerKind::Cross ? "shared" : "");
    if (l.mixer == MixerKind::SWA || (l.mixer == MixerKind::Full && !l.kv_producer)) kv = "own";
    layers.add({std::to_string(i), mixer_name(l.mixer), i < plan.self_decoder_layers ? "self" : "cross", kv,
                plan.tap_layer == i ? memory_source_name(plan.tap_source) : "", millions(n)});
  }
  layers.print(os);

  os << "\nparameters\n";
  Table counts({"component", "closed form", "exact"});
  counts.add({"attention", millions(pc.closed.attn), millions(pc.exact.attn)});
  counts.add({"mamba", millions(pc.closed.mamba), millions(pc.exact.mamba)});
  counts.add({"gmu", millions(pc.closed.gmu), millions(pc.exact.gmu)});
  counts.add({"mlp", millions(pc.closed.mlp), millions(pc.exact.mlp)});
  counts.add({"norm", millions(pc.closed.norm), millions(pc.exact.norm)});
  counts.add({"non-embedding", millions(pc.closed.total_nonembed), millions(pc.exact.total_nonembed)});
  counts.add({"embedding", millions(pc.embed), millions(pc.embed)});
  counts.add({"total", millions(pc.closed.total_nonembed + pc.embed), millions(pc.exact.total_nonembed + pc.embed)});
  counts.print(os);

  os << "\nmultipliers: residual=" << mp.residual_multiplier << "  logit=" << mp.logit_multiplier
     << "  attention_scale=" << mp.attention_scale << "\n";
  Table groups({"group", "lr multiplier", "weight decay", "weight multiplier", "init"});
  for (const auto& gp : mp.groups) {
    groups.add({group_name(gp.group), str(gp.lr_multiplier), str(gp.weight_decay), str(gp.weight_multiplier), gp.init});
  }
  groups.print(os);

  json out{{"config", config_to_json(cfg)},
           {"layers", json::array()},
           {"params",
            {{"closed_nonembed", pc.closed.total_nonembed},
             {"exact_nonembed", pc.exact.total_nonembed},
             {"embed", pc.embed}}},
           {"multipliers",
            {{"residual", mp.residual_multiplier},
             {"logit", mp.logit_multiplier},
             {"attention_scale", mp.attention_scale}}},
           {"groups", json::array()}};
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    out["layers"].push_back({{"mixer", mixer_name(plan.layers[i].mixer)}, {"kv_producer", plan.layers[i].kv_producer}});
  }
  for (const auto& gp : mp.groups) {
    out["groups"].push_back({{"group", group_name(gp.group)},
                             {"lr_multiplier", gp.lr_multiplier},
                             {"weight_decay", gp.weight_decay},
                             {"weight_multiplier", gp.weight_multiplier},
                             {"init", gp.init}});
  }
  if (full_scale) {
    const double lr = learning_rate(static_cast<double>(cfg.depth));
    const double tokens = tokens_for_depth(cfg.depth, cfg.arch);
    os << "\nschedule: lr=" << std::setprecision(3) << lr << "  tokens=" << std::fixed << std::setprecision(1)
       << tokens / 1e9 << "B  batch=" << std::setprecision(0) << BaseConstants::batch0
       << " tokens  flops(6NT)=" << std::scientific << std::setprecision(3)
       << flops_estimate(pc.closed.total_nonembed, tokens) << std::defaultfloat << "\n";
    out["aspect_ratio"] = cfg.resolved_aspect_ratio();
    out["schedule"] = {{"lr", lr}, {"tokens", tokens}, {"batch_tokens", BaseConstants::batch0}};
  }
  man.j["model"] = config_to_json(cfg);
  write_json(g, man, "plan.json", out);
  man.write(g);
  return kOk;
}

// ---------------------------------------------------------------------------
// solve

int cmd_solve(const Globals& g, const std::vector<std::string>& names) {
  ensure_out(g);
  Manifest man("solve", g);
  std::vector<IsoPolynomial> polys;
  if (names.empty()) polys = iso_polynomials();
  for (const auto& n : names) polys.push_back(iso_polynomial(n));
  Table t({"architecture", "c1", "c2", "root", "α"});
  json out = json::array();
  for (const auto& p : polys) {
    const auto a = solve_aspect_ratio(p);
    std::ostringstream root;
    root << std::fixed << std::setprecision(3) << iso_root(p);
    t.add({p.name, str(p.c1), str(p.c2), root.str(), "α=" + std::to_string(a)});
    out.push_back({{"name", p.name}, {"c1", p.c1}, {"c2", p.c2}, {"root", iso_root(p)}, {"aspect_ratio", a}});
  }
  t.print(std::cout);
  write_json(g, man, "solve.json", out);
  man.write(g);
  return kOk;
}

// ---------------------------------------------------------------------------
// fit

std::vector<std::pair<double, double>> read_points(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::pair<double, double>> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    for (char& c : line)
      if (c == ';' || c == '\t') c = ',';
    std::stringstream ss(line);
    std::string a, b;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    try {
      std::size_t ia = 0, ib = 0;
      const double d = std::stod(a, &ia);
      const double l = std::stod(b, &ib);
      pts.emplace_back(d, l);
    } catch (const std::exception&) {
      if (pts.empty() && lineno == 1) continue;  // header
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected two numeric columns");
    }
  }
  return pts;
}

int cmd_fit(const Globals& g, const std::string& csv, const std::string& axis_name) {
  FitAxis axis = FitAxis::Flops;
  if (axis_name == "tokens") axis = FitAxis::Tokens;
  else if (axis_name != "flops") throw ConfigError("fit: --axis must be flops or tokens");
  const auto pts = read_points(csv);
  ensure_out(g);
  Manifest man("fit", g);
  man.j["options"] = {{"csv", csv}, {"axis", axis_name}};
  auto report = [&](const PowerLawFit& f, bool ok) {
    std::cout << std::setprecision(10) << "L = A * D^-b + C  (" << axis_name << ", " << pts.size() << " points)\n"
              << "A=" << f.A << "  b=" << f.b << "  C=" << f.C << "  R^2=" << f.r_squared << "  sse=" << f.sse
              << "  iterations=" << f.iterations << (ok ? "" : "  [did not converge]") << "\n";
    Table t({"D", "L", "fit", "residual"});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      t.add({str(pts[i].first), str(pts[i].second), str(f.predict(pts[i].first)),
             i < f.residuals.size() ? str(f.residuals[i]) : ""});
    }
    t.print(std::cout);
    write_json(g, man, "fit.json",
               {{"A", f.A}, {"b", f.b}, {"C", f.C}, {"r_squared", f.r_squared}, {"sse", f.sse},
                {"iterations", f.iterations}, {"converged", ok}, {"residuals", f.residuals}});
    man.write(g);
  };
  try {
    report(fit_power_law(pts, axis), true);
  } catch (const FitError& e) {
    report(e.best(), false);
    throw;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// train / eval / generate / bench

struct TrainFlags {
  std::size_t steps = 0, batch = 0, eval_every = 0, eval_episodes = 0, corpus_seq_len = 0;
  double lr = -1, warmup = -1, clip = -1, target = -1, time_budget = -1;
  std::string corpus;

  void add(CLI::App* c) {
    c->add_option("--steps", steps, "Optimizer steps");
    c->add_option("--batch", batch, "Sequences per step");
    c->add_option("--lr", lr, "Peak learning rate (0: depth formula at the actual batch)");
    c->add_option("--warmup", warmup, "Warmup fraction of the steps");
    c->add_option("--clip", clip, "Global gradient-norm clip (0 disables)");
    c->add_option("--eval-every", eval_every, "Evaluate recall every N steps");
    c->add_option("--eval-episodes", eval_episodes, "Episodes per evaluation");
    c->add_option("--target", target, "Stop once evaluation accuracy reaches this");
    c->add_option("--time-budget", time_budget, "Stop after this many seconds");
    c->add_option("--corpus", corpus, "Train on a text file (byte tokens) instead of a task");
    c->add_option("--corpus-seq-len", corpus_seq_len, "Window length in corpus mode");
  }
  TrainSection resolve(const json& file_train, std::uint64_t seed) const {
    TrainSection s = train_from_json(file_train);
    auto& t = s.tc;
    if (steps) t.steps = steps;
    if (batch) t.batch = batch;
    if (lr >= 0) t.lr = lr;
    if (warmup >= 0) t.warmup_fraction = warmup;
    if (clip >= 0) t.clip_norm = clip;
    if (eval_every) t.eval_every = eval_every;
    if (eval_episodes) t.eval_episodes = eval_episodes;
    if (target >= 0) t.target_accuracy = target;
    if (time_budget >= 0) t.time_budget_s = time_budget;
    if (!corpus.empty()) s.corpus = corpus;
    if (corpus_seq_len) s.corpus_sequence_length = corpus_seq_len;
    t.seed = seed;
    return s;
  }
};

template <typename T>
int run_train(const Globals& g, const ModelConfig& cfg, const TaskSpec& task, const TrainSection& ts, bool quiet) {
  ensure_out(g);
  Manifest man("train", g);
  man.j["model"] = config_to_json(cfg);
  man.j["train"] = train_to_json(ts);
  if (ts.corpus.empty()) man.j["task"] = task_to_json(task);
  TrainConfig tc = ts.tc;
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 20);
  if (!quiet) {
    tc.on_step = [&](std::size_t s, double loss, double lr) {
      if (s % every == 0 || s + 1 == tc.steps) {
        std::cout << "step " << s << "  loss " << std::setprecision(5) << loss << "  lr " << lr << std::endl;
      }
    };
  }
  TrainResult<T> r = ts.corpus.empty()
                         ? train<T>(cfg, task, tc)
                         : train<T>(cfg, load_corpus(ts.corpus), ts.corpus_sequence_length, tc);
  std::cout << "done: " << r.steps_done << " steps in " << std::setprecision(4) << r.seconds << " s (" << r.stop_reason
            << "), final loss " << r.trace.back().loss << "\n";
  for (const auto& e : r.evals) std::cout << "eval step " << e.step << "  accuracy " << e.accuracy << " ± " << e.stderr_ << "\n";
  json result{{"steps_done", r.steps_done}, {"seconds", r.seconds}, {"stop_reason", r.stop_reason},
              {"final_loss", r.trace.back().loss}, {"evals", json::array()}};
  for (const auto& e : r.evals) result["evals"].push_back({{"step", e.step}, {"accuracy", e.accuracy}, {"stderr", e.stderr_}});
  if (!g.out.empty()) {
    save_model(fs::path(g.out) / "checkpoint", r.model, json{{"steps", r.steps_done}});
    man.outputs.push_back("checkpoint");
    write_trace_csv(fs::path(g.out) / "trace.csv", r.trace);
    man.outputs.push_back("trace.csv");
  }
  write_json(g, man, "result.json", result);
  man.write(g);
  return kOk;
}

template <typename T>
Model<T> model_for(const Globals& g, const std::string& checkpoint, const ModelFlags& mf, json* file_model = nullptr) {
  if (!checkpoint.empty()) {
    auto m = load_model<T>(checkpoint);
    if (file_model) *file_model = config_to_json(m.config());
    return m;
  }
  const RunFile rf = load_run_file(g.config);
  const ModelConfig cfg = mf.resolve(rf.model);
  if (file_model) *file_model = config_to_json(cfg);
  return Model<T>::init(cfg, g.seed);
}

template <typename T>
int run_eval(const Globals& g, const std::string& checkpoint, const ModelFlags& mf, const TaskFlags& tf,
             std::size_t episodes) {
  const RunFile rf = load_run_file(g.config);
  json mj;
  const auto m = model_for<T>(g, checkpoint, mf, &mj);
  const TaskSpec task = tf.resolve(rf.task, m.config(), rf.seed.value_or(g.seed));
  ensure_out(g);
  Manifest man("eval", g);
  man.j["model"] = mj;
  man.j["task"] = task_to_json(task);
  man.j["options"] = {{"checkpoint", checkpoint}, {"episodes", episodes}};
  const auto r = evaluate_recall(m, task, episodes);
  std::cout << task_name(task.kind) << ": accuracy " << r.accuracy << " ± " << r.stderr_ << " (" << r.correct << "/"
            << r.episodes << ")\n";
  write_json(g, man, "eval.json",
             {{"accuracy", r.accuracy}, {"stderr", r.stderr_}, {"correct", r.correct}, {"episodes", r.episodes}});
  man.write(g);
  return kOk;
}

std::vector<int> parse_token_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("--tokens: \"" + tok + "\" is not an integer");
    }
  }
  return out;
}

template <typename T>
int run_generate(const Globals& g, const std::string& checkpoint, const ModelFlags& mf, const std::string& prompt,
                 const std::string& token_list, std::size_t n, Sampler sampler, bool sampler_from_flags) {
  const RunFile rf = load_run_file(g.config);
  if (!sampler_from_flags && !rf.sampler.is_null()) sampler = sampler_from_json(rf.sampler);
  json mj;
  const auto m = model_for<T>(g, checkpoint, mf, &mj);
  std::vector<int> ids;
  if (!token_list.empty()) {
    ids = parse_token_list(token_list);
  } else {
    if (m.config().vocab_size < 257) throw ConfigError("generate: --prompt needs a byte vocabulary; use --tokens");
    ids.push_back(256);
    for (unsigned char c : prompt) ids.push_back(c);
  }
  for (int t : ids)
    if (t < 0 || static_cast<std::size_t>(t) >= m.config().vocab_size)
      throw ConfigError("generate: token " + std::to_string(t) + " outside the vocabulary");
  ensure_out(g);
  Manifest man("generate", g);
  man.j["model"] = mj;
  man.j["sampler"] = sampler_to_json(sampler);
  man.j["options"] = {{"checkpoint", checkpoint}, {"prompt", prompt}, {"tokens", token_list}, {"n", n}};
  const auto out = generate(m, ids, n, sampler);
  std::cout << "tokens:";
  for (int t : out) std::cout << " " << t;
  std::cout << "\n";
  std::string text;
  for (int t : out)
    if (t < 256) text.push_back(static_cast<char>(t));
  if (m.config().vocab_size >= 257) std::cout << "text: " << text << "\n";
  write_json(g, man, "generation.json", {{"prompt_tokens", ids}, {"tokens", out}});
  man.write(g);
  return kOk;
}

template <typename T>
int run_bench(const Globals& g, const std::string& checkpoint, const ModelFlags& mf, std::vector<std::size_t> positions,
              std::size_t reps) {
  json mj;
  const auto m = model_for<T>(g, checkpoint, mf, &mj);
  ensure_out(g);
  Manifest man("bench", g);
  man.j["model"] = mj;
  man.j["options"] = {{"positions", positions}, {"reps", reps}};
  const auto rows = bench(m, positions, reps, g.seed);
  Table t({"N", "ssm", "swa", "full", "cross", "gmu", "median ns"});
  std::ostringstream csv;
  csv << "position,ssm_reads,swa_reads,full_reads,cross_reads,gmu_reads,wall_ns\n";
  for (const auto& r : rows) {
    t.add({str(r.position), str(r.ssm_reads), str(r.swa_reads), str(r.full_reads), str(r.cross_reads),
           str(r.gmu_reads), str(std::llround(r.wall_ns))});
    csv << r.position << ',' << r.ssm_reads << ',' << r.swa_reads << ',' << r.full_reads << ',' << r.cross_reads << ','
        << r.gmu_reads << ',' << r.wall_ns << '\n';
  }
  std::cout << "floats read per decode step\n";
  t.print(std::cout);
  if (!g.out.empty()) {
    std::ofstream f(fs::path(g.out) / "bench.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write bench.csv");
    f << csv.str();
    man.outputs.push_back("bench.csv");
  }
  man.write(g);
  return kOk;
}

int with_precision(const Globals& g, const std::function<int()>& f32, const std::function<int()>& f64) {
  if (g.precision == "f32") return f32();
  if (g.precision == "f64") return f64();
  throw ConfigError("--precision must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SambaY hybrid decoder toolkit: plan, solve, fit, train, eval, generate, bench"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  Globals g;
  g.argv.assign(argv, argv + argc);
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--precision", g.precision, "Floating point precision: f32 or f64")->capture_default_str();
  app.add_option("--out", g.out, "Output directory (tables only on stdout if omitted)");
  app.add_option("--config", g.config, "Run file or manifest (JSON; sections model/task/train/sampler)");
  for (auto* o : app.get_options()) o->configurable(false);

  PlanArgs pa;
  auto* plan = app.add_subcommand("plan", "Layer plan, parameter counts and muP++ table at full scale");
  plan->add_option("arch", pa.arch, "Architecture name (omit to plan the config file)");
  plan->add_option("depth", pa.depth, "Depth d");
  plan->add_option("parameterization", pa.parameterization, "sp, mup or mupp")->capture_default_str();

  std::vector<std::string> solve_names;
  auto* solve = app.add_subcommand("solve", "Aspect ratio from the iso-parametric equation");
  solve->add_option("arch", solve_names, "Architecture names (all if omitted)");

  std::string fit_csv, fit_axis = "flops";
  auto* fit = app.add_subcommand("fit", "Fit L = A D^-b + C to a CSV of (D, L)");
  fit->add_option("csv", fit_csv, "CSV file with columns D,L")->required();
  fit->add_option("--axis", fit_axis, "D is flops or tokens")->capture_default_str();

  ModelFlags train_mf;
  TaskFlags train_tf;
  TrainFlags train_flags;
  bool quiet = false;
  auto* trn = app.add_subcommand("train", "Train on a synthetic task or a text corpus");
  train_mf.add(trn);
  train_tf.add(trn);
  train_flags.add(trn);
  trn->add_flag("--quiet", quiet, "No per-step progress");

  ModelFlags eval_mf;
  TaskFlags eval_tf;
  std::string eval_ckpt;
  std::size_t eval_episodes = 256;
  auto* evl = app.add_subcommand("eval", "Recall accuracy of a checkpoint");
  evl->add_option("--checkpoint", eval_ckpt, "Checkpoint directory (random init from --config if omitted)");
  evl->add_option("--episodes", eval_episodes, "Evaluation episodes")->capture_default_str();
  eval_mf.add(evl);
  eval_tf.add(evl);

  ModelFlags gen_mf;
  std::string gen_ckpt, gen_prompt, gen_tokens, gen_sampler = "greedy";
  std::size_t gen_n = 32;
  Sampler sampler;
  auto* gen = app.add_subcommand("generate", "Prefill a prompt and decode tokens");
  gen->add_option("--checkpoint", gen_ckpt, "Checkpoint directory (random init from --config if omitted)");
  gen->add_option("--prompt", gen_prompt, "Prompt text (byte vocabulary)");
  gen->add_option("--tokens", gen_tokens, "Prompt as comma-separated token ids");
  gen->add_option("-n,--n-tokens", gen_n, "Tokens to generate")->capture_default_str();
  auto* samp_opt = gen->add_option("--sampler", gen_sampler, "greedy or top_p")->capture_default_str();
  auto* temp_opt = gen->add_option("--temperature", sampler.temperature, "Top-p temperature")->capture_default_str();
  auto* topp_opt = gen->add_option("--top-p", sampler.top_p, "Top-p mass")->capture_default_str();
  gen_mf.add(gen);

  ModelFlags bench_mf;
  std::string bench_ckpt;
  std::vector<std::size_t> positions{256, 1024, 4096};
  std::size_t reps = 5;
  auto* bch = app.add_subcommand("bench", "Per-step decode cost (floats read) and wall time");
  bch->add_option("--checkpoint", bench_ckpt, "Checkpoint directory (random init from --config if omitted)");
  bch->add_option("--positions", positions, "Context lengths")->delimiter(',')->capture_default_str();
  bch->add_option("--reps", reps, "Timed steps per position")->capture_default_str();
  bench_mf.add(bch);

  const std::string globals_footer =
      "\nGlobal options (accepted before or after the subcommand):\n"
      "  --seed UINT                 Random seed\n"
      "  --precision TEXT            Floating point precision: f32 or f64\n"
      "  --out TEXT                  Output directory (tables only on stdout if omitted)\n"
      "  --config TEXT               Run file or manifest (JSON; sections model/task/train/sampler)\n";
  for (auto* sub : app.get_subcommands({})) sub->footer(globals_footer);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (g.precision != "f32" && g.precision != "f64") throw ConfigError("--precision must be f32 or f64");
    if (*plan) return cmd_plan(g, pa);
    if (*solve) return cmd_solve(g, solve_names);
    if (*fit) return cmd_fit(g, fit_csv, fit_axis);
    if (*trn) {
      const RunFile rf = load_run_file(g.config);
      if (rf.seed && !app.get_option("--seed")->count()) g.seed = *rf.seed;
      ModelConfig cfg = train_mf.resolve(rf.model);
      const TrainSection ts = train_flags.resolve(rf.train, g.seed);
      TaskSpec task;
      if (ts.corpus.empty()) task = train_tf.resolve(rf.task, cfg, g.seed);
      return with_precision(
          g, [&] { return run_train<float>(g, cfg, task, ts, quiet); },
          [&] { return run_train<double>(g, cfg, task, ts, quiet); });
    }
    if (*evl) {
      return with_precision(
          g, [&] { return run_eval<float>(g, eval_ckpt, eval_mf, eval_tf, eval_episodes); },
          [&] { return run_eval<double>(g, eval_ckpt, eval_mf, eval_tf, eval_episodes); });
    }
    if (*gen) {
      if (gen_sampler == "greedy") sampler.kind = Sampler::Kind::Greedy;
      else if (gen_sampler == "top_p" || gen_sampler == "top-p") sampler.kind = Sampler::Kind::TopP;
      else throw ConfigError("--sampler must be greedy or top_p");
      sampler.seed = g.seed;
      const bool from_flags = samp_opt->count() || temp_opt->count() || topp_opt->count();
      if (gen_prompt.empty() && gen_tokens.empty()) throw ConfigError("generate: give --prompt or --tokens");
      return with_precision(
          g, [&] { return run_generate<float>(g, gen_ckpt, gen_mf, gen_prompt, gen_tokens, gen_n, sampler, from_flags); },
          [&] { return run_generate<double>(g, gen_ckpt, gen_mf, gen_prompt, gen_tokens, gen_n, sampler, from_flags); });
    }
    if (*bch) {
      return with_precision(g, [&] { return run_bench<float>(g, bench_ckpt, bench_mf, positions, reps); },
                            [&] { return run_bench<double>(g, bench_ckpt, bench_mf, positions, reps); });
    }
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
