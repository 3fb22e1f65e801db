#include "sambay/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "sambay/checkpoint.hpp"

namespace sambay {

template <typename T>
void KvCache<T>::push(std::size_t position, std::span<const T> k_row, std::span<const T> v_row) {
  if (k_row.size() != k_width || v_row.size() != v_width) {
    throw ShapeError("kv cache: row width mismatch");
  }
  std::size_t slot = filled;
  if (capacity) {
    slot = position % capacity;
    const std::size_t rows = k.size() / k_width;
    if (rows < capacity) {
      k.resize(capacity * k_width);
      v.resize(capacity * v_width);
    }
    filled = std::min(filled + 1, capacity);
  } else {
    k.resize((filled + 1) * k_width);
    v.resize((filled + 1) * v_width);
    ++filled;
  }
  std::copy(k_row.begin(), k_row.end(), k.begin() + static_cast<std::ptrdiff_t>(slot * k_width));
  std::copy(v_row.begin(), v_row.end(), v.begin() + static_cast<std::ptrdiff_t>(slot * v_width));
}

double IoLedger::step_reads(MixerKind k) const {
  double r = 0;
  for (const auto& l : layers)
    if (l.kind == k) r += l.reads;
  return r;
}

double IoLedger::cross_decoder_reads() const {
  double r = 0;
  for (std::size_t i = cross_decoder_begin; i < layers.size(); ++i) r += layers[i].reads;
  return r;
}

std::size_t IoLedger::cross_decoder_mlp_evals() const {
  std::size_t n = 0;
  for (std::size_t i = cross_decoder_begin; i < layers.size(); ++i) n += layers[i].mlp_evals;
  return n;
}

std::size_t IoLedger::self_decoder_mlp_evals() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < std::min(cross_decoder_begin, layers.size()); ++i) n += layers[i].mlp_evals;
  return n;
}

namespace {

bool attention_tap(MemorySource s) {
  return s == MemorySource::LastAttention || s == MemorySource::MiddleAttention;
}

template <typename T>
std::vector<T> to_vec(const Tensor<T>& t) {
  const auto d = t.data();
  return {d.begin(), d.end()};
}

}  // namespace

template <typename T>
DecodeState<T> zero_state(const Model<T>& model) {
  const ModelConfig& cfg = model.config();
  const LayerPlan& plan = model.plan();
  DecodeState<T> st;
  st.config = cfg;
  st.ssm.resize(plan.layers.size());
  st.kv.resize(plan.layers.size());
  st.ledger.layers.resize(plan.layers.size());
  st.ledger.cross_decoder_begin = is_yoco(cfg.arch) ? plan.self_decoder_layers : plan.layers.size();
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const auto& L = model.layers()[i];
    st.ledger.layers[i].kind = L.spec.mixer;
    st.ledger.layers[i].kv_producer = L.spec.kv_producer;
    if (L.ssm) st.ssm[i] = ssm_zero_state(*L.ssm);
    if (L.spec.mixer == MixerKind::SWA || L.spec.mixer == MixerKind::Full) {
      KvCache<T> c;
      c.k_width = L.attn->k_width();
      c.v_width = L.attn->v_width();
      c.capacity = L.spec.mixer == MixerKind::SWA ? cfg.window : 0;
      st.kv[i] = std::move(c);
    }
  }
  if (plan.tap_layer) st.tap.assign(cfg.tap_width(), T{0});
  return st;
}

template <typename T>
PrefillResult<T> prefill(const Model<T>& model, std::span<const int> prompt) {
  if (prompt.empty()) throw ConfigError("prefill: empty prompt");
  NoGradGuard guard;
  PrefillResult<T> out;
  out.state = zero_state(model);
  auto& st = out.state;
  const std::size_t n = prompt.size();
  const int last = static_cast<int>(n - 1);
  ForwardCapture<T> cap;
  const auto logits = model.forward(prompt, std::span<const int>(&last, 1), &cap);
  out.logits = to_vec(logits);
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    auto& io = st.ledger.layers[i];
    io.mixer_evals = cap.token_evals[i];
    io.mlp_evals = cap.token_evals[i];
    if (cap.ssm_states[i]) st.ssm[i] = *cap.ssm_states[i];
    if (cap.kv[i]) {
      auto& cache = *st.kv[i];
      const auto k = cap.kv[i]->k.data();
      const auto v = cap.kv[i]->v.data();
      const std::size_t first = cache.capacity ? n - std::min(n, cache.capacity) : 0;
      for (std::size_t r = first; r < n; ++r) {
        cache.push(r, k.subspan(r * cache.k_width, cache.k_width), v.subspan(r * cache.v_width, cache.v_width));
      }
      io.kv_projections = n;
    }
  }
  if (cap.tap.defined()) st.tap = to_vec(cap.tap);
  st.position = n;
  return out;
}

template <typename T>
std::vector<T> decode_step(const Model<T>& model, DecodeState<T>& st, int token) {
  if (!(st.config == model.config()) || st.ledger.layers.size() != model.layers().size()) {
    throw ConfigError("decode_step: state was built for a different model configuration");
  }
  NoGradGuard guard;
  const LayerPlan& plan = model.plan();
  const int pos = static_cast<int>(st.position);
  const std::span<const int> pos_span(&pos, 1);
  const T rm = model.residual_mult();
  Tensor<T> h = embedding(model.embedding(), std::span<const int>(&token, 1));

  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const Layer<T>& L = model.layers()[i];
    LayerIo& io = st.ledger.layers[i];
    ++io.mixer_evals;
    ++io.mlp_evals;
    const Tensor<T> xn = norm_forward(h, L.norm1);
    Tensor<T> y;
    switch (L.spec.mixer) {
      case MixerKind::SSM: {
        auto& s = *st.ssm[i];
        auto o = ssm_step<T>(xn.data(), s, *L.ssm);
        io.reads = static_cast<double>(s.floats());
        io.writes = static_cast<double>(s.floats());
        if (plan.tap_layer == i) st.tap = std::move(o.tap);
        const std::size_t n = o.y.size();
        y = Tensor<T>({1, n}, std::move(o.y));
        break;
      }
      case MixerKind::SWA:
      case MixerKind::Full:
      case MixerKind::Cross: {
        const auto& p = *L.attn;
        KvCache<T>* cache = nullptr;
        if (L.spec.mixer == MixerKind::Cross) {
          cache = &*st.kv[*plan.kv_producer];
          io.writes = 0;
        } else {
          cache = &*st.kv[i];
          const auto kv = project_kv(xn, pos_span, p);
          cache->push(st.position, kv.k.data(), kv.v.data());
          ++io.kv_projections;
          io.writes = static_cast<double>(cache->k_width + cache->v_width);
        }
        Tensor<T> q = linear(xn, p.q_proj);
        if (p.rope) q = rope(q, p.n_heads, p.head_dim, pos_span, p.rope_base);
        std::vector<T> lambda;
        if (p.differential) lambda = to_vec(diff_lambda(p));
        std::vector<T> heads(p.out_width());
        attention_heads_cached<T>(q.data(), cache->k.data(), cache->v.data(), cache->filled, p, lambda, heads);
        io.reads = static_cast<double>(cache->floats());
        if (plan.tap_layer == i && attention_tap(plan.tap_source)) st.tap = heads;
        const std::size_t n = heads.size();
        y = linear(Tensor<T>({1, n}, std::move(heads)), p.o_proj);
        break;
      }
      case MixerKind::GMU: {
        io.reads = static_cast<double>(st.tap.size());
        io.writes = 0;
        y = gated_memory_forward(xn, Tensor<T>({1, st.tap.size()}, st.tap), *L.gmu);
        break;
      }
    }
    h = add(h, scale(y, rm));
    auto mo = swiglu_forward(norm_forward(h, L.norm2), L.mlp);
    if (plan.tap_layer == i && plan.tap_source == MemorySource::MlpBranch) st.tap = to_vec(mo.tap);
    h = add(h, scale(mo.y, rm));
  }
  ++st.position;
  return to_vec(model.logits_from_hidden(h));
}

template <typename T>
CacheFootprint cache_footprint(const DecodeState<T>& st) {
  CacheFootprint f;
  for (std::size_t i = 0; i < st.ledger.layers.size(); ++i) {
    const auto& io = st.ledger.layers[i];
    if (st.ssm[i]) f.ssm_state += static_cast<double>(st.ssm[i]->floats());
    if (!st.kv[i]) continue;
    const double floats = static_cast<double>(st.kv[i]->floats());
    if (io.kv_producer) f.global_kv += floats;
    else if (io.kind == MixerKind::SWA) f.swa_kv += floats;
    else f.self_kv += floats;
  }
  f.tap = static_cast<double>(st.tap.size());
  return f;
}

CacheFootprint cache_footprint(const ModelConfig& cfg, std::size_t n_tokens) {
  const LayerPlan plan = build_layer_plan(cfg);
  const double kv_row = static_cast<double>(cfg.n_kv_heads() * cfg.d_head() * 2);
  const double n = static_cast<double>(n_tokens);
  const double ssm = static_cast<double>(cfg.d_inner() * cfg.ssm_state + cfg.d_inner() * (cfg.conv_kernel - 1));
  CacheFootprint f;
  for (const auto& l : plan.layers) {
    switch (l.mixer) {
      case MixerKind::SSM: f.ssm_state += ssm; break;
      case MixerKind::SWA: f.swa_kv += kv_row * std::min(n, static_cast<double>(cfg.window)); break;
      case MixerKind::Full: (l.kv_producer ? f.global_kv : f.self_kv) += kv_row * n; break;
      default: break;
    }
  }
  if (plan.tap_layer) f.tap = static_cast<double>(cfg.tap_width());
  return f;
}

int sample_token(std::span<const double> logits, const Sampler& s, std::mt19937_64& rng) {
  if (logits.empty()) throw ConfigError("sample_token: empty logits");
  const auto argmax = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (s.kind == Sampler::Kind::Greedy || s.temperature <= 0) return argmax;
  if (s.top_p <= 0 || s.top_p > 1) throw ConfigError("sample_token: top_p must be in (0, 1]");
  const double mx = logits[static_cast<std::size_t>(argmax)];
  std::vector<std::pair<double, int>> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = {std::exp((logits[i] - mx) / s.temperature), static_cast<int>(i)};
    z += p[i].first;
  }
  std::stable_sort(p.begin(), p.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  double cum = 0;
  std::size_t keep = 0;
  while (keep < p.size()) {
    cum += p[keep].first / z;
    ++keep;
    if (cum >= s.top_p) break;
  }
  double kept = 0;
  for (std::size_t i = 0; i < keep; ++i) kept += p[i].first;
  const double u = std::uniform_real_distribution<double>(0.0, kept)(rng);
  double acc = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += p[i].first;
    if (u < acc) return p[i].second;
  }
  return p[keep - 1].second;
}

template <typename T>
std::vector<int> generate(const Model<T>& model, std::span<const int> prompt, std::size_t n_tokens,
                          const Sampler& sampler) {
  if (n_tokens == 0) throw ConfigError("generate: n_tokens must be >= 1");
  std::mt19937_64 rng(sampler.seed);
  auto pre = prefill(model, prompt);
  std::vector<double> logits(pre.logits.begin(), pre.logits.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < n_tokens; ++i) {
    const int tok = sample_token(logits, sampler, rng);
    out.push_back(tok);
    if (i + 1 == n_tokens) break;
    const auto next = decode_step(model, pre.state, tok);
    logits.assign(next.begin(), next.end());
  }
  return out;
}

template <typename T>
void save_state(const std::filesystem::path& dir, const DecodeState<T>& st) {
  std::map<std::string, Tensor<T>> tensors;
  json layers = json::array();
  for (std::size_t i = 0; i < st.ledger.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    json entry{{"filled", 0}, {"capacity", 0}};
    if (st.ssm[i]) {
      const auto& s = *st.ssm[i];
      tensors.emplace(p + "ssm_h", Tensor<T>({s.h.size()}, s.h));
      tensors.emplace(p + "ssm_conv", Tensor<T>({s.conv.size()}, s.conv));
    }
    if (st.kv[i]) {
      const auto& c = *st.kv[i];
      tensors.emplace(p + "k", Tensor<T>({c.k.size()}, c.k));
      tensors.emplace(p + "v", Tensor<T>({c.v.size()}, c.v));
      entry["filled"] = c.filled;
      entry["capacity"] = c.capacity;
    }
    const auto& io = st.ledger.layers[i];
    entry["reads"] = io.reads;
    entry["writes"] = io.writes;
    entry["mixer_evals"] = io.mixer_evals;
    entry["mlp_evals"] = io.mlp_evals;
    entry["kv_projections"] = io.kv_projections;
    layers.push_back(entry);
  }
  tensors.emplace("tap", Tensor<T>({st.tap.size()}, st.tap));
  save_tensors(dir, tensors, config_to_json(st.config),
               json{{"kind", "decode_state"}, {"position", st.position}, {"layers", layers}});
}

template <typename T>
DecodeState<T> load_state(const std::filesystem::path& dir, const Model<T>& model) {
  json manifest;
  auto tensors = load_tensors<T>(dir, &manifest);
  const json& meta = manifest.at("meta");
  if (meta.value("kind", "") != "decode_state") throw IoError(dir.string() + ": not a decode-state snapshot");
  if (!(config_from_json(manifest.at("config")) == model.config())) {
    throw ConfigError("load_state: snapshot was taken with a different model configuration");
  }
  DecodeState<T> st = zero_state(model);
  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("decode-state snapshot is missing " + name);
    return to_vec(it->second);
  };
  const auto& layers = meta.at("layers");
  if (layers.size() != st.ledger.layers.size()) throw IoError("decode-state snapshot has the wrong layer count");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    if (st.ssm[i]) {
      st.ssm[i]->h = take(p + "ssm_h");
      st.ssm[i]->conv = take(p + "ssm_conv");
    }
    if (st.kv[i]) {
      st.kv[i]->k = take(p + "k");
      st.kv[i]->v = take(p + "v");
      st.kv[i]->filled = layers[i].at("filled").get<std::size_t>();
    }
    auto& io = st.ledger.layers[i];
    io.reads = layers[i].at("reads").get<double>();
    io.writes = layers[i].at("writes").get<double>();
    io.mixer_evals = layers[i].at("mixer_evals").get<std::size_t>();
    io.mlp_evals = layers[i].at("mlp_evals").get<std::size_t>();
    io.kv_projections = layers[i].at("kv_projections").get<std::size_t>();
  }
  st.tap = take("tap");
  st.position = meta.at("position").get<std::size_t>();
  return st;
}

template <typename T>
std::vector<BenchRow> bench(const Model<T>& model, const std::vector<std::size_t>& positions, std::size_t reps,
                            std::uint64_t seed) {
  if (reps == 0) throw ConfigError("bench: reps must be >= 1");
  std::mt19937_64 rng(seed);
  const int vocab = static_cast<int>(model.config().vocab_size);
  std::vector<BenchRow> rows;
  for (std::size_t n : positions) {
    if (n == 0) throw ConfigError("bench: positions must be >= 1");
    std::vector<int> prompt(n);
    for (auto& t : prompt) t = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
    auto pre = prefill(model, prompt);
    BenchRow row;
    row.position = n;
    std::vector<double> times;
    int tok = prompt.back();
    for (std::size_t r = 0; r < reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto logits = decode_step(model, pre.state, tok);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      tok = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      if (r == 0) {
        const auto& led = pre.state.ledger;
        row.ssm_reads = led.step_reads(MixerKind::SSM);
        row.swa_reads = led.step_reads(MixerKind::SWA);
        row.full_reads = led.step_reads(MixerKind::Full);
        row.cross_reads = led.step_reads(MixerKind::Cross);
        row.gmu_reads = led.step_reads(MixerKind::GMU);
      }
    }
    std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
    row.wall_ns = times[times.size() / 2];
    rows.push_back(row);
  }
  return rows;
}

#define SAMBAY_INSTANTIATE_RUNTIME(T)                                                                      \
  template struct KvCache<T>;                                                                             \
  template DecodeState<T> zero_state<T>(const Model<T>&);                                                 \
  template PrefillResult<T> prefill<T>(const Model<T>&, std::span<const int>);                            \
  template std::vector<T> decode_step<T>(const Model<T>&, DecodeState<T>&, int);                          \
  template CacheFootprint cache_footprint<T>(const DecodeState<T>&);                                      \
  template std::vector<int> generate<T>(const Model<T>&, std::span<const int>, std::size_t, const Sampler&); \
  template void save_state<T>(const std::filesystem::path&, const DecodeState<T>&);                       \
  template DecodeState<T> load_state<T>(const std::filesystem::path&, const Model<T>&);                   \
  template std::vector<BenchRow> bench<T>(const Model<T>&, const std::vector<std::size_t>&, std::size_t,   \
                                          std::uint64_t);

SAMBAY_INSTANTIATE_RUNTIME(float)
SAMBAY_INSTANTIATE_RUNTIME(double)

}  // namespace sambay
