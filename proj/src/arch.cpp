#include "sambay/arch.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <random>

#include "sambay/scaling.hpp"

namespace sambay {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

std::string arch_name(Arch a) {
  switch (a) {
    case Arch::TransformerPP: return "Transformer++";
    case Arch::TransformerLS: return "TransformerLS";
    case Arch::SambaY: return "SambaY";
    case Arch::SambaYDA: return "SambaY+DA";
    case Arch::SambaYOCO: return "Samba+YOCO";
    case Arch::SambaYA: return "SambaY-A";
    case Arch::SambaYAA: return "SambaY-AA";
    case Arch::SambaYMLP: return "SambaY-MLP";
    case Arch::MambaY: return "MambaY";
  }
  return "?";
}

const std::vector<Arch>& all_archs() {
  static const std::vector<Arch> archs{Arch::TransformerPP, Arch::TransformerLS, Arch::SambaY,
                                       Arch::SambaYDA,      Arch::SambaYOCO,     Arch::SambaYA,
                                       Arch::SambaYAA,      Arch::SambaYMLP,     Arch::MambaY};
  return archs;
}

Arch parse_arch(const std::string& s) {
  const std::string key = lower(s);
  for (Arch a : all_archs()) {
    if (lower(arch_name(a)) == key) return a;
  }
  if (key == "transformerpp" || key == "transformer") return Arch::TransformerPP;
  if (key == "sambay-da" || key == "sambayda") return Arch::SambaYDA;
  if (key == "samba-yoco" || key == "sambayoco") return Arch::SambaYOCO;
  throw ConfigError("unknown architecture '" + s + "'");
}

std::string parameterization_name(Parameterization p) {
  switch (p) {
    case Parameterization::SP: return "sp";
    case Parameterization::MuP: return "mup";
    case Parameterization::MuPPP: return "mupp";
  }
  return "?";
}

Parameterization parse_parameterization(const std::string& s) {
  const std::string key = lower(s);
  if (key == "sp") return Parameterization::SP;
  if (key == "mup" || key == "μp") return Parameterization::MuP;
  if (key == "mupp" || key == "mup++" || key == "μp++") return Parameterization::MuPPP;
  throw ConfigError("unknown parameterization '" + s + "' (expected sp, mup or mupp)");
}

std::string memory_source_name(MemorySource m) {
  switch (m) {
    case MemorySource::None: return "none";
    case MemorySource::LastSsm: return "last_ssm";
    case MemorySource::LastAttention: return "last_attention";
    case MemorySource::MiddleAttention: return "middle_attention";
    case MemorySource::MlpBranch: return "mlp_branch";
  }
  return "?";
}

std::string mixer_name(MixerKind m) {
  switch (m) {
    case MixerKind::SSM: return "SSM";
    case MixerKind::SWA: return "SWA";
    case MixerKind::Full: return "FullAttn";
    case MixerKind::Cross: return "CrossAttn";
    case MixerKind::GMU: return "GMU";
  }
  return "?";
}

bool is_yoco(Arch a) { return a != Arch::TransformerPP && a != Arch::TransformerLS; }

MemorySource memory_source_for(Arch a) {
  switch (a) {
    case Arch::SambaY:
    case Arch::SambaYDA:
    case Arch::MambaY: return MemorySource::LastSsm;
    case Arch::SambaYA: return MemorySource::LastAttention;
    case Arch::SambaYAA: return MemorySource::MiddleAttention;
    case Arch::SambaYMLP: return MemorySource::MlpBranch;
    default: return MemorySource::None;
  }
}

// ---------------------------------------------------------------------------
// ModelConfig

std::size_t ModelConfig::resolved_aspect_ratio() const {
  if (aspect_ratio) return aspect_ratio;
  return solve_aspect_ratio(arch);
}

std::size_t ModelConfig::w() const { return width ? width : resolved_aspect_ratio() * depth; }

std::size_t ModelConfig::w_attn() const {
  if (attn_width) return attn_width;
  return width ? width : 128 * depth;
}

std::size_t ModelConfig::d_head() const {
  return head_dim ? head_dim : std::min<std::size_t>(128, w_attn() / 4);
}

std::size_t ModelConfig::n_heads() const { return w_attn() / d_head(); }
std::size_t ModelConfig::n_kv_heads() const { return n_heads() / kv_group; }
std::size_t ModelConfig::w_mlp() const { return mlp_width ? mlp_width : 4 * w(); }
std::size_t ModelConfig::r_dt() const { return dt_rank ? dt_rank : (w() + 15) / 16; }

std::size_t ModelConfig::tap_width() const {
  switch (memory_source()) {
    case MemorySource::LastSsm: return d_inner();
    case MemorySource::LastAttention:
    case MemorySource::MiddleAttention: return n_heads() * d_head();
    case MemorySource::MlpBranch: return w_mlp();
    case MemorySource::None: return 0;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (depth == 0) throw ConfigError("depth must be positive");
  if (is_yoco(arch) && depth % 4 != 0) {
    throw ConfigError("depth " + std::to_string(depth) + " is not divisible by 4 (required by " +
                      arch_name(arch) + ")");
  }
  if (aspect_ratio % 2 != 0) throw ConfigError("aspect ratio must be an even integer");
  if (w() == 0 || vocab_size == 0) throw ConfigError("width and vocab_size must be positive");
  if (d_head() == 0 || w_attn() % d_head() != 0) {
    throw ConfigError("attention width " + std::to_string(w_attn()) +
                      " is not a multiple of head_dim " + std::to_string(d_head()));
  }
  if (kv_group == 0 || n_heads() % kv_group != 0 || n_kv_heads() == 0) {
    throw ConfigError("query heads (" + std::to_string(n_heads()) +
                      ") must be a positive multiple of the GQA group " + std::to_string(kv_group));
  }
  if (window == 0) throw ConfigError("window must be >= 1");
  if (differential() && d_head() % 2 != 0) throw ConfigError("differential attention needs an even head_dim");
  if (uses_rope() && d_head() % 2 != 0) throw ConfigError("RoPE needs an even head_dim");
  if (conv_kernel == 0 || ssm_state == 0) throw ConfigError("ssm_state and conv_kernel must be positive");
  if (norm_eps <= 0) throw ConfigError("norm_eps must be positive");
}

// ---------------------------------------------------------------------------
// Layer plan

std::size_t LayerPlan::count(MixerKind k) const {
  return static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [k](const LayerSpec& l) { return l.mixer == k; }));
}

std::size_t LayerPlan::shared_kv_readers() const {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) {
    return l.mixer == MixerKind::Cross || l.kv_producer;
  }));
}

LayerPlan build_layer_plan(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.depth;
  LayerPlan plan;
  auto push = [&](MixerKind k) { plan.layers.push_back({k, false}); };
  switch (cfg.arch) {
    case Arch::TransformerPP:
      for (std::size_t i = 0; i < d; ++i) push(MixerKind::Full);
      plan.self_decoder_layers = d;
      return plan;
    case Arch::TransformerLS:
      for (std::size_t i = 0; i < d; ++i) push(i % 4 == 3 ? MixerKind::Full : MixerKind::SWA);
      plan.self_decoder_layers = d;
      return plan;
    case Arch::MambaY:
      for (std::size_t i = 0; i < d / 2; ++i) push(MixerKind::SSM);
      break;
    default:
      for (std::size_t i = 0; i < d / 2; ++i) push(i % 2 == 0 ? MixerKind::SSM : MixerKind::SWA);
      break;
  }
  plan.self_decoder_layers = d / 2;
  plan.kv_producer = d / 2;
  plan.layers.push_back({MixerKind::Full, true});
  for (std::size_t j = 1; j < d / 2; ++j) {
    MixerKind k = MixerKind::Cross;
    switch (cfg.arch) {
      case Arch::SambaYOCO: k = MixerKind::Cross; break;
      case Arch::SambaYAA: k = MixerKind::GMU; break;
      default: k = j % 2 == 1 ? MixerKind::GMU : MixerKind::Cross; break;
    }
    push(k);
  }
  plan.tap_source = cfg.memory_source();
  if (plan.tap_source == MemorySource::LastSsm) {
    for (std::size_t i = plan.self_decoder_layers; i-- > 0;) {
      if (plan.layers[i].mixer == MixerKind::SSM) {
        plan.tap_layer = i;
        break;
      }
    }
  } else if (plan.tap_source != MemorySource::None) {
    plan.tap_layer = plan.kv_producer;
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Parameters

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Embedding: return "embedding";
    case ParamGroup::Unembedding: return "unembedding";
    case ParamGroup::Hidden: return "hidden_matrix";
    case ParamGroup::Vector: return "vector_like";
  }
  return "?";
}

std::string component_name(Component c) {
  switch (c) {
    case Component::Embedding: return "embed";
    case Component::Attention: return "attn";
    case Component::Mamba: return "mamba";
    case Component::Gmu: return "gmu";
    case Component::Mlp: return "mlp";
    case Component::Norm: return "norm";
  }
  return "?";
}

std::vector<ParamSpec> enumerate_params(const ModelConfig& cfg) {
  const LayerPlan plan = build_layer_plan(cfg);
  const std::size_t w = cfg.w(), V = cfg.vocab_size, H = cfg.n_heads(), Hkv = cfg.n_kv_heads(),
                    hd = cfg.d_head(), di = cfg.d_inner(), N = cfg.ssm_state, K = cfg.conv_kernel,
                    R = cfg.r_dt(), wm = cfg.w_mlp();
  std::vector<ParamSpec> out;
  auto add = [&](std::string name, Shape shape, ParamGroup g, Component c, InitRule init,
                 std::size_t fan_in) {
    out.push_back({std::move(name), std::move(shape), g, c, init, fan_in});
  };
  auto norm = [&](const std::string& prefix) {
    add(prefix + ".weight", {w}, ParamGroup::Vector, Component::Norm, InitRule::Ones, 1);
    if (cfg.norm == NormKind::Layer)
      add(prefix + ".bias", {w}, ParamGroup::Vector, Component::Norm, InitRule::Zeros, 1);
  };
  const auto H_ = ParamGroup::Hidden;
  const auto V_ = ParamGroup::Vector;

  add("embed.weight", {V, w}, ParamGroup::Embedding, Component::Embedding, InitRule::Embedding, w);
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const LayerSpec& l = plan.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    norm(p + "norm1");
    const std::string m = p + "mixer.";
    switch (l.mixer) {
      case MixerKind::SSM: {
        const auto C = Component::Mamba;
        add(m + "in_proj", {2 * di, w}, H_, C, InitRule::Hidden, w);
        add(m + "conv_weight", {di, K}, V_, C, InitRule::ConvWeight, K);
        add(m + "conv_bias", {di}, V_, C, InitRule::Zeros, 1);
        add(m + "x_proj", {R + 2 * N, di}, H_, C, InitRule::Hidden, di);
        add(m + "dt_proj", {di, R}, H_, C, InitRule::Hidden, R);
        add(m + "dt_bias", {di}, V_, C, InitRule::DtBias, 1);
        add(m + "a_log", {di, N}, V_, C, InitRule::ALog, 1);
        add(m + "d", {di}, V_, C, InitRule::Ones, 1);
        add(m + "out_proj", {w, di}, H_, C, InitRule::OutputProj, di);
        break;
      }
      case MixerKind::SWA:
      case MixerKind::Full:
      case MixerKind::Cross: {
        const auto C = Component::Attention;
        add(m + "q_proj", {H * hd, w}, H_, C, InitRule::Hidden, w);
        if (l.mixer != MixerKind::Cross) {
          add(m + "k_proj", {Hkv * hd, w}, H_, C, InitRule::Hidden, w);
          add(m + "v_proj", {Hkv * hd, w}, H_, C, InitRule::Hidden, w);
        }
        add(m + "o_proj", {w, H * hd}, H_, C, InitRule::OutputProj, H * hd);
        if (cfg.differential()) {
          for (const char* n : {"lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"})
            add(m + n, {H, hd}, V_, C, InitRule::Lambda, 1);
          add(m + "head_norm", {hd}, V_, C, InitRule::Ones, 1);
        }
        break;
      }
      case MixerKind::GMU: {
        const std::size_t dh = cfg.tap_width();
        add(m + "w1", {dh, w}, H_, Component::Gmu, InitRule::Hidden, w);
        add(m + "w2", {dh, w}, H_, Component::Gmu, InitRule::OutputProj, dh);
        if (cfg.normalized_gmu)
          add(m + "norm_weight", {dh}, V_, Component::Gmu, InitRule::Ones, 1);
        break;
      }
    }
    norm(p + "norm2");
    add(p + "mlp.gate_proj", {wm, w}, H_, Component::Mlp, InitRule::Hidden, w);
    add(p + "mlp.up_proj", {wm, w}, H_, Component::Mlp, InitRule::Hidden, w);
    add(p + "mlp.down_proj", {w, wm}, H_, Component::Mlp, InitRule::OutputProj, wm);
  }
  norm("final_norm");
  if (!cfg.tie_embeddings) {
    add("unembed.weight", {V, w}, ParamGroup::Unembedding, Component::Embedding,
        InitRule::Unembedding, w);
  }
  return out;
}

ParamCount count_params(const ModelConfig& cfg) {
  const LayerPlan plan = build_layer_plan(cfg);
  const double w = static_cast<double>(cfg.w());
  const double q = static_cast<double>(cfg.n_heads() * cfg.d_head());
  const double kv = static_cast<double>(cfg.n_kv_heads() * cfg.d_head());
  const double di = static_cast<double>(cfg.d_inner());
  const double wm = static_cast<double>(cfg.w_mlp());
  const double dh = static_cast<double>(cfg.tap_width());
  ParamCount pc;
  for (const LayerSpec& l : plan.layers) {
    switch (l.mixer) {
      case MixerKind::SSM: pc.closed.mamba += 2 * di * w + w * di; break;
      case MixerKind::SWA:
      case MixerKind::Full:
        pc.closed.attn += 2 * w * q + (l.kv_producer ? 0.0 : 2 * w * kv);
        break;
      case MixerKind::Cross: pc.closed.attn += 2 * w * q; break;
      case MixerKind::GMU: pc.closed.gmu += 2 * w * dh; break;
    }
    pc.closed.mlp += 3 * w * wm;
  }
  pc.closed.total_nonembed = pc.closed.attn + pc.closed.mamba + pc.closed.gmu + pc.closed.mlp;

  for (const ParamSpec& s : enumerate_params(cfg)) {
    const double n = static_cast<double>(numel(s.shape));
    switch (s.component) {
      case Component::Embedding: pc.embed += n; continue;
      case Component::Attention: pc.exact.attn += n; break;
      case Component::Mamba: pc.exact.mamba += n; break;
      case Component::Gmu: pc.exact.gmu += n; break;
      case Component::Mlp: pc.exact.mlp += n; break;
      case Component::Norm: pc.exact.norm += n; break;
    }
    pc.exact.total_nonembed += n;
  }
  return pc;
}

double residual_multiplier(const ModelConfig& cfg) {
  if (cfg.parameterization != Parameterization::MuPPP) return 1.0;
  return 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.depth));
}

double logit_multiplier(const ModelConfig& cfg) {
  if (cfg.parameterization == Parameterization::SP) return 1.0;
  return static_cast<double>(cfg.base()) / static_cast<double>(cfg.w());
}

double attention_scale(const ModelConfig& cfg) {
  // muP++ pins the base logit multiplier to 1/sqrt(alpha).
  if (cfg.parameterization == Parameterization::MuPPP) {
    return 1.0 / std::sqrt(static_cast<double>(cfg.w()) / static_cast<double>(cfg.depth));
  }
  const double hd = static_cast<double>(cfg.d_head());
  return 1.0 / std::sqrt(cfg.differential() ? hd / 2 : hd);
}

// ---------------------------------------------------------------------------
// Model

namespace {

template <typename T>
void init_values(const ParamSpec& s, const ModelConfig& cfg, std::mt19937_64& rng, std::vector<T>& v) {
  const bool sp = cfg.parameterization == Parameterization::SP;
  auto normal = [&](double std) {
    std::normal_distribution<double> nd(0.0, std);
    for (auto& x : v) x = static_cast<T>(nd(rng));
  };
  auto uniform = [&](double bound) {
    std::uniform_real_distribution<double> ud(-bound, bound);
    for (auto& x : v) x = static_cast<T>(ud(rng));
  };
  switch (s.init) {
    case InitRule::Hidden:
      if (sp) normal(cfg.init_std);
      else uniform(1.0 / std::sqrt(static_cast<double>(s.fan_in)));
      break;
    case InitRule::OutputProj:
      if (sp) normal(cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.depth)));
      else uniform(1.0 / std::sqrt(static_cast<double>(s.fan_in)));
      break;
    case InitRule::Embedding: normal(cfg.tie_embeddings ? cfg.init_std : 1e-4); break;
    case InitRule::Unembedding:
    case InitRule::Zeros: std::fill(v.begin(), v.end(), T{0}); break;
    case InitRule::Ones: std::fill(v.begin(), v.end(), T{1}); break;
    case InitRule::ALog: {
      const std::size_t n = s.shape[1];
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(std::log(double(i % n + 1)));
      break;
    }
    case InitRule::DtBias: {
      std::uniform_real_distribution<double> ud(std::log(1e-3), std::log(1e-1));
      for (auto& x : v) {
        const double dt = std::max(std::exp(ud(rng)), 1e-4);
        x = static_cast<T>(dt + std::log(-std::expm1(-dt)));
      }
      break;
    }
    case InitRule::ConvWeight: uniform(1.0 / std::sqrt(static_cast<double>(s.fan_in))); break;
    case InitRule::Lambda: normal(0.1); break;
  }
}

std::vector<int> all_positions(std::size_t n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

}  // namespace

template <typename T>
Model<T> Model<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.cfg_ = cfg;
  m.plan_ = build_layer_plan(cfg);
  m.specs_ = enumerate_params(cfg);
  std::mt19937_64 rng(seed);
  for (const ParamSpec& s : m.specs_) {
    std::vector<T> v(numel(s.shape));
    init_values(s, cfg, rng, v);
    m.params_.emplace_back(s.shape, std::move(v));
  }
  m.wire();
  return m;
}

template <typename T>
Model<T> Model<T>::from_tensors(const ModelConfig& cfg,
                                const std::map<std::string, Tensor<T>>& tensors) {
  Model m;
  m.cfg_ = cfg;
  m.plan_ = build_layer_plan(cfg);
  m.specs_ = enumerate_params(cfg);
  if (tensors.size() != m.specs_.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(tensors.size()) +
                      " tensors, model expects " + std::to_string(m.specs_.size()));
  }
  for (const ParamSpec& s : m.specs_) {
    auto it = tensors.find(s.name);
    if (it == tensors.end()) throw ConfigError("checkpoint is missing parameter " + s.name);
    if (it->second.shape() != s.shape) {
      throw ShapeError("parameter " + s.name + " has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(s.shape));
    }
    m.params_.push_back(it->second.detach());
  }
  m.wire();
  return m;
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named " + name);
  return params_[it->second];
}

template <typename T>
void Model<T>::set_requires_grad(bool on) {
  for (auto& p : params_) p.set_requires_grad(on);
}

template <typename T>
void Model<T>::wire() {
  index_.clear();
  for (std::size_t i = 0; i < specs_.size(); ++i) index_[specs_[i].name] = i;
  auto get = [&](const std::string& n) { return param(n); };
  auto has = [&](const std::string& n) { return index_.count(n) > 0; };
  const T eps = static_cast<T>(cfg_.norm_eps);
  auto norm = [&](const std::string& prefix) {
    NormParams<T> p;
    p.weight = get(prefix + ".weight");
    if (cfg_.norm == NormKind::Layer) p.bias = get(prefix + ".bias");
    p.kind = cfg_.norm;
    p.eps = eps;
    return p;
  };
  embed_ = get("embed.weight");
  unembed_ = cfg_.tie_embeddings ? embed_ : get("unembed.weight");
  final_norm_ = norm("final_norm");
  residual_mult_ = static_cast<T>(residual_multiplier(cfg_));
  logit_mult_ = static_cast<T>(logit_multiplier(cfg_));

  layers_.clear();
  for (std::size_t i = 0; i < plan_.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    const std::string m = p + "mixer.";
    Layer<T> L;
    L.spec = plan_.layers[i];
    L.norm1 = norm(p + "norm1");
    L.norm2 = norm(p + "norm2");
    switch (L.spec.mixer) {
      case MixerKind::SSM: {
        SsmParams<T> s;
        s.in_proj = get(m + "in_proj");
        s.conv_weight = get(m + "conv_weight");
        s.conv_bias = get(m + "conv_bias");
        s.x_proj = get(m + "x_proj");
        s.dt_proj = get(m + "dt_proj");
        s.dt_bias = get(m + "dt_bias");
        s.a_log = get(m + "a_log");
        s.d = get(m + "d");
        s.out_proj = get(m + "out_proj");
        s.d_inner = cfg_.d_inner();
        s.state_dim = cfg_.ssm_state;
        s.conv_kernel = cfg_.conv_kernel;
        s.dt_rank = cfg_.r_dt();
        L.ssm = s;
        break;
      }
      case MixerKind::SWA:
      case MixerKind::Full:
      case MixerKind::Cross: {
        AttnParams<T> a;
        a.q_proj = get(m + "q_proj");
        if (has(m + "k_proj")) {
          a.k_proj = get(m + "k_proj");
          a.v_proj = get(m + "v_proj");
        }
        a.o_proj = get(m + "o_proj");
        a.n_heads = cfg_.n_heads();
        a.n_kv_heads = cfg_.n_kv_heads();
        a.head_dim = cfg_.d_head();
        a.v_head_dim = cfg_.d_head();
        if (L.spec.mixer == MixerKind::SWA) a.window = cfg_.window;
        a.scale = attention_scale(cfg_);
        a.rope = cfg_.uses_rope();
        a.rope_base = cfg_.rope_base;
        if (cfg_.differential()) {
          a.differential = true;
          a.lambda_q1 = get(m + "lambda_q1");
          a.lambda_k1 = get(m + "lambda_k1");
          a.lambda_q2 = get(m + "lambda_q2");
          a.lambda_k2 = get(m + "lambda_k2");
          a.head_norm = get(m + "head_norm");
          a.lambda_init = diff_lambda_init(static_cast<double>(i + 1));
          a.eps = eps;
        }
        L.attn = a;
        break;
      }
      case MixerKind::GMU: {
        GmuParams<T> g;
        g.w1 = get(m + "w1");
        g.w2 = get(m + "w2");
        if (cfg_.normalized_gmu) g.norm_weight = get(m + "norm_weight");
        g.eps = eps;
        L.gmu = g;
        break;
      }
    }
    L.mlp = {get(p + "mlp.gate_proj"), get(p + "mlp.up_proj"), get(p + "mlp.down_proj")};
    layers_.push_back(std::move(L));
  }
}

template <typename T>
Tensor<T> Model<T>::logits_from_hidden(const Tensor<T>& h) const {
  return scale(linear(norm_forward(h, final_norm_), unembed_), logit_mult_);
}

template <typename T>
Tensor<T> Model<T>::forward(std::span<const int> tokens, std::span<const int> positions,
                            ForwardCapture<T>* capture) const {
  const std::size_t n = tokens.size();
  if (n == 0) throw ConfigError("forward: empty token sequence");
  const std::vector<int> all = all_positions(n);
  std::vector<int> out_pos(positions.begin(), positions.end());
  if (out_pos.empty()) out_pos = all;
  for (std::size_t i = 0; i < out_pos.size(); ++i) {
    if (out_pos[i] < 0 || static_cast<std::size_t>(out_pos[i]) >= n ||
        (i > 0 && out_pos[i] <= out_pos[i - 1])) {
      throw ConfigError("forward: output positions must be ascending and inside the sequence");
    }
  }
  const bool subset = out_pos.size() != n;
  if (capture) {
    capture->ssm_states.assign(layers_.size(), std::nullopt);
    capture->kv.assign(layers_.size(), std::nullopt);
    capture->token_evals.assign(layers_.size(), 0);
  }

  Tensor<T> h = sambay::embedding(embed_, tokens);
  std::vector<int> rows = all;
  Tensor<T> h_all;
  Tensor<T> tap;
  KvPair<T> shared;

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer<T>& L = layers_[i];
    if (i == plan_.self_decoder_layers && subset) {
      h_all = h;
      h = gather_rows(h, out_pos);
      if (tap.defined()) tap = gather_rows(tap, out_pos);
      rows = out_pos;
    } else if (i == plan_.self_decoder_layers) {
      h_all = h;
    }
    if (capture) capture->token_evals[i] = rows.size();
    Tensor<T> y;
    switch (L.spec.mixer) {
      case MixerKind::SSM: {
        SsmState<T> st;
        auto o = ssm_forward_parallel(norm_forward(h, L.norm1), *L.ssm, capture ? &st : nullptr);
        if (plan_.tap_layer == i) tap = o.tap;
        if (capture) capture->ssm_states[i] = std::move(st);
        y = o.y;
        break;
      }
      case MixerKind::SWA:
      case MixerKind::Full: {
        Tensor<T> x;
        KvPair<T> kv;
        if (L.spec.kv_producer) {
          const auto x_all = norm_forward(h_all, L.norm1);
          kv = project_kv(x_all, all, *L.attn);
          x = subset ? gather_rows(x_all, out_pos) : x_all;
          shared = kv;
        } else {
          x = norm_forward(h, L.norm1);
          kv = project_kv(x, all, *L.attn);
        }
        const auto heads = attention_heads(x, rows, kv, *L.attn);
        if (plan_.tap_layer == i && (plan_.tap_source == MemorySource::LastAttention ||
                                     plan_.tap_source == MemorySource::MiddleAttention)) {
          tap = heads;
        }
        if (capture) capture->kv[i] = kv;
        y = linear(heads, L.attn->o_proj);
        break;
      }
      case MixerKind::Cross:
        y = attention_forward(norm_forward(h, L.norm1), rows, shared, *L.attn);
        break;
      case MixerKind::GMU:
        if (!tap.defined()) throw ConfigError("forward: GMU layer has no memory tap");
        y = gated_memory_forward(norm_forward(h, L.norm1), tap, *L.gmu);
        break;
    }
    h = add(h, scale(y, residual_mult_));
    auto mo = swiglu_forward(norm_forward(h, L.norm2), L.mlp);
    if (plan_.tap_layer == i && plan_.tap_source == MemorySource::MlpBranch) tap = mo.tap;
    h = add(h, scale(mo.y, residual_mult_));
  }
  if (subset && rows.size() == n) h = gather_rows(h, out_pos);
  if (capture) {
    capture->tap = tap;
    capture->pre_logits = h;
  }
  return logits_from_hidden(h);
}

template class Model<float>;
template class Model<double>;

}  // namespace sambay
