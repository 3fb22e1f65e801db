#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sambay/layers.hpp"

namespace sambay {

enum class Arch {
  TransformerPP,
  TransformerLS,
  SambaY,
  SambaYDA,
  SambaYOCO,
  SambaYA,
  SambaYAA,
  SambaYMLP,
  MambaY,
};

enum class Parameterization { SP, MuP, MuPPP };

enum class MemorySource { None, LastSsm, LastAttention, MiddleAttention, MlpBranch };

enum class MixerKind { SSM, SWA, Full, Cross, GMU };

std::string arch_name(Arch a);
Arch parse_arch(const std::string& s);
const std::vector<Arch>& all_archs();
std::string parameterization_name(Parameterization p);
Parameterization parse_parameterization(const std::string& s);
std::string memory_source_name(MemorySource m);
std::string mixer_name(MixerKind m);

// True for the decoder-decoder family (self-decoder plus cross-decoder over
// one shared KV cache).
bool is_yoco(Arch a);
MemorySource memory_source_for(Arch a);

// Depth-driven architecture description. Zero-valued size fields are derived:
//   width      = aspect_ratio * depth (aspect_ratio from the iso-parametric solver if 0)
//   attn_width = 128 * depth when width is derived, else width
//   head_dim   = min(128, attn_width / 4)
//   mlp_width  = 4 * width
//   dt_rank    = ceil(width / 16)
//   base_width = width
struct ModelConfig {
  Arch arch = Arch::SambaY;
  std::size_t depth = 8;
  std::size_t aspect_ratio = 0;
  std::size_t width = 0;
  std::size_t attn_width = 0;
  std::size_t head_dim = 0;
  std::size_t kv_group = 4;
  std::size_t mlp_width = 0;
  std::size_t window = 128;
  std::size_t vocab_size = 260;
  Parameterization parameterization = Parameterization::MuPPP;
  bool tie_embeddings = true;
  NormKind norm = NormKind::RMS;
  double norm_eps = 1e-5;
  std::size_t ssm_state = 16;
  std::size_t conv_kernel = 4;
  std::size_t dt_rank = 0;
  bool normalized_gmu = false;
  std::size_t base_width = 0;
  double rope_base = 10000.0;
  double init_std = 0.02;

  std::size_t resolved_aspect_ratio() const;
  std::size_t w() const;
  std::size_t w_attn() const;
  std::size_t d_head() const;
  std::size_t n_heads() const;
  std::size_t n_kv_heads() const;
  std::size_t w_mlp() const;
  std::size_t d_inner() const { return 2 * w(); }
  std::size_t r_dt() const;
  std::size_t base() const { return base_width ? base_width : w(); }
  bool uses_rope() const { return arch == Arch::TransformerPP || arch == Arch::TransformerLS; }
  bool differential() const { return arch == Arch::SambaYDA; }
  MemorySource memory_source() const { return memory_source_for(arch); }
  // Width of the tapped memory vector read by GMUs.
  std::size_t tap_width() const;

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerSpec {
  MixerKind mixer = MixerKind::Full;
  bool kv_producer = false;
};

struct LayerPlan {
  std::vector<LayerSpec> layers;
  std::optional<std::size_t> kv_producer;
  // Layer whose inner representation the GMUs read.
  std::optional<std::size_t> tap_layer;
  MemorySource tap_source = MemorySource::None;
  // Layers [0, self_decoder_layers) run at every position; the rest only at
  // the requested output positions. Equals layers.size() for non-YOCO archs.
  std::size_t self_decoder_layers = 0;

  std::size_t count(MixerKind k) const;
  // Layers attending over the shared KV cache, producer included.
  std::size_t shared_kv_readers() const;
};

LayerPlan build_layer_plan(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Parameter enumeration and counts.

enum class ParamGroup { Embedding, Unembedding, Hidden, Vector };
enum class Component { Embedding, Attention, Mamba, Gmu, Mlp, Norm };

enum class InitRule {
  Hidden,        // SP: N(0, tau^2); muP/muP++: U(+-1/sqrt(fan_in))
  OutputProj,    // as Hidden, SP std divided by sqrt(2 depth)
  Embedding,     // N(0, 0.02^2) tied, N(0, 1e-8) untied
  Unembedding,   // zeros (untied only)
  Ones,
  Zeros,
  ALog,          // log(1..state_dim) per channel
  DtBias,        // inverse softplus of dt ~ logU(1e-3, 1e-1)
  ConvWeight,    // U(+-1/sqrt(kernel))
  Lambda,        // N(0, 0.1^2)
};

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamGroup group = ParamGroup::Hidden;
  Component component = Component::Attention;
  InitRule init = InitRule::Hidden;
  std::size_t fan_in = 1;
};

std::string group_name(ParamGroup g);
std::string component_name(Component c);

// Every parameter of the model in a fixed order. Allocation-free, so it
// works at full scale.
std::vector<ParamSpec> enumerate_params(const ModelConfig& cfg);

struct ComponentCounts {
  double attn = 0;
  double mamba = 0;
  double gmu = 0;
  double mlp = 0;
  double norm = 0;
  double total_nonembed = 0;
};

struct ParamCount {
  // Closed form: attention q/o (plus own k/v for self-attention layers),
  // Mamba in/out projections, GMU W1/W2, SwiGLU. Shared-KV producer k/v,
  // Mamba conv/x_proj/dt/A/D, norms and other vector parameters are
  // neglected, as in the iso-parametric equations.
  ComponentCounts closed;
  // Sum over the enumerated parameter set.
  ComponentCounts exact;
  double embed = 0;
};

ParamCount count_params(const ModelConfig& cfg);

// Depth-muP residual branch multiplier and muP logit multiplier.
double residual_multiplier(const ModelConfig& cfg);
double logit_multiplier(const ModelConfig& cfg);
double attention_scale(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Instantiated model.

template <typename T>
struct Layer {
  LayerSpec spec;
  NormParams<T> norm1;
  NormParams<T> norm2;
  std::optional<SsmParams<T>> ssm;
  std::optional<AttnParams<T>> attn;
  std::optional<GmuParams<T>> gmu;
  MlpParams<T> mlp;
};

// Intermediate values a forward pass can hand to the decoding runtime.
template <typename T>
struct ForwardCapture {
  std::vector<std::optional<SsmState<T>>> ssm_states;  // per layer
  std::vector<std::optional<KvPair<T>>> kv;            // self-attention and producer layers
  Tensor<T> tap;                                       // rows at the output positions
  Tensor<T> pre_logits;                                // final residual stream before the final norm
  std::vector<std::size_t> token_evals;                // positions evaluated per layer
};

template <typename T>
class Model {
 public:
  Model() = default;

  // Allocates and initialises every parameter. Deterministic in seed.
  static Model init(const ModelConfig& cfg, std::uint64_t seed);
  // Wraps existing tensors (e.g. a loaded checkpoint); names must match
  // enumerate_params(cfg) exactly.
  static Model from_tensors(const ModelConfig& cfg, const std::map<std::string, Tensor<T>>& tensors);

  const ModelConfig& config() const { return cfg_; }
  const LayerPlan& plan() const { return plan_; }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  // Same order as specs().
  const std::vector<Tensor<T>>& params() const { return params_; }
  const Tensor<T>& param(const std::string& name) const;
  const std::vector<Layer<T>>& layers() const { return layers_; }
  const Tensor<T>& embedding() const { return embed_; }
  const Tensor<T>& unembedding() const { return unembed_; }
  const NormParams<T>& final_norm() const { return final_norm_; }
  T residual_mult() const { return residual_mult_; }
  T logit_mult() const { return logit_mult_; }

  // Logits [|positions|, vocab] for the given output positions (ascending;
  // empty means every position). YOCO-style archs evaluate the
  // cross-decoder only at those positions.
  Tensor<T> forward(std::span<const int> tokens, std::span<const int> positions = {},
                    ForwardCapture<T>* capture = nullptr) const;

  // Final hidden state to logits for rows of h.
  Tensor<T> logits_from_hidden(const Tensor<T>& h) const;

  void set_requires_grad(bool on);

 private:
  void wire();

  ModelConfig cfg_;
  LayerPlan plan_;
  std::vector<ParamSpec> specs_;
  std::vector<Tensor<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<Layer<T>> layers_;
  Tensor<T> embed_;
  Tensor<T> unembed_;
  NormParams<T> final_norm_;
  T residual_mult_ = T{1};
  T logit_mult_ = T{1};
};

}  // namespace sambay
