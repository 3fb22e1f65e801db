#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "sambay/arch.hpp"

// Prefill / decode engine. Decoding runs graph-free on single rows; the
// io ledger counts semantic floats (not bytes) moved per layer.
namespace sambay {

// Per-layer KV rows. Unbounded caches append; a window-bounded cache is a
// ring with slot = position % capacity.
template <typename T>
struct KvCache {
  std::size_t k_width = 0;
  std::size_t v_width = 0;
  std::size_t capacity = 0;  // 0: unbounded
  std::size_t filled = 0;    // valid rows
  std::vector<T> k;
  std::vector<T> v;

  void push(std::size_t position, std::span<const T> k_row, std::span<const T> v_row);
  std::size_t floats() const { return filled * (k_width + v_width); }
};

struct LayerIo {
  MixerKind kind = MixerKind::Full;
  bool kv_producer = false;
  double reads = 0;   // floats read from cache/state by the mixer in the last step
  double writes = 0;  // floats written to cache/state by the mixer in the last step
  std::size_t mixer_evals = 0;  // positions evaluated, cumulative
  std::size_t mlp_evals = 0;
  std::size_t kv_projections = 0;  // rows of k/v computed, cumulative
};

struct IoLedger {
  std::vector<LayerIo> layers;
  std::size_t cross_decoder_begin = 0;

  double step_reads(MixerKind k) const;
  // Reads of every layer from cross_decoder_begin on, in the last step.
  double cross_decoder_reads() const;
  std::size_t cross_decoder_mlp_evals() const;
  std::size_t self_decoder_mlp_evals() const;
};

template <typename T>
struct DecodeState {
  ModelConfig config;
  std::size_t position = 0;  // tokens consumed
  std::vector<std::optional<SsmState<T>>> ssm;
  // Self-attention layers own their cache; the KV producer's cache is the
  // shared one the cross-attention layers read.
  std::vector<std::optional<KvCache<T>>> kv;
  std::vector<T> tap;
  IoLedger ledger;
};

template <typename T>
DecodeState<T> zero_state(const Model<T>& model);

template <typename T>
struct PrefillResult {
  DecodeState<T> state;
  std::vector<T> logits;  // next-token logits after the last prompt token
};

// Self-decoder at every prompt position, cross-decoder at the last one.
template <typename T>
PrefillResult<T> prefill(const Model<T>& model, std::span<const int> prompt);

// Advances one token. Throws ConfigError if the state belongs to another
// model configuration.
template <typename T>
std::vector<T> decode_step(const Model<T>& model, DecodeState<T>& state, int token);

struct CacheFootprint {
  double global_kv = 0;
  double swa_kv = 0;
  double self_kv = 0;  // full-attention layers with their own cache (non-YOCO)
  double ssm_state = 0;
  double tap = 0;
  double total() const { return global_kv + swa_kv + self_kv + ssm_state + tap; }
};

template <typename T>
CacheFootprint cache_footprint(const DecodeState<T>& state);
// Footprint after n_tokens, from the configuration alone.
CacheFootprint cache_footprint(const ModelConfig& cfg, std::size_t n_tokens);

struct Sampler {
  enum class Kind { Greedy, TopP } kind = Kind::Greedy;
  double temperature = 0.6;
  double top_p = 0.95;
  std::uint64_t seed = 0;
};

// Greedy is the first maximal logit; top-p keeps the smallest prefix of the
// sorted distribution with mass >= top_p.
int sample_token(std::span<const double> logits, const Sampler& s, std::mt19937_64& rng);

// Prompt excluded from the result.
template <typename T>
std::vector<int> generate(const Model<T>& model, std::span<const int> prompt, std::size_t n_tokens,
                          const Sampler& sampler = {});

template <typename T>
void save_state(const std::filesystem::path& dir, const DecodeState<T>& state);
template <typename T>
DecodeState<T> load_state(const std::filesystem::path& dir, const Model<T>& model);

struct BenchRow {
  std::size_t position = 0;
  double ssm_reads = 0;
  double swa_reads = 0;
  double full_reads = 0;  // KV producer and self full attention
  double cross_reads = 0;
  double gmu_reads = 0;
  double wall_ns = 0;     // median decode_step time
};

// Decode-step cost at each position (prefill of position random tokens
// followed by timed steps).
template <typename T>
std::vector<BenchRow> bench(const Model<T>& model, const std::vector<std::size_t>& positions,
                            std::size_t reps, std::uint64_t seed);

}  // namespace sambay
