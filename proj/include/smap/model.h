#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "smap/semantic_map.h"
#include "smap/tensor.h"

namespace smap {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_ff = 0;
  std::size_t max_seq_len = 0;
  float norm_eps = 1e-5f;
  float rope_theta = 10000.0f;
  bool tied_embeddings = false;

  std::size_t head_dim() const { return d_model / n_heads; }

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The 4-layer, D=64 configuration used throughout the tests and examples.
ModelConfig toy_config();

// Projection matrices are stored output-major (rows = output features), so a
// projection is `matvec(w, x)`.
struct LayerWeights {
  Vector attn_norm;  // d_model
  Matrix attn_q;     // d_model x d_model
  Matrix attn_k;
  Matrix attn_v;
  Matrix attn_o;
  Vector ffn_norm;   // d_model
  Matrix ffn_gate;   // d_ff x d_model
  Matrix ffn_up;     // d_ff x d_model
  Matrix ffn_down;   // d_model x d_ff

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;  // vocab_size x d_model
  std::vector<LayerWeights> layers;
  Vector final_norm;       // d_model
  Matrix unembedding;      // vocab_size x d_model; empty when tied

  const Matrix& output_head() const {
    return config.tied_embeddings ? token_embedding : unembedding;
  }

  // Checks every shape against `config` and that all entries are finite.
  void validate() const;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

// Seeded random weights; identical seeds give identical weights on every
// platform.
ModelWeights make_random_weights(const ModelConfig& config, std::uint64_t seed);

struct ForwardResult {
  SemanticMap hidden_states;   // n_layers x t, residual stream after each block
  std::vector<Vector> logits;  // one per position
};

// Called after block `layer` (zero-based) with that block's outputs and the map
// holding layers 0..layer. The returned sequence replaces the outputs: it is
// written back into the map and fed to the next block.
using LayerHook = std::function<std::vector<Vector>(
    std::size_t layer, std::span<const Vector> outputs, const SemanticMap& map)>;

// Per-layer keys (post-rotary) and values for every processed position.
struct LayerCache {
  std::vector<Vector> keys;
  std::vector<Vector> values;
};

struct KvCache {
  std::vector<LayerCache> layers;

  explicit KvCache(std::size_t n_layers = 0) : layers(n_layers) {}
  std::size_t length() const { return layers.empty() ? 0 : layers.front().keys.size(); }
};

Vector embed(const ModelWeights& weights, TokenId token);

// Runs one pre-norm block over `inputs`, which occupy positions
// [cache.keys.size(), cache.keys.size() + inputs.size()). Keys and values of
// the new positions are appended to `cache`.
std::vector<Vector> run_block(const ModelWeights& weights, std::size_t layer,
                              std::span<const Vector> inputs, LayerCache& cache);

// Full causal forward pass over `tokens`. When `cache_out` is given it receives
// the keys and values of every layer.
ForwardResult forward_full(std::span<const TokenId> tokens, const ModelWeights& weights,
                           const LayerHook& hook = {}, KvCache* cache_out = nullptr);

// Language head: unembed(final_norm(h)).
Vector project_logits(std::span<const float> h, const ModelWeights& weights);

TokenId greedy_next(std::span<const float> logits);

}  // namespace smap
