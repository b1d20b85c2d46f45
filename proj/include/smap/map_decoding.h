#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smap/model.h"
#include "smap/semantic_map.h"

namespace smap {

inline constexpr TokenId kEndOfSequence = 1;

enum class DecodeMode { vanilla, map };

// faithful: every step recomputes the whole sequence, so broadcast rewrites
// every position at every refined layer.
// cached: earlier positions keep the states from the step that produced them
// and only the newest position is refined.
enum class CacheMode { faithful, cached };

struct MapDecodeConfig {
  DecodeMode mode = DecodeMode::map;
  float alpha = 0.80f;
  float beta = 0.10f;
  // 1-based index of the first refined block. n_layers + 1 disables
  // refinement; larger values are clamped to n_layers (see resolve_start_layer).
  std::size_t start_layer = 1;
  NeighborhoodKind neighborhood = NeighborhoodKind::crisscross();
  bool broadcast = true;
  bool fusion = true;
  CacheMode cache_mode = CacheMode::faithful;
  bool refine_prefill = true;
  std::size_t max_new_tokens = 16;
  std::optional<TokenId> eos_token = kEndOfSequence;

  // Plain greedy decoding with the language head on the last state.
  static MapDecodeConfig vanilla();

  // Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

struct Preset {
  std::string_view name;
  std::size_t start_layer;
  float alpha;
  float beta;
};

// Hyperparameter presets for the 7B vision-language models the method was
// tuned on (32-layer language backbones).
std::span<const Preset> presets();
const Preset* find_preset(std::string_view name);
void apply_preset(MapDecodeConfig& config, const Preset& preset);

struct StartLayer {
  std::size_t value;  // effective 1-based start layer
  bool clamped;
};

// n_layers + 1 passes through (refinement off); anything larger is clamped to
// n_layers so presets tuned on deep models still apply to shallow ones.
StartLayer resolve_start_layer(std::size_t requested, std::size_t n_layers);

struct Refinement {
  std::vector<Vector> outputs;
  std::size_t neighborhood_size = 0;
  double weight_entropy = 0.0;
};

// Blends the aggregate anchored at `anchor` into the layer outputs:
//   out[u] = (1 - alpha) * F + alpha * h[u]
// for every position when broadcasting, otherwise only for the anchor's
// position. The neighborhood is drawn from the view of `map` bounded by the
// anchor (positions 0..anchor.position, layers 0..anchor.layer). An empty
// neighborhood leaves the outputs untouched.
Refinement refine_layer(std::span<const Vector> layer_outputs, const SemanticMap& map,
                        CellCoord anchor, const MapDecodeConfig& config);

struct Fusion {
  Vector logits;        // what the decoder should use
  Vector local_logits;  // head applied to the local token
  double gap = 0.0;     // max |logits - local_logits|
  std::size_t neighborhood_size = 0;
};

// Global-local logit fusion over the final map, anchored at its last position
// in its top layer. `h_local` is the (refined) state at that cell. With fusion
// off, or when the map has a single cell, the local logits are returned.
Fusion fuse_global_local(const SemanticMap& final_map, std::span<const float> h_local,
                         const ModelWeights& weights, float beta, bool fusion = true);

struct TraceEntry {
  std::size_t step = 0;
  TokenId token_id = 0;
  std::vector<std::size_t> neighborhood_sizes;  // one per refined layer
  std::vector<double> weight_entropy;           // aligned with neighborhood_sizes
  double fused_gap = 0.0;
};

using DecodeTrace = std::vector<TraceEntry>;

struct StepResult {
  TokenId token = 0;
  TraceEntry trace;
};

// One generation session over shared immutable weights.
class DecodeSession {
 public:
  DecodeSession(const ModelWeights& weights, MapDecodeConfig config, std::vector<TokenId> prompt);

  // Emits the next greedy token and appends it to the sequence. Throws
  // ContextOverflowError when the sequence already fills the context.
  StepResult step();

  const std::vector<TokenId>& tokens() const { return tokens_; }
  std::size_t steps_taken() const { return steps_; }
  const MapDecodeConfig& config() const { return config_; }
  StartLayer start_layer() const { return start_; }

  // Semantic map and logits produced by the most recent step.
  const SemanticMap& map() const { return map_; }
  const Vector& logits() const { return logits_; }

 private:
  bool refining_this_step() const;
  StepResult finish_step(TraceEntry trace);
  void step_faithful(TraceEntry& trace);
  void step_cached_prefill(TraceEntry& trace);
  void step_cached_incremental(TraceEntry& trace);
  LayerHook make_hook(TraceEntry& trace) const;

  const ModelWeights& weights_;
  MapDecodeConfig config_;
  StartLayer start_;
  std::vector<TokenId> tokens_;
  std::size_t steps_ = 0;
  SemanticMap map_;
  Vector logits_;
  KvCache cache_;
};

StepResult decode_step(DecodeSession& session);

struct Generation {
  std::vector<TokenId> tokens;
  DecodeTrace trace;
};

// Greedy loop: stops after max_new_tokens or once the end-of-sequence token has
// been emitted (it is included in the output).
Generation generate(const ModelWeights& weights, std::span<const TokenId> prompt,
                    const MapDecodeConfig& config);

// JSON lines, one record per step:
// {"fused_gap":..,"neighborhood_sizes":[..],"step":..,"token_id":..,"weight_entropy":[..]}
std::string trace_entry_json(const TraceEntry& entry);
void write_trace_jsonl(const DecodeTrace& trace, std::ostream& out);

}  // namespace smap
