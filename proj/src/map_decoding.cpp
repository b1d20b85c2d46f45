#include "smap/map_decoding.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>

#include "json.hpp"

namespace smap {

namespace {

constexpr std::array<Preset, 6> kPresets{{
    {"llava-pope", 29, 0.80f, 0.10f},
    {"llava-mme", 25, 0.84f, 0.93f},
    {"mplug-pope", 28, 0.90f, 0.95f},
    {"mplug-mme", 28, 0.94f, 0.96f},
    {"iblip-pope", 28, 0.90f, 0.99f},
    {"iblip-mme", 19, 0.98f, 0.98f},
}};

bool in_unit_interval(float x) { return std::isfinite(x) && x >= 0.0f && x <= 1.0f; }

// (1 - w) * aggregate + w * state, evaluated in double and rounded once.
Vector blend(std::span<const float> aggregate, std::span<const float> state, float weight) {
  const double w = weight;
  Vector out(state.size());
  for (std::size_t d = 0; d < state.size(); ++d) {
    out[d] = static_cast<float>((1.0 - w) * aggregate[d] + w * state[d]);
  }
  return out;
}

}  // namespace

MapDecodeConfig MapDecodeConfig::vanilla() {
  MapDecodeConfig c;
  c.mode = DecodeMode::vanilla;
  c.fusion = false;
  return c;
}

void MapDecodeConfig::validate() const {
  if (!in_unit_interval(alpha)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (!in_unit_interval(beta)) throw std::invalid_argument("beta must lie in [0, 1]");
  if (start_layer < 1) throw std::invalid_argument("start_layer must be >= 1");
  if (neighborhood.shape == NeighborhoodShape::local && neighborhood.radius < 1) {
    throw std::invalid_argument("local neighborhood radius must be >= 1");
  }
}

std::span<const Preset> presets() { return kPresets; }

const Preset* find_preset(std::string_view name) {
  for (const Preset& p : kPresets) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void apply_preset(MapDecodeConfig& config, const Preset& preset) {
  config.start_layer = preset.start_layer;
  config.alpha = preset.alpha;
  config.beta = preset.beta;
}

StartLayer resolve_start_layer(std::size_t requested, std::size_t n_layers) {
  if (requested > n_layers + 1) return {n_layers, true};
  return {requested, false};
}

Refinement refine_layer(std::span<const Vector> layer_outputs, const SemanticMap& map,
                        CellCoord anchor, const MapDecodeConfig& config) {
  const MapExtent view{anchor.position + 1, anchor.layer + 1};
  if (anchor.layer >= map.num_layers() || anchor.position >= map.num_positions()) {
    throw IndexError("refine_layer: anchor outside the semantic map");
  }
  if (layer_outputs.size() != view.positions) {
    throw ShapeError("refine_layer: " + std::to_string(layer_outputs.size()) +
                     " layer outputs for a map view of width " + std::to_string(view.positions));
  }

  Refinement r;
  r.outputs.assign(layer_outputs.begin(), layer_outputs.end());
  const auto cells = neighborhood(config.neighborhood, view, anchor);
  r.neighborhood_size = cells.size();
  if (cells.empty()) return r;

  const Aggregation agg = aggregate_detailed(map, map.at(anchor), cells);
  r.weight_entropy = agg.weight_entropy;
  if (config.broadcast) {
    for (std::size_t u = 0; u < r.outputs.size(); ++u) {
      r.outputs[u] = blend(agg.value, layer_outputs[u], config.alpha);
    }
  } else {
    r.outputs[anchor.position] = blend(agg.value, layer_outputs[anchor.position], config.alpha);
  }
  return r;
}

Fusion fuse_global_local(const SemanticMap& final_map, std::span<const float> h_local,
                         const ModelWeights& weights, float beta, bool fusion) {
  if (final_map.empty()) throw std::invalid_argument("fuse_global_local: empty semantic map");
  Fusion f;
  f.local_logits = project_logits(h_local, weights);
  const CellCoord anchor{final_map.num_positions() - 1, final_map.num_layers() - 1};
  const auto cells = cells_global(final_map.extent(), anchor);
  f.neighborhood_size = cells.size();
  if (!fusion || cells.empty()) {
    f.logits = f.local_logits;
    return f;
  }

  const Vector global_state = blend(aggregate(final_map, h_local, cells), h_local, beta);
  const Vector global_logits = project_logits(global_state, weights);
  f.logits.resize(global_logits.size());
  for (std::size_t i = 0; i < f.logits.size(); ++i) {
    f.logits[i] = 0.5f * (global_logits[i] + f.local_logits[i]);
    f.gap = std::max(f.gap, std::abs(static_cast<double>(f.logits[i]) - f.local_logits[i]));
  }
  return f;
}

DecodeSession::DecodeSession(const ModelWeights& weights, MapDecodeConfig config,
                             std::vector<TokenId> prompt)
    : weights_(weights),
      config_(config),
      start_(resolve_start_layer(config.start_layer, weights.config.n_layers)),
      tokens_(std::move(prompt)),
      map_(weights.config.d_model),
      cache_(weights.config.n_layers) {
  config_.validate();
  if (tokens_.empty()) throw std::invalid_argument("decode session: empty prompt");
  for (TokenId t : tokens_) {
    if (t >= weights_.config.vocab_size) {
      throw IndexError("token id " + std::to_string(t) + " out of range for vocabulary of " +
                       std::to_string(weights_.config.vocab_size));
    }
  }
}

bool DecodeSession::refining_this_step() const {
  return config_.mode == DecodeMode::map && start_.value <= weights_.config.n_layers &&
         (steps_ > 0 || config_.refine_prefill);
}

LayerHook DecodeSession::make_hook(TraceEntry& trace) const {
  const std::size_t first = start_.value - 1;
  return [this, first, &trace](std::size_t layer, std::span<const Vector> outputs,
                               const SemanticMap& map) {
    if (layer < first) return std::vector<Vector>(outputs.begin(), outputs.end());
    Refinement r = refine_layer(outputs, map, {outputs.size() - 1, layer}, config_);
    trace.neighborhood_sizes.push_back(r.neighborhood_size);
    trace.weight_entropy.push_back(r.weight_entropy);
    return std::move(r.outputs);
  };
}

void DecodeSession::step_faithful(TraceEntry& trace) {
  LayerHook hook;
  if (refining_this_step()) hook = make_hook(trace);
  map_ = forward_full(tokens_, weights_, hook).hidden_states;
}

void DecodeSession::step_cached_prefill(TraceEntry& trace) {
  LayerHook hook;
  if (refining_this_step()) hook = make_hook(trace);
  cache_ = KvCache(weights_.config.n_layers);
  map_ = forward_full(tokens_, weights_, hook, &cache_).hidden_states;
}

void DecodeSession::step_cached_incremental(TraceEntry& trace) {
  const std::size_t n = weights_.config.n_layers;
  const std::size_t pos = tokens_.size() - 1;
  const bool refine = refining_this_step();

  // Cells above the layer being processed are placeholders until reached; the
  // neighborhood view never extends above the current layer.
  map_.append_position(std::vector<Vector>(n, Vector(weights_.config.d_model, 0.0f)));
  Vector x = embed(weights_, tokens_.back());
  for (std::size_t l = 0; l < n; ++l) {
    Vector y = std::move(run_block(weights_, l, std::span<const Vector>(&x, 1), cache_.layers[l])[0]);
    map_.set({pos, l}, y);
    if (refine && l + 1 >= start_.value) {
      const auto cells = neighborhood(config_.neighborhood, {pos + 1, l + 1}, {pos, l});
      double h = 0.0;
      if (!cells.empty()) {
        const Aggregation agg = aggregate_detailed(map_, y, cells);
        h = agg.weight_entropy;
        y = blend(agg.value, y, config_.alpha);
        map_.set({pos, l}, y);
      }
      trace.neighborhood_sizes.push_back(cells.size());
      trace.weight_entropy.push_back(h);
    }
    x = std::move(y);
  }
}

StepResult DecodeSession::step() {
  if (tokens_.size() >= weights_.config.max_seq_len) {
    throw ContextOverflowError("sequence of " + std::to_string(tokens_.size()) +
                               " tokens leaves no room in context of " +
                               std::to_string(weights_.config.max_seq_len));
  }
  TraceEntry trace;
  trace.step = steps_;
  if (config_.cache_mode == CacheMode::faithful) {
    step_faithful(trace);
  } else if (steps_ == 0) {
    step_cached_prefill(trace);
  } else {
    step_cached_incremental(trace);
  }
  return finish_step(std::move(trace));
}

StepResult DecodeSession::finish_step(TraceEntry trace) {
  const CellCoord last{map_.num_positions() - 1, map_.num_layers() - 1};
  const bool fusion = config_.mode == DecodeMode::map && config_.fusion;
  Fusion f = fuse_global_local(map_, map_.at(last), weights_, config_.beta, fusion);
  logits_ = std::move(f.logits);
  trace.fused_gap = f.gap;
  trace.token_id = greedy_next(logits_);
  tokens_.push_back(trace.token_id);
  ++steps_;
  return {trace.token_id, std::move(trace)};
}

StepResult decode_step(DecodeSession& session) { return session.step(); }

Generation generate(const ModelWeights& weights, std::span<const TokenId> prompt,
                    const MapDecodeConfig& config) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (prompt.size() + config.max_new_tokens > weights.config.max_seq_len) {
    throw ContextOverflowError("prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                               std::to_string(config.max_new_tokens) +
                               " new tokens exceeds context of " +
                               std::to_string(weights.config.max_seq_len));
  }
  Generation g;
  if (config.max_new_tokens == 0) return g;
  DecodeSession session(weights, config, {prompt.begin(), prompt.end()});
  while (g.tokens.size() < config.max_new_tokens) {
    StepResult r = session.step();
    g.tokens.push_back(r.token);
    g.trace.push_back(std::move(r.trace));
    if (config.eos_token && r.token == *config.eos_token) break;
  }
  return g;
}

std::string trace_entry_json(const TraceEntry& entry) {
  nlohmann::json j;
  j["step"] = entry.step;
  j["token_id"] = entry.token_id;
  j["neighborhood_sizes"] = entry.neighborhood_sizes;
  j["weight_entropy"] = entry.weight_entropy;
  j["fused_gap"] = entry.fused_gap;
  return j.dump();
}

void write_trace_jsonl(const DecodeTrace& trace, std::ostream& out) {
  for (const TraceEntry& e : trace) out << trace_entry_json(e) << '\n';
}

}  // namespace smap
