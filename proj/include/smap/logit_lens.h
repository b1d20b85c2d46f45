#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "smap/model.h"
#include "smap/semantic_map.h"

namespace smap {

// Probability assigned to one target token by the language head at every cell
// of a semantic map. Stored layer-major.
struct ConfidenceMap {
  TokenId target = 0;
  std::size_t num_layers = 0;
  std::size_t num_positions = 0;
  std::vector<float> probs;

  float at(CellCoord c) const { return probs[c.layer * num_positions + c.position]; }
  bool empty() const { return probs.empty(); }

  friend bool operator==(const ConfidenceMap&, const ConfidenceMap&) = default;
};

// Throws IndexError for a target outside the vocabulary and
// std::invalid_argument for an empty map.
ConfidenceMap confidence_map(const SemanticMap& map, const ModelWeights& weights, TokenId target);

// Same as calling confidence_map per target, projecting each cell once.
std::vector<ConfidenceMap> confidence_maps(const SemanticMap& map, const ModelWeights& weights,
                                           std::span<const TokenId> targets);

struct ConfidenceSummary {
  TokenId token = 0;
  float max_prob = 0.0f;
  CellCoord argmax_cell;  // first maximal cell in layer-major order
  float mean_prob = 0.0f;

  std::size_t max_layer() const { return argmax_cell.layer; }
};

struct LensSummary {
  std::vector<ConfidenceSummary> present;
  std::vector<ConfidenceSummary> absent;
};

ConfidenceSummary summarize_one(const ConfidenceMap& cm);

// Groups per-token summaries into present and absent tokens. The sets must be
// non-empty and disjoint and every token needs a map in `maps`.
LensSummary summarize(std::span<const ConfidenceMap> maps, std::span<const TokenId> present,
                      std::span<const TokenId> absent);

enum class HeatmapFormat { csv, pgm };

// `lens_<token>.csv` or `lens_<token>.pgm`
std::string heatmap_filename(TokenId target, HeatmapFormat format);

// CSV: header `layer,position,prob` then one row per cell (1-based indices,
// 9 significant digits). PGM: ASCII P2, one pixel row per layer with the
// deepest layer first, pixel = round(prob * 255).
void write_heatmap(const ConfidenceMap& cm, HeatmapFormat format, std::ostream& out);
void export_heatmap(const ConfidenceMap& cm, const std::string& path, HeatmapFormat format);

ConfidenceMap parse_heatmap_csv(std::istream& in, TokenId target);

}  // namespace smap
