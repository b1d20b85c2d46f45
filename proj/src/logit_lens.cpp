#include "smap/logit_lens.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

namespace smap {

namespace {

void check_target(TokenId target, const ModelWeights& weights) {
  if (target >= weights.config.vocab_size) {
    throw IndexError("target token " + std::to_string(target) +
                     " out of range for vocabulary of " +
                     std::to_string(weights.config.vocab_size));
  }
}

const ConfidenceMap& find_map(std::span<const ConfidenceMap> maps, TokenId token) {
  for (const ConfidenceMap& m : maps) {
    if (m.target == token) return m;
  }
  throw std::invalid_argument("no confidence map for token " + std::to_string(token));
}

}  // namespace

std::vector<ConfidenceMap> confidence_maps(const SemanticMap& map, const ModelWeights& weights,
                                           std::span<const TokenId> targets) {
  if (map.empty()) throw std::invalid_argument("confidence_map: empty semantic map");
  for (TokenId t : targets) check_target(t, weights);

  std::vector<ConfidenceMap> out;
  for (TokenId t : targets) {
    out.push_back({t, map.num_layers(), map.num_positions(), {}});
    out.back().probs.reserve(map.extent().cells());
  }
  for (std::size_t v = 0; v < map.num_layers(); ++v) {
    for (std::size_t u = 0; u < map.num_positions(); ++u) {
      const Vector probs = softmax(std::span<const float>(project_logits(map.at({u, v}), weights)));
      for (ConfidenceMap& cm : out) cm.probs.push_back(probs[cm.target]);
    }
  }
  return out;
}

ConfidenceMap confidence_map(const SemanticMap& map, const ModelWeights& weights, TokenId target) {
  const TokenId targets[] = {target};
  return std::move(confidence_maps(map, weights, targets).front());
}

ConfidenceSummary summarize_one(const ConfidenceMap& cm) {
  if (cm.empty()) throw std::invalid_argument("summarize: empty confidence map");
  ConfidenceSummary s;
  s.token = cm.target;
  const auto best = std::max_element(cm.probs.begin(), cm.probs.end());
  const auto idx = static_cast<std::size_t>(best - cm.probs.begin());
  s.max_prob = *best;
  s.argmax_cell = {idx % cm.num_positions, idx / cm.num_positions};
  double sum = 0.0;
  for (float p : cm.probs) sum += p;
  s.mean_prob = static_cast<float>(sum / static_cast<double>(cm.probs.size()));
  // Rounding must not push the mean above the max.
  s.mean_prob = std::min(s.mean_prob, s.max_prob);
  return s;
}

LensSummary summarize(std::span<const ConfidenceMap> maps, std::span<const TokenId> present,
                      std::span<const TokenId> absent) {
  if (present.empty() || absent.empty()) {
    throw std::invalid_argument("summarize: present and absent token sets must be non-empty");
  }
  const std::set<TokenId> present_set(present.begin(), present.end());
  for (TokenId t : absent) {
    if (present_set.count(t)) {
      throw std::invalid_argument("summarize: token " + std::to_string(t) +
                                  " is both present and absent");
    }
  }
  LensSummary out;
  for (TokenId t : present) out.present.push_back(summarize_one(find_map(maps, t)));
  for (TokenId t : absent) out.absent.push_back(summarize_one(find_map(maps, t)));
  return out;
}

std::string heatmap_filename(TokenId target, HeatmapFormat format) {
  return "lens_" + std::to_string(target) + (format == HeatmapFormat::csv ? ".csv" : ".pgm");
}

void write_heatmap(const ConfidenceMap& cm, HeatmapFormat format, std::ostream& out) {
  if (format == HeatmapFormat::csv) {
    char buf[32];
    out << "layer,position,prob\n";
    for (std::size_t v = 0; v < cm.num_layers; ++v) {
      for (std::size_t u = 0; u < cm.num_positions; ++u) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(cm.at({u, v})));
        out << (v + 1) << ',' << (u + 1) << ',' << buf << '\n';
      }
    }
    return;
  }
  out << "P2\n" << cm.num_positions << ' ' << cm.num_layers << "\n255\n";
  for (std::size_t row = 0; row < cm.num_layers; ++row) {
    const std::size_t v = cm.num_layers - 1 - row;
    for (std::size_t u = 0; u < cm.num_positions; ++u) {
      const double p = std::clamp(static_cast<double>(cm.at({u, v})), 0.0, 1.0);
      out << (u ? " " : "") << static_cast<int>(std::lround(p * 255.0));
    }
    out << '\n';
  }
}

void export_heatmap(const ConfidenceMap& cm, const std::string& path, HeatmapFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_heatmap(cm, format, out);
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

ConfidenceMap parse_heatmap_csv(std::istream& in, TokenId target) {
  std::string line;
  if (!std::getline(in, line) || line != "layer,position,prob") {
    throw std::invalid_argument("heatmap csv: missing header");
  }
  struct Row {
    std::size_t layer, position;
    float prob;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Row r{};
    char c1 = 0, c2 = 0;
    if (!(ls >> r.layer >> c1 >> r.position >> c2 >> r.prob) || c1 != ',' || c2 != ',' ||
        r.layer == 0 || r.position == 0) {
      throw std::invalid_argument("heatmap csv: malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  ConfidenceMap cm;
  cm.target = target;
  for (const Row& r : rows) {
    cm.num_layers = std::max(cm.num_layers, r.layer);
    cm.num_positions = std::max(cm.num_positions, r.position);
  }
  if (rows.size() != cm.num_layers * cm.num_positions) {
    throw std::invalid_argument("heatmap csv: grid is not rectangular");
  }
  cm.probs.assign(rows.size(), 0.0f);
  for (const Row& r : rows) cm.probs[(r.layer - 1) * cm.num_positions + (r.position - 1)] = r.prob;
  return cm;
}

}  // namespace smap
