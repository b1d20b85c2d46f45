#include "smap/semantic_map.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace smap {

namespace {

std::string coord_string(CellCoord c) {
  return "(position " + std::to_string(c.position) + ", layer " + std::to_string(c.layer) + ")";
}

std::string extent_string(MapExtent e) {
  return std::to_string(e.layers) + " layers x " + std::to_string(e.positions) + " positions";
}

void check_anchor(MapExtent extent, CellCoord anchor) {
  if (!extent.contains(anchor)) {
    throw IndexError("anchor " + coord_string(anchor) + " outside map of " +
                     extent_string(extent));
  }
}

}  // namespace

NeighborhoodKind NeighborhoodKind::local(std::size_t r) {
  if (r == 0) throw std::invalid_argument("local neighborhood radius must be >= 1");
  return {NeighborhoodShape::local, r};
}

std::string NeighborhoodKind::name() const {
  switch (shape) {
    case NeighborhoodShape::crisscross:
      return "crisscross";
    case NeighborhoodShape::global:
      return "global";
    case NeighborhoodShape::local:
      return "local(" + std::to_string(radius) + ")";
  }
  return "?";
}

const Vector& SemanticMap::at(CellCoord c) const {
  if (!extent().contains(c)) {
    throw IndexError("cell " + coord_string(c) + " outside map of " + extent_string(extent()));
  }
  return rows_[c.layer][c.position];
}

void SemanticMap::set(CellCoord c, Vector v) {
  if (!extent().contains(c)) {
    throw IndexError("cell " + coord_string(c) + " outside map of " + extent_string(extent()));
  }
  check_cell(v);
  rows_[c.layer][c.position] = std::move(v);
}

std::span<const Vector> SemanticMap::layer(std::size_t l) const {
  if (l >= rows_.size()) {
    throw IndexError("layer " + std::to_string(l) + " outside map of " + extent_string(extent()));
  }
  return rows_[l];
}

void SemanticMap::check_cell(const Vector& v) const {
  if (v.size() != dim_) {
    throw ShapeError("map cell of dim " + std::to_string(v.size()) + " in map of dim " +
                     std::to_string(dim_));
  }
  if (!all_finite(v)) throw std::domain_error("non-finite hidden state in semantic map");
}

void SemanticMap::append_layer(std::vector<Vector> row) {
  if (rows_.empty()) {
    if (row.empty()) throw ShapeError("cannot start a semantic map with an empty row");
    positions_ = row.size();
  } else if (row.size() != positions_) {
    throw ShapeError("layer row of width " + std::to_string(row.size()) + " in map of width " +
                     std::to_string(positions_));
  }
  for (const auto& v : row) check_cell(v);
  rows_.push_back(std::move(row));
}

void SemanticMap::replace_layer(std::size_t l, std::vector<Vector> row) {
  if (l >= rows_.size()) {
    throw IndexError("layer " + std::to_string(l) + " outside map of " + extent_string(extent()));
  }
  if (row.size() != positions_) {
    throw ShapeError("layer row of width " + std::to_string(row.size()) + " in map of width " +
                     std::to_string(positions_));
  }
  for (const auto& v : row) check_cell(v);
  rows_[l] = std::move(row);
}

void SemanticMap::append_position(std::vector<Vector> column) {
  if (column.size() != rows_.size() || rows_.empty()) {
    throw ShapeError("position column of height " + std::to_string(column.size()) +
                     " in map of " + std::to_string(rows_.size()) + " layers");
  }
  for (const auto& v : column) check_cell(v);
  for (std::size_t l = 0; l < rows_.size(); ++l) rows_[l].push_back(std::move(column[l]));
  ++positions_;
}

std::vector<CellCoord> cells_crisscross(MapExtent extent, CellCoord anchor) {
  check_anchor(extent, anchor);
  std::vector<CellCoord> cells;
  cells.reserve(extent.positions + extent.layers - 2);
  for (std::size_t u = 0; u < extent.positions; ++u) {
    if (u != anchor.position) cells.push_back({u, anchor.layer});
  }
  for (std::size_t v = 0; v < extent.layers; ++v) {
    if (v != anchor.layer) cells.push_back({anchor.position, v});
  }
  return cells;
}

std::vector<CellCoord> cells_global(MapExtent extent, CellCoord anchor) {
  check_anchor(extent, anchor);
  std::vector<CellCoord> cells;
  cells.reserve(extent.cells() - 1);
  for (std::size_t v = 0; v < extent.layers; ++v) {
    for (std::size_t u = 0; u < extent.positions; ++u) {
      if (CellCoord{u, v} != anchor) cells.push_back({u, v});
    }
  }
  return cells;
}

std::vector<CellCoord> cells_local(MapExtent extent, CellCoord anchor, std::size_t r) {
  check_anchor(extent, anchor);
  if (r == 0) throw std::invalid_argument("local neighborhood radius must be >= 1");
  const std::size_t v_lo = anchor.layer >= r ? anchor.layer - r : 0;
  const std::size_t v_hi = std::min(extent.layers - 1, anchor.layer + r);
  const std::size_t u_lo = anchor.position >= r ? anchor.position - r : 0;
  const std::size_t u_hi = std::min(extent.positions - 1, anchor.position + r);
  std::vector<CellCoord> cells;
  for (std::size_t v = v_lo; v <= v_hi; ++v) {
    for (std::size_t u = u_lo; u <= u_hi; ++u) {
      if (CellCoord{u, v} != anchor) cells.push_back({u, v});
    }
  }
  return cells;
}

std::vector<CellCoord> neighborhood(NeighborhoodKind kind, MapExtent extent, CellCoord anchor) {
  switch (kind.shape) {
    case NeighborhoodShape::crisscross:
      return cells_crisscross(extent, anchor);
    case NeighborhoodShape::global:
      return cells_global(extent, anchor);
    case NeighborhoodShape::local:
      return cells_local(extent, anchor, kind.radius);
  }
  return {};
}

Aggregation aggregate_detailed(const SemanticMap& map, std::span<const float> anchor,
                               std::span<const CellCoord> cells) {
  if (cells.empty()) throw EmptyNeighborhoodError("aggregate: empty neighborhood");
  if (anchor.size() != map.dim()) {
    throw ShapeError("aggregate: anchor of dim " + std::to_string(anchor.size()) +
                     " in map of dim " + std::to_string(map.dim()));
  }
  std::vector<double> scores(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    scores[i] = cosine_similarity(map.at(cells[i]), anchor);
  }
  Aggregation agg;
  agg.weights = softmax(std::span<const double>(scores));
  agg.weight_entropy = entropy(agg.weights);

  std::vector<double> acc(map.dim(), 0.0);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Vector& h = map.at(cells[i]);
    const double w = agg.weights[i];
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += w * h[d];
  }
  agg.value.assign(acc.begin(), acc.end());
  return agg;
}

Vector aggregate(const SemanticMap& map, std::span<const float> anchor,
                 std::span<const CellCoord> cells) {
  return aggregate_detailed(map, anchor, cells).value;
}

Vector aggregate(const SemanticMap& map, CellCoord anchor, std::span<const CellCoord> cells) {
  return aggregate_detailed(map, map.at(anchor), cells).value;
}

void write_map_csv(const SemanticMap& map, std::ostream& out) {
  char buf[32];
  for (std::size_t v = 0; v < map.num_layers(); ++v) {
    for (std::size_t u = 0; u < map.num_positions(); ++u) {
      out << (v + 1) << ',' << (u + 1) << ',' << map.dim();
      for (float x : map.at({u, v})) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(x));
        out << ',' << buf;
      }
      out << '\n';
    }
  }
}

void save_map_csv(const SemanticMap& map, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_map_csv(map, out);
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace smap
