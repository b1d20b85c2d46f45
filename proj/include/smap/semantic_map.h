#pragma once

#include <compare>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "smap/tensor.h"

namespace smap {

// A cell of the semantic map. Both indices are zero-based: `layer` 0 is the
// output of the first transformer block.
struct CellCoord {
  std::size_t position = 0;
  std::size_t layer = 0;

  friend auto operator<=>(const CellCoord&, const CellCoord&) = default;
};

// Bounds of a (possibly partial) view of the map: positions [0, positions)
// and layers [0, layers).
struct MapExtent {
  std::size_t positions = 0;
  std::size_t layers = 0;

  std::size_t cells() const { return positions * layers; }
  bool contains(CellCoord c) const { return c.position < positions && c.layer < layers; }
};

enum class NeighborhoodShape { crisscross, global, local };

struct NeighborhoodKind {
  NeighborhoodShape shape = NeighborhoodShape::crisscross;
  std::size_t radius = 0;  // only meaningful for local; >= 1

  static NeighborhoodKind crisscross() { return {NeighborhoodShape::crisscross, 0}; }
  static NeighborhoodKind global() { return {NeighborhoodShape::global, 0}; }
  static NeighborhoodKind local(std::size_t r);

  std::string name() const;

  friend bool operator==(const NeighborhoodKind&, const NeighborhoodKind&) = default;
};

// Hidden states indexed by (position, layer). Rows are layers; the map grows
// one layer row at a time during a forward pass.
class SemanticMap {
 public:
  SemanticMap() = default;
  explicit SemanticMap(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t num_layers() const { return rows_.size(); }
  std::size_t num_positions() const { return positions_; }
  MapExtent extent() const { return {positions_, rows_.size()}; }
  bool empty() const { return rows_.empty() || positions_ == 0; }

  const Vector& at(CellCoord c) const;
  void set(CellCoord c, Vector v);

  std::span<const Vector> layer(std::size_t l) const;

  // Appends a new top layer. The first row fixes the number of positions.
  void append_layer(std::vector<Vector> row);
  void replace_layer(std::size_t l, std::vector<Vector> row);
  // Appends a position column spanning every existing layer.
  void append_position(std::vector<Vector> column);

  friend bool operator==(const SemanticMap&, const SemanticMap&) = default;

 private:
  void check_cell(const Vector& v) const;

  std::size_t dim_ = 0;
  std::size_t positions_ = 0;
  std::vector<std::vector<Vector>> rows_;
};

// Neighborhoods are returned in a fixed order so that aggregation sums are
// reproducible. All throw IndexError when the anchor lies outside `extent`.

// Same-layer cells left to right, then same-position cells from layer 0 up.
std::vector<CellCoord> cells_crisscross(MapExtent extent, CellCoord anchor);
// Every cell except the anchor, layer by layer from layer 0, left to right.
std::vector<CellCoord> cells_global(MapExtent extent, CellCoord anchor);
// Chebyshev window of radius r around the anchor, clipped to the extent.
std::vector<CellCoord> cells_local(MapExtent extent, CellCoord anchor, std::size_t r);

std::vector<CellCoord> neighborhood(NeighborhoodKind kind, MapExtent extent, CellCoord anchor);

inline std::vector<CellCoord> cells_crisscross(const SemanticMap& m, CellCoord a) {
  return cells_crisscross(m.extent(), a);
}
inline std::vector<CellCoord> cells_global(const SemanticMap& m, CellCoord a) {
  return cells_global(m.extent(), a);
}
inline std::vector<CellCoord> cells_local(const SemanticMap& m, CellCoord a, std::size_t r) {
  return cells_local(m.extent(), a, r);
}

struct Aggregation {
  Vector value;
  std::vector<double> weights;  // aligned with the neighborhood
  double weight_entropy = 0.0;
};

// Cosine-softmax weighted sum of the neighborhood around an anchor vector.
// Throws EmptyNeighborhoodError when `cells` is empty.
Aggregation aggregate_detailed(const SemanticMap& map, std::span<const float> anchor,
                               std::span<const CellCoord> cells);

Vector aggregate(const SemanticMap& map, CellCoord anchor, std::span<const CellCoord> cells);
Vector aggregate(const SemanticMap& map, std::span<const float> anchor,
                 std::span<const CellCoord> cells);

// One line per cell: `layer,position,dim,v0,v1,...` with 1-based layer and
// position, values printed with 9 significant digits.
void write_map_csv(const SemanticMap& map, std::ostream& out);
void save_map_csv(const SemanticMap& map, const std::string& path);

}  // namespace smap
