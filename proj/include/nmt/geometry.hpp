#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

// 2-D keypoint coordinates of one image (m x 2), optionally with ground-truth labels.
struct KeypointSet {
  Tensor coords;
  std::string image_id;
  std::optional<std::vector<std::size_t>> labels;

  std::size_t size() const { return coords.empty() ? 0 : coords.rows(); }
  // Throws ContractError when the set is empty, non-finite, or labels repeat.
  void validate() const;
};

// Undirected edge with a < b.
struct Edge {
  std::size_t a = 0;
  std::size_t b = 0;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

// Directed message-passing arc carrying its B-spline pseudo-coordinate.
struct Arc {
  std::size_t src = 0;
  std::size_t dst = 0;
  std::array<double, 2> pseudo{0.5, 0.5};
};

struct KeypointGraph {
  std::size_t num_nodes = 0;
  std::vector<Arc> arcs;
  bool self_loops = false;
  // incoming[v] lists arc indices with dst == v, in increasing order.
  std::vector<std::vector<std::size_t>> incoming;
};

// Delaunay edges of the point set (m x 2). Falls back to the complete graph for
// m < 3, collinear sets and duplicate points. Co-circular ties resolve by
// insertion order (point index).
std::vector<Edge> delaunay(const Tensor& points);

std::vector<Edge> complete_graph(std::size_t m);

// Both arcs of every edge (a->b then b->a) with per-graph min-max rescaled
// offsets in [0,1]^2. A constant dimension maps to 0.5.
std::vector<Arc> pseudo_coords(const Tensor& points, const std::vector<Edge>& edges);

// Delaunay graph plus pseudo-coordinates; self-loops get (0.5, 0.5).
KeypointGraph build_graph(const Tensor& points, bool self_loops = true);

// Reorders `graph` so its node i is node perm[i] of the original. Used to check
// permutation equivariance.
KeypointGraph permute_graph(const KeypointGraph& graph, const std::vector<std::size_t>& perm);

// Orientation determinant of (a, b, c); positive when counter-clockwise.
double orient2d(const std::array<double, 2>& a, const std::array<double, 2>& b,
                const std::array<double, 2>& c);
// Positive when d lies strictly inside the circumcircle of CCW triangle (a, b, c).
double incircle(const std::array<double, 2>& a, const std::array<double, 2>& b,
                const std::array<double, 2>& c, const std::array<double, 2>& d);

}  // namespace nmt
