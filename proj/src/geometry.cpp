#include "nmt/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace nmt {

using Point = std::array<double, 2>;

void KeypointSet::validate() const {
  if (coords.empty() || coords.rank() != 2 || coords.cols() != 2) {
    throw ContractError("keypoint set " + image_id + ": coordinates must be an m x 2 matrix");
  }
  if (!coords.all_finite()) throw ContractError("keypoint set " + image_id + ": non-finite coordinate");
  if (labels) {
    if (labels->size() != size()) throw ContractError("keypoint set " + image_id + ": label count differs");
    std::set<std::size_t> seen(labels->begin(), labels->end());
    if (seen.size() != labels->size()) throw ContractError("keypoint set " + image_id + ": duplicate labels");
  }
}

double orient2d(const Point& a, const Point& b, const Point& c) {
  return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
}

double incircle(const Point& a, const Point& b, const Point& c, const Point& d) {
  const double adx = a[0] - d[0], ady = a[1] - d[1];
  const double bdx = b[0] - d[0], bdy = b[1] - d[1];
  const double cdx = c[0] - d[0], cdy = c[1] - d[1];
  const double ad = adx * adx + ady * ady;
  const double bd = bdx * bdx + bdy * bdy;
  const double cd = cdx * cdx + cdy * cdy;
  return adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx);
}

std::vector<Edge> complete_graph(std::size_t m) {
  std::vector<Edge> edges;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = a + 1; b < m; ++b) edges.push_back({a, b});
  }
  return edges;
}

namespace {

constexpr double kDegenerateTol = 1e-12;
constexpr double kSuperScale = 1e3;

struct Triangle {
  std::array<std::size_t, 3> v;
};

// Points rescaled into the unit box; triangulation is invariant to this.
std::vector<Point> normalized_points(const Tensor& points) {
  const std::size_t m = points.rows();
  double minx = points(0, 0), maxx = minx, miny = points(0, 1), maxy = miny;
  for (std::size_t i = 1; i < m; ++i) {
    minx = std::min(minx, points(i, 0));
    maxx = std::max(maxx, points(i, 0));
    miny = std::min(miny, points(i, 1));
    maxy = std::max(maxy, points(i, 1));
  }
  const double extent = std::max(maxx - minx, maxy - miny);
  std::vector<Point> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    out[i] = {extent > 0 ? (points(i, 0) - minx) / extent : 0.0,
              extent > 0 ? (points(i, 1) - miny) / extent : 0.0};
  }
  return out;
}

bool is_degenerate(const std::vector<Point>& p) {
  const std::size_t m = p.size();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      if (std::hypot(p[i][0] - p[j][0], p[i][1] - p[j][1]) <= kDegenerateTol) return true;
    }
  }
  std::size_t far = 1;
  double best = 0.0;
  for (std::size_t i = 1; i < m; ++i) {
    const double d = std::hypot(p[i][0] - p[0][0], p[i][1] - p[0][1]);
    if (d > best) best = d, far = i;
  }
  for (std::size_t i = 1; i < m; ++i) {
    if (std::abs(orient2d(p[0], p[far], p[i])) > kDegenerateTol) return false;
  }
  return true;
}

// Convex hull (counter-clockwise) without collinear interior hull points.
std::vector<std::size_t> convex_hull(const std::vector<Point>& p) {
  std::vector<std::size_t> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<std::size_t> hull(2 * idx.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    while (k >= 2 && orient2d(p[hull[k - 2]], p[hull[k - 1]], p[idx[i]]) <= kDegenerateTol) --k;
    hull[k++] = idx[i];
  }
  for (std::size_t i = idx.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && orient2d(p[hull[k - 2]], p[hull[k - 1]], p[idx[i]]) <= kDegenerateTol) --k;
    hull[k++] = idx[i];
  }
  hull.resize(k - 1);
  return hull;
}

void add_edge(std::set<Edge>& edges, std::size_t a, std::size_t b) {
  if (a != b) edges.insert({std::min(a, b), std::max(a, b)});
}

// A huge but finite super-triangle can drop hull edges of nearly collinear
// boundary runs; re-add each hull segment, split at points lying on it.
void patch_hull(const std::vector<Point>& p, std::set<Edge>& edges) {
  const auto hull = convex_hull(p);
  for (std::size_t h = 0; h < hull.size(); ++h) {
    const std::size_t a = hull[h], b = hull[(h + 1) % hull.size()];
    const double len2 = (p[b][0] - p[a][0]) * (p[b][0] - p[a][0]) +
                        (p[b][1] - p[a][1]) * (p[b][1] - p[a][1]);
    std::vector<std::pair<double, std::size_t>> on_segment{{0.0, a}, {1.0, b}};
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (i == a || i == b) continue;
      if (std::abs(orient2d(p[a], p[b], p[i])) > kDegenerateTol) continue;
      const double t = ((p[i][0] - p[a][0]) * (p[b][0] - p[a][0]) +
                        (p[i][1] - p[a][1]) * (p[b][1] - p[a][1])) / len2;
      if (t > 0.0 && t < 1.0) on_segment.emplace_back(t, i);
    }
    std::sort(on_segment.begin(), on_segment.end());
    for (std::size_t s = 0; s + 1 < on_segment.size(); ++s) {
      add_edge(edges, on_segment[s].second, on_segment[s + 1].second);
    }
  }
}

}  // namespace

std::vector<Edge> delaunay(const Tensor& points) {
  if (points.empty() || points.rank() != 2 || points.cols() != 2) {
    throw ContractError("delaunay: expected an m x 2 matrix");
  }
  const std::size_t m = points.rows();
  if (m < 3) return complete_graph(m);
  auto p = normalized_points(points);
  if (is_degenerate(p)) return complete_graph(m);

  const double s = kSuperScale;
  p.push_back({-s, -s});
  p.push_back({3 * s, -s});
  p.push_back({-s, 3 * s});
  std::vector<Triangle> tris{{{m, m + 1, m + 2}}};

  for (std::size_t i = 0; i < m; ++i) {
    std::vector<Triangle> keep;
    std::map<Edge, int> boundary;
    std::vector<std::pair<std::size_t, std::size_t>> directed;
    for (const auto& t : tris) {
      if (incircle(p[t.v[0]], p[t.v[1]], p[t.v[2]], p[i]) > kDegenerateTol) {
        for (int e = 0; e < 3; ++e) {
          const std::size_t a = t.v[e], b = t.v[(e + 1) % 3];
          ++boundary[{std::min(a, b), std::max(a, b)}];
          directed.emplace_back(a, b);
        }
      } else {
        keep.push_back(t);
      }
    }
    for (const auto& [a, b] : directed) {
      if (boundary[{std::min(a, b), std::max(a, b)}] != 1) continue;
      // (a, b) keeps its CCW orientation from the removed triangle.
      keep.push_back({{a, b, i}});
    }
    tris = std::move(keep);
  }

  std::set<Edge> edges;
  for (const auto& t : tris) {
    if (t.v[0] >= m || t.v[1] >= m || t.v[2] >= m) continue;
    for (int e = 0; e < 3; ++e) add_edge(edges, t.v[e], t.v[(e + 1) % 3]);
  }
  p.resize(m);
  patch_hull(p, edges);
  return {edges.begin(), edges.end()};
}

std::vector<Arc> pseudo_coords(const Tensor& points, const std::vector<Edge>& edges) {
  const std::size_t m = points.rows();
  std::vector<Arc> arcs;
  arcs.reserve(2 * edges.size());
  for (const auto& e : edges) {
    if (e.a >= m || e.b >= m) throw ContractError("pseudo_coords: edge references a missing vertex");
    arcs.push_back({e.a, e.b, {}});
    arcs.push_back({e.b, e.a, {}});
  }
  for (int c = 0; c < 2; ++c) {
    double lo = 0.0, hi = 0.0;
    for (std::size_t k = 0; k < arcs.size(); ++k) {
      const double d = points(arcs[k].dst, c) - points(arcs[k].src, c);
      lo = k ? std::min(lo, d) : d;
      hi = k ? std::max(hi, d) : d;
    }
    for (auto& arc : arcs) {
      const double d = points(arc.dst, c) - points(arc.src, c);
      arc.pseudo[c] = hi > lo ? (d - lo) / (hi - lo) : 0.5;
    }
  }
  return arcs;
}

namespace {

void index_incoming(KeypointGraph& g) {
  g.incoming.assign(g.num_nodes, {});
  for (std::size_t k = 0; k < g.arcs.size(); ++k) g.incoming[g.arcs[k].dst].push_back(k);
}

}  // namespace

KeypointGraph build_graph(const Tensor& points, bool self_loops) {
  KeypointGraph g;
  g.num_nodes = points.rows();
  g.arcs = pseudo_coords(points, delaunay(points));
  g.self_loops = self_loops;
  if (self_loops) {
    for (std::size_t v = 0; v < g.num_nodes; ++v) g.arcs.push_back({v, v, {0.5, 0.5}});
  }
  index_incoming(g);
  return g;
}

KeypointGraph permute_graph(const KeypointGraph& graph, const std::vector<std::size_t>& perm) {
  if (perm.size() != graph.num_nodes) throw ContractError("permute_graph: permutation size differs");
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  KeypointGraph g = graph;
  for (auto& arc : g.arcs) {
    arc.src = inv[arc.src];
    arc.dst = inv[arc.dst];
  }
  index_incoming(g);
  return g;
}

}  // namespace nmt
