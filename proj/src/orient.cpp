#include "orinorm/orient.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <tuple>

#include "orinorm/error.hpp"

namespace orinorm {

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) {
      return false;
    }
    if (rank_[a] < rank_[b]) {
      std::swap(a, b);
    }
    parent_[b] = a;
    if (rank_[a] == rank_[b]) {
      ++rank_[a];
    }
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned char> rank_;
};

bool edge_less(const GraphEdge& a, const GraphEdge& b) {
  return std::tie(a.weight, a.i, a.j) < std::tie(b.weight, b.i, b.j);
}

}  // namespace

double normal_edge_weight(const Vec3& a, const Vec3& b) {
  return std::clamp(1.0 - std::abs(a.dot(b)), 0.0, 1.0);
}

RiemannianGraph riemannian_graph(const PointCloud& cloud, std::span<const Vec3> unoriented,
                                 std::size_t k) {
  const auto index = build_spatial_index(cloud.points);
  return riemannian_graph(cloud, index, unoriented, k);
}

RiemannianGraph riemannian_graph(const PointCloud& cloud, const SpatialIndex& index,
                                 std::span<const Vec3> unoriented, std::size_t k) {
  const std::size_t n = cloud.size();
  if (unoriented.size() != n) {
    throw std::invalid_argument("riemannian_graph: " + std::to_string(unoriented.size()) +
                                " normals for " + std::to_string(n) + " points");
  }
  if (k < 2) {
    throw std::invalid_argument("riemannian_graph: k must be at least 2");
  }
  if (k > n) {
    throw std::invalid_argument("riemannian_graph: k = " + std::to_string(k) +
                                " exceeds cloud size " + std::to_string(n));
  }
  RiemannianGraph graph;
  graph.vertex_count = n;
  graph.k = k;
  const std::size_t kq = std::min(k + 1, n);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& nb : index.knn(cloud.points[i], kq)) {
      if (nb.index == i) {
        continue;
      }
      pairs.emplace_back(std::min(i, nb.index), std::max(i, nb.index));
    }
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  graph.edges.reserve(pairs.size());
  for (auto [i, j] : pairs) {
    graph.edges.push_back({i, j, normal_edge_weight(unoriented[i], unoriented[j])});
  }

  // Join components with nearest-pair bridges (Boruvka rounds over
  // components: each component adds its closest outside pair).
  DisjointSets sets(n);
  for (const auto& e : graph.edges) {
    sets.unite(e.i, e.j);
  }
  while (true) {
    std::vector<std::uint32_t> labels(n);
    std::size_t components = 0;
    std::vector<std::uint32_t> root_label(n, std::numeric_limits<std::uint32_t>::max());
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = sets.find(i);
      if (root_label[r] == std::numeric_limits<std::uint32_t>::max()) {
        root_label[r] = static_cast<std::uint32_t>(components++);
      }
      labels[i] = root_label[r];
    }
    if (components <= 1) {
      break;
    }
    struct Best {
      double d2 = std::numeric_limits<double>::infinity();
      std::size_t a = 0;
      std::size_t b = std::numeric_limits<std::size_t>::max();
    };
    std::vector<Best> best(components);
    for (std::size_t i = 0; i < n; ++i) {
      Best& cb = best[labels[i]];
      double d2 = cb.d2;
      std::size_t other = std::numeric_limits<std::size_t>::max();
      index.nearest_other_label(cloud.points[i], labels, labels[i], d2, other);
      if (other == std::numeric_limits<std::size_t>::max()) {
        continue;
      }
      const auto lo = std::min(i, other);
      const auto hi = std::max(i, other);
      if (d2 < cb.d2 || (d2 == cb.d2 && std::tie(lo, hi) < std::tie(cb.a, cb.b))) {
        cb = {d2, lo, hi};
      }
    }
    std::vector<std::pair<std::size_t, std::size_t>> bridges;
    for (const auto& b : best) {
      bridges.emplace_back(b.a, b.b);
    }
    std::sort(bridges.begin(), bridges.end());
    bridges.erase(std::unique(bridges.begin(), bridges.end()), bridges.end());
    for (auto [a, b] : bridges) {
      if (sets.unite(a, b)) {
        graph.edges.push_back({a, b, normal_edge_weight(unoriented[a], unoriented[b])});
        ++graph.bridge_count;
      }
    }
  }
  std::sort(graph.edges.begin(), graph.edges.end(),
            [](const GraphEdge& a, const GraphEdge& b) { return std::tie(a.i, a.j) < std::tie(b.i, b.j); });
  return graph;
}

std::size_t component_count(const RiemannianGraph& graph) {
  DisjointSets sets(graph.vertex_count);
  std::size_t count = graph.vertex_count;
  for (const auto& e : graph.edges) {
    if (sets.unite(e.i, e.j)) {
      --count;
    }
  }
  return count;
}

SpanningTree minimum_spanning_tree(const RiemannianGraph& graph) {
  std::vector<GraphEdge> edges = graph.edges;
  std::sort(edges.begin(), edges.end(), edge_less);
  DisjointSets sets(graph.vertex_count);
  SpanningTree tree;
  tree.edges.reserve(graph.vertex_count > 0 ? graph.vertex_count - 1 : 0);
  for (const auto& e : edges) {
    if (sets.unite(e.i, e.j)) {
      tree.edges.push_back(e);
      tree.total_weight += e.weight;
    }
  }
  if (graph.vertex_count > 0 && tree.edges.size() + 1 != graph.vertex_count) {
    throw DataError("minimum spanning tree: graph is disconnected");
  }
  return tree;
}

OrientedNormalField mst_orient(const PointCloud& cloud, const RiemannianGraph& graph,
                               std::span<const Vec3> unoriented, MstOrientOptions options) {
  const std::size_t n = graph.vertex_count;
  if (unoriented.size() != n || cloud.size() != n) {
    throw std::invalid_argument("mst_orient: graph, cloud and normals disagree in size");
  }
  OrientedNormalField field;
  field.source = FieldSource::MstInit;
  if (n == 0) {
    return field;
  }
  const auto tree = minimum_spanning_tree(graph);

  std::vector<std::vector<std::size_t>> children(n);
  for (const auto& e : tree.edges) {
    children[e.i].push_back(e.j);
    children[e.j].push_back(e.i);
  }
  for (auto& c : children) {
    std::sort(c.begin(), c.end());
  }

  std::size_t seed = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (cloud.points[i].z() > cloud.points[seed].z()) {
      seed = i;
    }
  }
  int seed_sign = unoriented[seed].z() < 0.0 ? -1 : 1;
  if (options.seed_sign) {
    seed_sign = *options.seed_sign < 0 ? -1 : 1;
  }

  field.signs.assign(n, 0);
  field.signs[seed] = seed_sign;
  std::vector<std::size_t> stack{seed};
  while (!stack.empty()) {
    const std::size_t u = stack.back();
    stack.pop_back();
    const Vec3 nu = static_cast<double>(field.signs[u]) * unoriented[u];
    // Push in descending order so ascending indices pop first.
    for (auto it = children[u].rbegin(); it != children[u].rend(); ++it) {
      const std::size_t v = *it;
      if (field.signs[v] != 0) {
        continue;
      }
      field.signs[v] = nu.dot(unoriented[v]) < 0.0 ? -1 : 1;
      stack.push_back(v);
    }
  }
  field.normals.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    field.normals[i] = field.signs[i] < 0 ? Vec3(-unoriented[i]) : unoriented[i];
  }
  return field;
}

std::vector<Vec3> pca_normals(const PointCloud& cloud, const SpatialIndex& index,
                              std::size_t k_pca) {
  std::vector<Vec3> normals(cloud.size());
  std::vector<Vec3> nbhd;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    nbhd.clear();
    for (auto j : query_neighborhood(index, i, k_pca)) {
      nbhd.push_back(cloud.points[j]);
    }
    try {
      normals[i] = pca_normal(nbhd);
    } catch (const DataError& e) {
      throw DataError("PCA normal at point " + std::to_string(i) + ": " + e.what());
    }
  }
  return normals;
}

OrientedNormalField init_oriented_normals(const PointCloud& cloud, std::size_t k_pca,
                                          std::size_t k_graph) {
  if (cloud.size() <= std::max(k_pca, k_graph)) {
    throw std::invalid_argument("init_oriented_normals: cloud of " + std::to_string(cloud.size()) +
                                " points is too small for k_pca = " + std::to_string(k_pca) +
                                ", k_graph = " + std::to_string(k_graph));
  }
  const auto index = build_spatial_index(cloud.points);
  const auto unoriented = pca_normals(cloud, index, k_pca);
  const auto graph = riemannian_graph(cloud, index, unoriented, k_graph);
  return mst_orient(cloud, graph, unoriented);
}

}  // namespace orinorm
