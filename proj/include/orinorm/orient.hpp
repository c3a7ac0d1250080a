#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "orinorm/geom.hpp"

namespace orinorm {

struct GraphEdge {
  std::size_t i;
  std::size_t j;  // i < j
  double weight;
};

/// Symmetric k-NN graph weighted by normal dissimilarity 1 - |n_i . n_j|.
struct RiemannianGraph {
  std::size_t vertex_count = 0;
  std::size_t k = 0;
  std::vector<GraphEdge> edges;  // sorted by (i, j), no duplicates
  std::size_t bridge_count = 0;  // edges added to join k-NN components
};

struct SpanningTree {
  std::vector<GraphEdge> edges;
  double total_weight = 0.0;
};

enum class FieldSource { MstInit, Network, External };

struct OrientedNormalField {
  std::vector<Vec3> normals;
  std::vector<int> signs;  // normals[i] == signs[i] * unoriented[i]
  FieldSource source = FieldSource::MstInit;
};

double normal_edge_weight(const Vec3& a, const Vec3& b);

RiemannianGraph riemannian_graph(const PointCloud& cloud, std::span<const Vec3> unoriented,
                                 std::size_t k);

/// Same as above with a prebuilt index over cloud.points.
RiemannianGraph riemannian_graph(const PointCloud& cloud, const SpatialIndex& index,
                                 std::span<const Vec3> unoriented, std::size_t k);

std::size_t component_count(const RiemannianGraph& graph);

/// Kruskal over (weight, i, j). Throws DataError if the graph is disconnected.
SpanningTree minimum_spanning_tree(const RiemannianGraph& graph);

struct MstOrientOptions {
  /// Sign applied to the seed's normal. Unset: chosen so its z >= 0.
  std::optional<int> seed_sign;
};

/// Depth-first sign propagation over the MST from the max-z point (lowest
/// index on ties); children visited in ascending index; a child flips when
/// its normal disagrees with its oriented parent.
OrientedNormalField mst_orient(const PointCloud& cloud, const RiemannianGraph& graph,
                               std::span<const Vec3> unoriented, MstOrientOptions options = {});

/// Per-point PCA normals over the k_pca-neighborhood.
std::vector<Vec3> pca_normals(const PointCloud& cloud, const SpatialIndex& index,
                              std::size_t k_pca);

OrientedNormalField init_oriented_normals(const PointCloud& cloud, std::size_t k_pca = 16,
                                          std::size_t k_graph = 8);

}  // namespace orinorm
