#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace orinorm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// A point set with optional per-point annotated normals.
///
/// `clean_ref`, when set, names the noise-free twin of this cloud; the twin
/// has the same cardinality and point i of the twin corresponds to point i
/// here.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> gt_normals;  // empty when the cloud carries no normals
  std::optional<std::string> clean_ref;
  std::string name;

  std::size_t size() const { return points.size(); }
  bool has_normals() const { return !gt_normals.empty(); }

  /// Throws DataError on an empty cloud, a normal count mismatch, non-finite
  /// coordinates or normals that are not unit within 1e-6.
  void validate() const;
};

struct Neighbor {
  std::size_t index;
  double distance;
};

/// Static kd-tree answering exact k-nearest-neighbor queries.
///
/// Results are ordered by (distance, index) so equidistant points come back
/// in ascending index order. Immutable after construction; concurrent
/// queries are safe.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 12);

  std::size_t size() const { return points_.size(); }
  std::span<const Vec3> points() const { return points_; }

  /// Exactly k neighbors sorted ascending. Throws std::invalid_argument when
  /// k exceeds the point count.
  std::vector<Neighbor> knn(const Vec3& query, std::size_t k) const;

  /// Nearest point whose label differs from `label`, searching only inside
  /// the ball of squared radius `best_d2`. On success updates `best_d2` and
  /// `best_index`; ties resolve to the lower index.
  void nearest_other_label(const Vec3& query, std::span<const std::uint32_t> labels,
                           std::uint32_t label, double& best_d2,
                           std::size_t& best_index) const;

 private:
  struct Node {
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    int axis = 0;
    double split = 0.0;
    Eigen::Vector3d lo;
    Eigen::Vector3d hi;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size);

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

using SpatialIndex = KdTree;

/// Builds the index; throws std::invalid_argument on an empty point set.
SpatialIndex build_spatial_index(std::span<const Vec3> points);

std::vector<Neighbor> knn(const SpatialIndex& index, const Vec3& query, std::size_t k);

/// The k nearest points to point `query_index` (itself included), with the
/// query moved to the front if a coincident lower-index point preceded it.
std::vector<std::size_t> query_neighborhood(const SpatialIndex& index, std::size_t query_index,
                                            std::size_t k);

/// A query point's neighborhood in a normalized, PCA-aligned frame.
///
/// local = R^T (world - centroid) / scale, and world = centroid + scale * R * local.
/// `neighbor_indices[0]` is always the query itself and the rest follow in
/// ascending distance from it.
struct Patch {
  std::size_t query_index = 0;
  std::vector<std::size_t> neighbor_indices;
  Vec3 centroid = Vec3::Zero();
  double scale = 1.0;
  Mat3 pca_rotation = Mat3::Identity();
  std::vector<Vec3> local_points;

  Vec3 to_local(const Vec3& world) const;
  Vec3 to_world(const Vec3& local) const;
  /// Directions only rotate.
  Vec3 direction_to_local(const Vec3& world) const { return pca_rotation.transpose() * world; }
  Vec3 direction_to_world(const Vec3& local) const { return pca_rotation * local; }
};

Patch extract_patch(const PointCloud& cloud, const SpatialIndex& index, std::size_t query_index,
                    std::size_t n_p);

/// Principal axes of the centered covariance as columns, sorted by
/// descending eigenvalue, third column flipped so det = +1. Throws DataError
/// when the covariance has rank < 2 (collinear or coincident points).
Mat3 pca_rotation(std::span<const Vec3> points);

/// Smallest-eigenvalue eigenvector of the centered covariance (unit length,
/// sign unspecified). Equals the third column of pca_rotation().
Vec3 pca_normal(std::span<const Vec3> points);

/// Length of the axis-aligned bounding-box diagonal.
double bbox_diagonal(std::span<const Vec3> points);

}  // namespace orinorm
