#include "orinorm/geom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "orinorm/error.hpp"

namespace orinorm {

void PointCloud::validate() const {
  if (points.empty()) {
    throw DataError("point cloud '" + name + "' is empty");
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite()) {
      throw DataError("point " + std::to_string(i) + " of '" + name + "' is not finite");
    }
  }
  if (!gt_normals.empty()) {
    if (gt_normals.size() != points.size()) {
      throw DataError("cloud '" + name + "' has " + std::to_string(points.size()) + " points but " +
                      std::to_string(gt_normals.size()) + " normals");
    }
    for (std::size_t i = 0; i < gt_normals.size(); ++i) {
      if (!gt_normals[i].allFinite() || std::abs(gt_normals[i].norm() - 1.0) > 1e-6) {
        throw DataError("normal " + std::to_string(i) + " of '" + name + "' is not unit length");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// KdTree

KdTree::KdTree(std::span<const Vec3> points, std::size_t leaf_size)
    : points_(points.begin(), points.end()) {
  if (points_.empty()) {
    throw std::invalid_argument("spatial index needs at least one point");
  }
  if (points_.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw std::invalid_argument("spatial index supports at most 2^32-1 points");
  }
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  nodes_.reserve(2 * points_.size() / std::max<std::size_t>(leaf_size, 1) + 1);
  build(0, static_cast<std::uint32_t>(points_.size()), std::max<std::size_t>(leaf_size, 1));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  nodes_[id].lo = lo;
  nodes_[id].hi = hi;
  if (end - begin <= leaf_size) {
    return id;
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] - lo[axis] <= 0.0) {
    return id;  // all points coincide
  }
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return points_[a][axis] < points_[b][axis] ||
                            (points_[a][axis] == points_[b][axis] && a < b);
                   });
  nodes_[id].axis = axis;
  nodes_[id].split = points_[order_[mid]][axis];
  const auto left = build(begin, mid, leaf_size);
  const auto right = build(mid, end, leaf_size);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

namespace {

double box_distance2(const Vec3& q, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi) {
  double d2 = 0.0;
  for (int a = 0; a < 3; ++a) {
    double d = 0.0;
    if (q[a] < lo[a]) {
      d = lo[a] - q[a];
    } else if (q[a] > hi[a]) {
      d = q[a] - hi[a];
    }
    d2 += d * d;
  }
  return d2;
}

struct Candidate {
  double d2;
  std::size_t index;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
};

}  // namespace

std::vector<Neighbor> KdTree::knn(const Vec3& query, std::size_t k) const {
  if (k > points_.size()) {
    throw std::invalid_argument("knn: k = " + std::to_string(k) + " exceeds point count " +
                                std::to_string(points_.size()));
  }
  std::vector<Neighbor> out;
  if (k == 0) {
    return out;
  }
  // Max-heap on (d2, index): the top is the current worst kept candidate.
  std::priority_queue<Candidate> heap;
  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (heap.size() == k && box_distance2(query, node.lo, node.hi) > heap.top().d2) {
      continue;
    }
    if (node.left < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        const Candidate c{(points_[idx] - query).squaredNorm(), idx};
        if (heap.size() < k) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      continue;
    }
    // Visit the nearer child first (pushed last).
    const bool go_left = query[node.axis] < node.split;
    stack.push_back(go_left ? node.right : node.left);
    stack.push_back(go_left ? node.left : node.right);
  }
  out.resize(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = {heap.top().index, std::sqrt(heap.top().d2)};
    heap.pop();
  }
  return out;
}

void KdTree::nearest_other_label(const Vec3& query, std::span<const std::uint32_t> labels,
                                 std::uint32_t label, double& best_d2,
                                 std::size_t& best_index) const {
  std::vector<std::int32_t> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[stack.back()];
    stack.pop_back();
    if (box_distance2(query, node.lo, node.hi) > best_d2) {
      continue;
    }
    if (node.left < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) {
        const std::size_t idx = order_[i];
        if (labels[idx] == label) {
          continue;
        }
        const double d2 = (points_[idx] - query).squaredNorm();
        if (d2 < best_d2 || (d2 == best_d2 && idx < best_index)) {
          best_d2 = d2;
          best_index = idx;
        }
      }
      continue;
    }
    const bool go_left = query[node.axis] < node.split;
    stack.push_back(go_left ? node.right : node.left);
    stack.push_back(go_left ? node.left : node.right);
  }
}

SpatialIndex build_spatial_index(std::span<const Vec3> points) { return KdTree(points); }

std::vector<Neighbor> knn(const SpatialIndex& index, const Vec3& query, std::size_t k) {
  return index.knn(query, k);
}

// ---------------------------------------------------------------------------
// PCA

Mat3 pca_rotation(std::span<const Vec3> points) {
  if (points.size() < 3) {
    throw DataError("PCA needs at least 3 points, got " + std::to_string(points.size()));
  }
  Vec3 mean = Vec3::Zero();
  for (const auto& p : points) {
    mean += p;
  }
  mean /= static_cast<double>(points.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : points) {
    const Vec3 d = p - mean;
    cov.noalias() += d * d.transpose();
  }
  cov /= static_cast<double>(points.size());

  Eigen::SelfAdjointEigenSolver<Mat3> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw NumericError("PCA eigen-decomposition failed");
  }
  const Vec3 evals = solver.eigenvalues();  // ascending
  if (!(evals[2] > 0.0) || evals[1] <= 1e-12 * evals[2]) {
    throw DataError("degenerate neighborhood: covariance rank < 2");
  }
  Mat3 rot;
  rot.col(0) = solver.eigenvectors().col(2);
  rot.col(1) = solver.eigenvectors().col(1);
  rot.col(2) = solver.eigenvectors().col(0);
  if (rot.determinant() < 0.0) {
    rot.col(2) = -rot.col(2);
  }
  return rot;
}

Vec3 pca_normal(std::span<const Vec3> points) { return pca_rotation(points).col(2).normalized(); }

double bbox_diagonal(std::span<const Vec3> points) {
  if (points.empty()) {
    throw std::invalid_argument("bbox_diagonal of an empty point set");
  }
  Vec3 lo = points.front();
  Vec3 hi = points.front();
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return (hi - lo).norm();
}

// ---------------------------------------------------------------------------
// Patches

Vec3 Patch::to_local(const Vec3& world) const {
  return pca_rotation.transpose() * ((world - centroid) / scale);
}

Vec3 Patch::to_world(const Vec3& local) const { return centroid + scale * (pca_rotation * local); }

std::vector<std::size_t> query_neighborhood(const SpatialIndex& index, std::size_t query_index,
                                            std::size_t k) {
  if (query_index >= index.size()) {
    throw std::invalid_argument("query index out of range");
  }
  const auto nbrs = index.knn(index.points()[query_index], k);
  std::vector<std::size_t> out;
  out.reserve(k);
  if (k == 0) {
    return out;
  }
  out.push_back(query_index);
  for (const auto& n : nbrs) {
    if (n.index != query_index && out.size() < k) {
      out.push_back(n.index);
    }
  }
  return out;
}

Patch extract_patch(const PointCloud& cloud, const SpatialIndex& index, std::size_t query_index,
                    std::size_t n_p) {
  if (n_p > cloud.size()) {
    throw std::invalid_argument("patch size " + std::to_string(n_p) + " exceeds cloud size " +
                                std::to_string(cloud.size()));
  }
  if (index.size() != cloud.size()) {
    throw std::invalid_argument("spatial index does not match the cloud");
  }
  Patch patch;
  patch.query_index = query_index;
  patch.neighbor_indices = query_neighborhood(index, query_index, n_p);

  std::vector<Vec3> world;
  world.reserve(n_p);
  for (auto i : patch.neighbor_indices) {
    world.push_back(cloud.points[i]);
  }
  patch.centroid = Vec3::Zero();
  for (const auto& p : world) {
    patch.centroid += p;
  }
  patch.centroid /= static_cast<double>(world.size());
  double radius = 0.0;
  for (const auto& p : world) {
    radius = std::max(radius, (p - patch.centroid).norm());
  }
  if (!(radius > 0.0)) {
    throw DataError("degenerate patch at point " + std::to_string(query_index) +
                    ": all neighbors coincide");
  }
  patch.scale = radius;
  patch.pca_rotation = pca_rotation(world);
  patch.local_points.reserve(world.size());
  for (const auto& p : world) {
    patch.local_points.push_back(patch.to_local(p));
  }
  return patch;
}

}  // namespace orinorm
