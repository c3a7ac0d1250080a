#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "orinorm/geom.hpp"
#include "orinorm/tensor.hpp"

namespace testing {

using orinorm::Vec3;

inline std::vector<Vec3> random_points(std::size_t n, std::uint64_t seed, double lo = -1.0,
                                       double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  return pts;
}

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(g(rng), g(rng), g(rng));
  } while (v.norm() < 1e-6);
  return v.normalized();
}

inline orinorm::ad::Tensor random_tensor(orinorm::ad::Shape shape, std::mt19937_64& rng,
                                         bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(orinorm::ad::shape_numel(shape));
  for (auto& x : v) x = g(rng);
  return orinorm::ad::Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("orinorm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline double angle_deg(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace testing
