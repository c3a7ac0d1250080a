#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "orinorm/geom.hpp"
#include "orinorm/orient.hpp"

namespace orinorm {

/// noisy index -> index of the nearest clean point (lowest index on ties).
struct Correspondence {
  std::vector<std::size_t> clean_index;
};

Correspondence nearest_clean(const PointCloud& noisy, const PointCloud& clean);
Correspondence nearest_clean(const PointCloud& noisy, const SpatialIndex& clean_index);

/// Per-point angle in radians between prediction and reference. Unoriented
/// mode uses |cos| (angle in [0, pi/2]); cosines are clamped to [-1, 1].
double normal_angle(const Vec3& pred, const Vec3& ref, bool oriented);

/// Predictions within 1e-3 of unit length are renormalized; anything else
/// throws DataError naming the index.
std::vector<Vec3> checked_unit(std::span<const Vec3> pred);

/// Root-mean-square angle in degrees against the annotated normals.
double rmse(std::span<const Vec3> pred, std::span<const Vec3> gt_normals, bool oriented);

/// Chamfer normal distance in degrees: RMS angle against the normal of each
/// noisy point's nearest clean point.
double cnd(std::span<const Vec3> pred, const PointCloud& noisy, const PointCloud& clean,
           bool oriented);
double cnd(std::span<const Vec3> pred, const PointCloud& clean, const Correspondence& corr,
           bool oriented);

/// Per-point CND angles in degrees (for .err exports).
std::vector<double> cnd_point_errors(std::span<const Vec3> pred, const PointCloud& clean,
                                     const Correspondence& corr, bool oriented);

/// Fraction of points whose prediction has positive dot product with the
/// clean twin's normal.
double sign_agreement(std::span<const Vec3> pred, const PointCloud& clean,
                      const Correspondence& corr);
double sign_agreement(const OrientedNormalField& field, const PointCloud& clean,
                      const Correspondence& corr);

struct CategoryMetrics {
  std::string name;
  std::size_t clouds = 0;
  double rmse_deg = 0.0;
  double cnd_deg = 0.0;
  double oriented_rmse_deg = 0.0;
  double oriented_cnd_deg = 0.0;
  double sign_agreement_ratio = 0.0;
};

struct EvalReport {
  std::vector<CategoryMetrics> categories;  // in first-appearance order
  CategoryMetrics average;
  std::vector<std::string> missing;  // prediction files that were not found
  std::vector<std::string> skipped_categories;
  std::string model_id;
  std::string dataset_id;
  std::string timestamp;
};

/// All five metrics for one cloud.
CategoryMetrics evaluate_cloud(std::span<const Vec3> pred, const PointCloud& noisy,
                               const PointCloud& clean);

std::string report_to_json(const EvalReport& report);
/// Aligned-column table: one column per category plus the average, one row
/// per metric.
std::string report_to_table(const EvalReport& report);

}  // namespace orinorm
