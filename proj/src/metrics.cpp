#include "orinorm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <Eigen/Geometry>

#include "json.hpp"

#include "orinorm/error.hpp"

namespace orinorm {

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

double rms_degrees(double sum_sq, std::size_t n) {
  return n == 0 ? 0.0 : std::sqrt(sum_sq / static_cast<double>(n)) * kDeg;
}

void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw DataError(std::string(what) + ": " + std::to_string(a) + " predictions for " +
                    std::to_string(b) + " points");
  }
}

}  // namespace

Correspondence nearest_clean(const PointCloud& noisy, const PointCloud& clean) {
  if (clean.points.empty()) {
    throw DataError("nearest_clean: clean cloud is missing or empty");
  }
  const auto index = build_spatial_index(clean.points);
  return nearest_clean(noisy, index);
}

Correspondence nearest_clean(const PointCloud& noisy, const SpatialIndex& clean_index) {
  Correspondence corr;
  corr.clean_index.resize(noisy.size());
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    corr.clean_index[i] = clean_index.knn(noisy.points[i], 1).front().index;
  }
  return corr;
}

double normal_angle(const Vec3& pred, const Vec3& ref, bool oriented) {
  // atan2 keeps full precision near 0 and 90 degrees, where acos does not.
  double c = pred.dot(ref);
  if (!oriented) {
    c = std::abs(c);
  }
  return std::atan2(pred.cross(ref).norm(), c);
}

std::vector<Vec3> checked_unit(std::span<const Vec3> pred) {
  std::vector<Vec3> out(pred.begin(), pred.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double len = out[i].norm();
    if (!std::isfinite(len) || std::abs(len - 1.0) > 1e-3) {
      throw DataError("prediction " + std::to_string(i) + " is not a unit vector (length " +
                      std::to_string(len) + ")");
    }
    out[i] /= len;
  }
  return out;
}

double rmse(std::span<const Vec3> pred, std::span<const Vec3> gt_normals, bool oriented) {
  check_aligned(pred.size(), gt_normals.size(), "rmse");
  const auto unit = checked_unit(pred);
  double sum = 0.0;
  for (std::size_t i = 0; i < unit.size(); ++i) {
    const double a = normal_angle(unit[i], gt_normals[i], oriented);
    sum += a * a;
  }
  return rms_degrees(sum, unit.size());
}

double cnd(std::span<const Vec3> pred, const PointCloud& noisy, const PointCloud& clean,
           bool oriented) {
  check_aligned(pred.size(), noisy.size(), "cnd");
  return cnd(pred, clean, nearest_clean(noisy, clean), oriented);
}

std::vector<double> cnd_point_errors(std::span<const Vec3> pred, const PointCloud& clean,
                                     const Correspondence& corr, bool oriented) {
  check_aligned(pred.size(), corr.clean_index.size(), "cnd");
  if (!clean.has_normals()) {
    throw DataError("cnd: clean cloud '" + clean.name + "' has no normals");
  }
  const auto unit = checked_unit(pred);
  std::vector<double> out(unit.size());
  for (std::size_t i = 0; i < unit.size(); ++i) {
    out[i] = normal_angle(unit[i], clean.gt_normals[corr.clean_index[i]], oriented) * kDeg;
  }
  return out;
}

double cnd(std::span<const Vec3> pred, const PointCloud& clean, const Correspondence& corr,
           bool oriented) {
  check_aligned(pred.size(), corr.clean_index.size(), "cnd");
  if (!clean.has_normals()) {
    throw DataError("cnd: clean cloud '" + clean.name + "' has no normals");
  }
  const auto unit = checked_unit(pred);
  double sum = 0.0;
  for (std::size_t i = 0; i < unit.size(); ++i) {
    const double a = normal_angle(unit[i], clean.gt_normals[corr.clean_index[i]], oriented);
    sum += a * a;
  }
  return rms_degrees(sum, unit.size());
}

double sign_agreement(std::span<const Vec3> pred, const PointCloud& clean,
                      const Correspondence& corr) {
  check_aligned(pred.size(), corr.clean_index.size(), "sign_agreement");
  if (pred.empty()) {
    return 0.0;
  }
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].dot(clean.gt_normals[corr.clean_index[i]]) > 0.0) {
      ++agree;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(pred.size());
}

double sign_agreement(const OrientedNormalField& field, const PointCloud& clean,
                      const Correspondence& corr) {
  return sign_agreement(field.normals, clean, corr);
}

CategoryMetrics evaluate_cloud(std::span<const Vec3> pred, const PointCloud& noisy,
                               const PointCloud& clean) {
  check_aligned(pred.size(), noisy.size(), "evaluate");
  const auto corr = nearest_clean(noisy, clean);
  CategoryMetrics m;
  m.clouds = 1;
  m.rmse_deg = rmse(pred, noisy.gt_normals, false);
  m.oriented_rmse_deg = rmse(pred, noisy.gt_normals, true);
  m.cnd_deg = cnd(pred, clean, corr, false);
  m.oriented_cnd_deg = cnd(pred, clean, corr, true);
  m.sign_agreement_ratio = sign_agreement(pred, clean, corr);
  return m;
}

std::string report_to_json(const EvalReport& report) {
  auto metrics_json = [](const CategoryMetrics& m) {
    nlohmann::ordered_json j;
    j["name"] = m.name;
    j["clouds"] = m.clouds;
    j["rmse_deg"] = m.rmse_deg;
    j["cnd_deg"] = m.cnd_deg;
    j["oriented_rmse_deg"] = m.oriented_rmse_deg;
    j["oriented_cnd_deg"] = m.oriented_cnd_deg;
    j["sign_agreement_ratio"] = m.sign_agreement_ratio;
    return j;
  };
  nlohmann::ordered_json j;
  j["schema"] = "orinorm.eval/1";
  j["metadata"] = {{"model_id", report.model_id},
                   {"dataset_id", report.dataset_id},
                   {"timestamp", report.timestamp}};
  j["categories"] = nlohmann::ordered_json::array();
  for (const auto& c : report.categories) {
    j["categories"].push_back(metrics_json(c));
  }
  j["average"] = metrics_json(report.average);
  j["missing"] = report.missing;
  j["skipped_categories"] = report.skipped_categories;
  return j.dump(2) + "\n";
}

std::string report_to_table(const EvalReport& report) {
  std::vector<std::string> header{"Metric"};
  for (const auto& c : report.categories) {
    header.push_back(c.name);
  }
  header.push_back("Ave.");
  struct Row {
    const char* label;
    double CategoryMetrics::*field;
    bool ratio;
  };
  const Row rows[] = {{"RMSE", &CategoryMetrics::rmse_deg, false},
                      {"CND", &CategoryMetrics::cnd_deg, false},
                      {"O-RMSE", &CategoryMetrics::oriented_rmse_deg, false},
                      {"O-CND", &CategoryMetrics::oriented_cnd_deg, false},
                      {"Sign", &CategoryMetrics::sign_agreement_ratio, true}};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.label};
    auto fmt = [&](double v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), r.ratio ? "%.4f" : "%.2f", v);
      return std::string(buf);
    };
    for (const auto& c : report.categories) {
      line.push_back(fmt(c.*(r.field)));
    }
    line.push_back(fmt(report.average.*(r.field)));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      widths[c] = std::max(widths[c], line[c].size());
    }
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      if (c > 0) {
        out << " | ";
      }
      const auto& s = cells[r][c];
      if (c == 0) {
        out << s << std::string(widths[c] - s.size(), ' ');
      } else {
        out << std::string(widths[c] - s.size(), ' ') << s;
      }
    }
    out << "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w;
      out << std::string(total + 3 * (widths.size() - 1), '-') << "\n";
    }
  }
  return out.str();
}

}  // namespace orinorm
