#include "doctest.h"
#include "json.hpp"
#include "orinorm/error.hpp"
#include "orinorm/metrics.hpp"
#include "orinorm/synth.hpp"
#include "support.hpp"

using namespace orinorm;

namespace {

PointCloud shape(ShapeKind kind, std::size_t n, std::uint64_t seed) {
  ShapeSpec s;
  s.kind = kind;
  s.sample_count = n;
  s.seed = seed;
  return sample_shape(s);
}

std::vector<Vec3> random_units(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Vec3> v(n);
  for (auto& x : v) x = testing::random_unit(rng);
  return v;
}

// Direct summation in degrees with per-pair degree conversion.
double oracle_rms(const std::vector<Vec3>& pred, const std::vector<Vec3>& ref, bool oriented) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double c = pred[i].dot(ref[i]) / (pred[i].norm() * ref[i].norm());
    if (!oriented) c = std::abs(c);
    const double deg = std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
    s += deg * deg;
  }
  return std::sqrt(s / pred.size());
}

}  // namespace

TEST_CASE("nearest_clean") {
  const PointCloud c = shape(ShapeKind::Sphere, 500, 1);
  const auto id = nearest_clean(c, c);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(id.clean_index[i] == i);

  PointCloud one;
  one.points = {Vec3(5, 5, 5)};
  one.gt_normals = {Vec3::UnitZ()};
  for (auto j : nearest_clean(c, one).clean_index) CHECK(j == 0);

  const PointCloud noisy = add_noise(c, 1.2, 2);
  const auto corr = nearest_clean(noisy, c);
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c.size(); ++j) {
      if ((c.points[j] - noisy.points[i]).squaredNorm() <
          (c.points[best] - noisy.points[i]).squaredNorm()) {
        best = j;
      }
    }
    CHECK(corr.clean_index[i] == best);
  }
}

TEST_CASE("rmse basics and oracle") {
  const std::vector<Vec3> gt{Vec3::UnitZ()};
  CHECK(rmse(gt, gt, true) == 0.0);
  const std::vector<Vec3> at30{Vec3(std::sin(M_PI / 6), 0, std::cos(M_PI / 6))};
  CHECK(rmse(at30, gt, true) == doctest::Approx(30.0).epsilon(1e-12));
  const std::vector<Vec3> flipped{-Vec3::UnitZ()};
  CHECK(rmse(flipped, gt, true) == doctest::Approx(180.0));
  CHECK(rmse(flipped, gt, false) == 0.0);

  const auto pred = random_units(1000, 3);
  const auto ref = random_units(1000, 4);
  for (bool oriented : {true, false}) {
    CHECK(std::abs(rmse(pred, ref, oriented) - oracle_rms(pred, ref, oriented)) < 1e-10);
  }
}

TEST_CASE("cnd basics") {
  const PointCloud c = shape(ShapeKind::Torus, 400, 5);
  // Predictions are renormalized, so only the last bit may survive.
  CHECK(cnd(c.gt_normals, c, c, true) < 1e-12);
  std::vector<Vec3> ortho;
  for (const auto& n : c.gt_normals) ortho.push_back(n.unitOrthogonal());
  CHECK(cnd(ortho, c, c, true) == doctest::Approx(90.0).epsilon(1e-12));
  CHECK(cnd(ortho, c, c, false) == doctest::Approx(90.0).epsilon(1e-12));
}

TEST_CASE("cnd equals rmse on noise-free clouds for arbitrary predictions") {
  for (auto kind : {ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Cube}) {
    const PointCloud c = shape(kind, 600, 6);
    const PointCloud noisy = add_noise(c, 0.0, 1);
    const auto pred = random_units(c.size(), 7);
    for (bool oriented : {true, false}) {
      CHECK(std::abs(cnd(pred, noisy, c, oriented) - rmse(pred, noisy.gt_normals, oriented)) <
            1e-9);
    }
  }
}

TEST_CASE("cnd against a direct oracle on noisy clouds") {
  const PointCloud c = shape(ShapeKind::Sphere, 800, 8);
  const PointCloud noisy = add_noise(c, 1.2, 9);
  const auto pred = random_units(c.size(), 10);
  const auto corr = nearest_clean(noisy, c);
  std::vector<Vec3> ref;
  for (auto j : corr.clean_index) ref.push_back(c.gt_normals[j]);
  CHECK(std::abs(cnd(pred, noisy, c, false) - oracle_rms(pred, ref, false)) < 1e-10);
  const auto errs = cnd_point_errors(pred, c, corr, true);
  double s = 0.0;
  for (double e : errs) s += e * e;
  CHECK(std::sqrt(s / errs.size()) == doctest::Approx(cnd(pred, c, corr, true)).epsilon(1e-12));
}

TEST_CASE("sign agreement") {
  const PointCloud c = shape(ShapeKind::Sphere, 200, 11);
  const auto corr = nearest_clean(c, c);
  std::vector<Vec3> pred = c.gt_normals;
  CHECK(sign_agreement(pred, c, corr) == 1.0);
  for (auto& v : pred) v = -v;
  CHECK(sign_agreement(pred, c, corr) == 0.0);
  for (std::size_t i = 0; i < pred.size(); i += 2) pred[i] = -pred[i];
  CHECK(sign_agreement(pred, c, corr) == 0.5);
}

TEST_CASE("checked_unit renormalizes near-unit vectors and rejects others") {
  const std::vector<Vec3> ok{Vec3(0, 0, 1.0005)};
  CHECK(checked_unit(ok)[0] == Vec3::UnitZ());
  const std::vector<Vec3> bad{Vec3::UnitX(), Vec3::Zero()};
  try {
    checked_unit(bad);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("prediction 1") != std::string::npos);
  }
  CHECK_THROWS_AS(rmse(std::vector<Vec3>{Vec3::UnitX()}, std::vector<Vec3>{}, true), DataError);
}

TEST_CASE("evaluate_cloud and report rendering") {
  const PointCloud c = shape(ShapeKind::Sphere, 300, 12);
  const auto m = evaluate_cloud(c.gt_normals, c, c);
  CHECK(m.rmse_deg < 1e-12);
  CHECK(m.cnd_deg < 1e-12);
  CHECK(m.oriented_rmse_deg < 1e-12);
  CHECK(m.oriented_cnd_deg < 1e-12);
  CHECK(m.sign_agreement_ratio == 1.0);

  EvalReport r;
  CategoryMetrics a = m;
  a.name = "none";
  CategoryMetrics b = m;
  b.name = "0.6%";
  b.rmse_deg = 10.0;
  b.cnd_deg = 8.0;
  r.categories = {a, b};
  r.average = m;
  r.average.name = "average";
  r.model_id = "m";
  r.dataset_id = "d";
  r.timestamp = "t";
  const auto j = nlohmann::json::parse(report_to_json(r));
  CHECK(j.contains("categories"));
  const std::string table = report_to_table(r);
  CHECK(table.find("RMSE") != std::string::npos);
  CHECK(table.find("CND") != std::string::npos);
  CHECK(table.find("none") < table.find("0.6%"));
  CHECK(table.find("0.6%") < table.find("Ave."));
}
