#include <fstream>

#include "doctest.h"
#include "orinorm/error.hpp"
#include "orinorm/synth.hpp"
#include "support.hpp"

using namespace orinorm;

namespace {

ShapeSpec spec_of(ShapeKind kind, std::size_t n, std::uint64_t seed = 1,
                  DensityMode mode = DensityMode::Uniform) {
  ShapeSpec s;
  s.kind = kind;
  s.sample_count = n;
  s.seed = seed;
  s.density_mode = mode;
  return s;
}

Vec3 torus_point(double R, double r, double theta, double phi) {
  return {(R + r * std::cos(phi)) * std::cos(theta), (R + r * std::cos(phi)) * std::sin(theta),
          r * std::sin(phi)};
}

}  // namespace

TEST_CASE("sphere samples lie on the sphere with normal = position") {
  const PointCloud c = sample_shape(spec_of(ShapeKind::Sphere, 1000));
  REQUIRE(c.size() == 1000);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(std::abs(c.points[i].norm() - 1.0) < 1e-9);
    CHECK((c.gt_normals[i] - c.points[i]).norm() < 1e-9);
  }
}

TEST_CASE("torus normals match the parametrization's finite-difference normal") {
  const double R = 1.0, r = 0.3;
  const PointCloud c = sample_shape(spec_of(ShapeKind::Torus, 500));
  const double h = 1e-6;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Vec3& p = c.points[i];
    const double theta = std::atan2(p.y(), p.x());
    const double phi = std::atan2(p.z(), std::hypot(p.x(), p.y()) - R);
    CHECK((torus_point(R, r, theta, phi) - p).norm() < 1e-9);
    const Vec3 dt = (torus_point(R, r, theta + h, phi) - torus_point(R, r, theta - h, phi)) / (2 * h);
    const Vec3 dp = (torus_point(R, r, theta, phi + h) - torus_point(R, r, theta, phi - h)) / (2 * h);
    Vec3 fd = dt.cross(dp).normalized();
    const Vec3 ring = R * Vec3(std::cos(theta), std::sin(theta), 0.0);
    if (fd.dot(p - ring) < 0) fd = -fd;  // outward
    CHECK((fd - c.gt_normals[i]).norm() < 1e-5);
  }
}

TEST_CASE("cube, cylinder and sheet normals are unit and axis consistent") {
  for (auto kind : {ShapeKind::Cube, ShapeKind::Cylinder, ShapeKind::SheetStack}) {
    const PointCloud c = sample_shape(spec_of(kind, 800));
    CHECK(c.size() == 800);
    CHECK_NOTHROW(c.validate());
  }
  const PointCloud cube = sample_shape(spec_of(ShapeKind::Cube, 800));
  for (std::size_t i = 0; i < cube.size(); ++i) {
    // On the face the normal points along, the coordinate is at +-1.
    const Vec3& n = cube.gt_normals[i];
    int axis = 0;
    n.cwiseAbs().maxCoeff(&axis);
    CHECK(std::abs(n[axis]) == 1.0);
    CHECK(cube.points[i][axis] == doctest::Approx(n[axis]));
  }
}

TEST_CASE("stripes remove bands along x") {
  const PointCloud uni = sample_shape(spec_of(ShapeKind::Sphere, 4000));
  const PointCloud str = sample_shape(spec_of(ShapeKind::Sphere, 4000, 1, DensityMode::Stripes));
  CHECK(str.size() < uni.size());
  // Histogram over 40 bins of t = (x + 1) / 2: removed bins must be empty.
  std::vector<int> hist(40, 0);
  for (const auto& p : str.points) {
    const double t = (p.x() + 1.0) / 2.0;
    hist[std::min(39, static_cast<int>(t * 40))]++;
  }
  for (int b = 0; b < 40; ++b) {
    const double lo = b / 40.0, hi = (b + 1) / 40.0;
    const bool fully_removed = in_removed_stripe(lo + 1e-9) && in_removed_stripe(hi - 1e-9) &&
                               std::floor(4 * lo + 1e-9) == std::floor(4 * hi - 1e-9);
    if (fully_removed) CHECK(hist[b] == 0);
  }
  CHECK(in_removed_stripe(0.0));
  CHECK(in_removed_stripe(0.29));
  CHECK_FALSE(in_removed_stripe(0.1));
  CHECK_FALSE(in_removed_stripe(0.5 - 0.01));
}

TEST_CASE("gradient density thins the high-x end") {
  const PointCloud g = sample_shape(spec_of(ShapeKind::Sphere, 6000, 2, DensityMode::Gradient));
  std::size_t low = 0, high = 0;
  for (const auto& p : g.points) (p.x() < 0 ? low : high)++;
  CHECK(high < low);
  CHECK(gradient_acceptance(0.0) == 1.0);
  CHECK(gradient_acceptance(1.0) == doctest::Approx(0.05));
}

TEST_CASE("add_noise") {
  const PointCloud c = sample_shape(spec_of(ShapeKind::Sphere, 1000));
  const PointCloud same = add_noise(c, 0.0, 3);
  CHECK(same.points == c.points);
  CHECK(same.gt_normals == c.gt_normals);

  const PointCloud a = add_noise(c, 0.6, 3);
  const PointCloud b = add_noise(c, 0.6, 3);
  CHECK(a.points == b.points);
  CHECK(a.gt_normals == c.gt_normals);
  CHECK(a.clean_ref == c.name);
  CHECK(add_noise(c, 0.6, 4).points != a.points);
  CHECK_THROWS_AS(add_noise(c, -1.0, 3), std::invalid_argument);
}

TEST_CASE("add_noise displacement statistics") {
  const PointCloud c = sample_shape(spec_of(ShapeKind::Sphere, 100000, 5));
  const PointCloud n = add_noise(c, 0.6, 6);
  const double sigma = 0.006 * bbox_diagonal(c.points);
  CHECK(bbox_diagonal(c.points) == doctest::Approx(2 * std::sqrt(3.0)).epsilon(0.01));
  for (int axis = 0; axis < 3; ++axis) {
    double s = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double d = n.points[i][axis] - c.points[i][axis];
      s += d;
      sq += d * d;
    }
    const double mean = s / c.size();
    const double sd = std::sqrt(sq / c.size() - mean * mean);
    CHECK(std::abs(sd / sigma - 1.0) < 0.05);
  }
}

TEST_CASE("sampling is deterministic and validated") {
  CHECK(sample_shape(spec_of(ShapeKind::Torus, 300, 9)).points ==
        sample_shape(spec_of(ShapeKind::Torus, 300, 9)).points);
  CHECK(sample_shape(spec_of(ShapeKind::Torus, 300, 9)).points !=
        sample_shape(spec_of(ShapeKind::Torus, 300, 10)).points);
  CHECK_THROWS_AS(sample_shape(spec_of(ShapeKind::Sphere, 50)), std::invalid_argument);
  CHECK(parse_shape_kind("sheets") == ShapeKind::SheetStack);
  CHECK(parse_density_mode("stripes") == DensityMode::Stripes);
  CHECK_THROWS_AS(parse_shape_kind("blob"), std::invalid_argument);
}

TEST_CASE("cloud files round trip") {
  const auto dir = testing::scratch_dir("synth_io");
  const PointCloud c = add_noise(sample_shape(spec_of(ShapeKind::Cube, 200)), 0.5, 1);
  write_cloud(c, dir / "c");
  const PointCloud r = read_cloud(dir / "c");
  REQUIRE(r.size() == c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK((r.points[i] - c.points[i]).norm() < 1e-8);
    CHECK((r.gt_normals[i] - c.gt_normals[i]).norm() < 1e-8);
  }
}

TEST_CASE("cloud file errors name the problem") {
  const auto dir = testing::scratch_dir("synth_err");
  {
    std::ofstream(dir / "a.xyz") << "0 0 0\n1 0 0\n0 1 0\n";
    std::ofstream(dir / "a.normals") << "0 0 1\n0 0 1\n";
  }
  try {
    read_cloud(dir / "a");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("has 2 lines") != std::string::npos);
    CHECK(msg.find("has 3") != std::string::npos);
  }
  { std::ofstream(dir / "b.xyz") << "0 0 0\n1 nan 0\n"; }
  try {
    read_cloud(dir / "b");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("b.xyz:2") != std::string::npos);
  }
  CHECK_THROWS_AS(read_cloud(dir / "missing"), DataError);
}

TEST_CASE("benchmark generation and manifest round trip") {
  const auto dir = testing::scratch_dir("synth_bench");
  BenchmarkOptions opts;
  for (auto kind : {ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Cube}) {
    opts.shapes.push_back(spec_of(kind, 300));
  }
  opts.noise_levels = {0.0, 0.12, 0.6, 1.2};
  opts.seed = 7;
  const auto m = build_benchmark(dir, opts);
  CHECK(m.entries.size() == 12);
  const auto r = read_manifest(dir / "manifest.json");
  REQUIRE(r.entries.size() == m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(r.entries[i].clean == m.entries[i].clean);
    CHECK(r.entries[i].noisy == m.entries[i].noisy);
    CHECK(r.entries[i].normals == m.entries[i].normals);
    CHECK(r.entries[i].category == m.entries[i].category);
    CHECK(r.entries[i].shape == m.entries[i].shape);
    CHECK(r.entries[i].split == m.entries[i].split);
    const PointCloud noisy = r.load_noisy(r.entries[i]);
    const PointCloud clean = r.load_clean(r.entries[i]);
    CHECK(noisy.clean_ref.has_value());
    CHECK(noisy.size() == clean.size());
  }
  CHECK(m.entries[0].category == "none");
  CHECK(m.entries[2].category == "0.6%");

  const auto dir2 = testing::scratch_dir("synth_bench2");
  build_benchmark(dir2, opts);
  const auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(bytes(dir / "torus_uniform_n0.6.xyz") == bytes(dir2 / "torus_uniform_n0.6.xyz"));
  CHECK(bytes(dir / "manifest.json") == bytes(dir2 / "manifest.json"));
  CHECK_THROWS_AS(read_manifest(dir / "nope.json"), DataError);
}

TEST_CASE("category labels") {
  CHECK(category_label(DensityMode::Uniform, 0.0) == "none");
  CHECK(category_label(DensityMode::Uniform, 1.2) == "1.2%");
  CHECK(category_label(DensityMode::Stripes, 0.0) == "stripes");
  CHECK(category_label(DensityMode::Gradient, 0.0) == "gradient");
  CHECK(category_label(DensityMode::Stripes, 0.6) == "stripes+0.6%");
}
