#include "orinorm/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "orinorm/error.hpp"

namespace orinorm {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ 0x51ed2701u) + a) + (b << 20) + c);
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
  return std::string(buf, res.ptr);
}

struct Sample {
  Vec3 p;
  Vec3 n;
};

Sample sample_sphere(const ShapeParams& sp, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 d;
  do {
    d = Vec3(gauss(rng), gauss(rng), gauss(rng));
  } while (d.norm() < 1e-12);
  d.normalize();
  return {sp.radius * d, d};
}

Sample sample_torus(const ShapeParams& sp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double R = sp.major_radius;
  const double r = sp.minor_radius;
  const double theta = 2.0 * std::numbers::pi * uni(rng);
  double phi = 0.0;
  // Area element is proportional to (R + r cos phi).
  while (true) {
    phi = 2.0 * std::numbers::pi * uni(rng);
    if (uni(rng) * (R + r) <= R + r * std::cos(phi)) {
      break;
    }
  }
  const Vec3 n(std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta), std::sin(phi));
  const Vec3 p((R + r * std::cos(phi)) * std::cos(theta), (R + r * std::cos(phi)) * std::sin(theta),
               r * std::sin(phi));
  return {p, n};
}

Sample sample_cube(const ShapeParams& sp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-0.5, 0.5);
  std::uniform_int_distribution<int> face(0, 5);
  const int f = face(rng);
  const int axis = f / 2;
  const double side = (f % 2 == 0) ? 1.0 : -1.0;
  Vec3 p;
  p[axis] = 0.5 * side;
  p[(axis + 1) % 3] = uni(rng);
  p[(axis + 2) % 3] = uni(rng);
  Vec3 n = Vec3::Zero();
  n[axis] = side;
  return {sp.edge * p, n};
}

Sample sample_cylinder(const ShapeParams& sp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double r = sp.radius;
  const double h = sp.height;
  const double side_area = 2.0 * std::numbers::pi * r * h;
  const double cap_area = std::numbers::pi * r * r;
  const double u = uni(rng) * (side_area + 2.0 * cap_area);
  const double theta = 2.0 * std::numbers::pi * uni(rng);
  if (u < side_area) {
    const double z = (uni(rng) - 0.5) * h;
    return {Vec3(r * std::cos(theta), r * std::sin(theta), z),
            Vec3(std::cos(theta), std::sin(theta), 0.0)};
  }
  const double rho = r * std::sqrt(uni(rng));
  const double side = (u < side_area + cap_area) ? 1.0 : -1.0;
  return {Vec3(rho * std::cos(theta), rho * std::sin(theta), 0.5 * h * side), Vec3(0.0, 0.0, side)};
}

Sample sample_sheets(const ShapeParams& sp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-0.5, 0.5);
  std::uniform_int_distribution<int> pick(0, sp.sheet_count - 1);
  const int k = pick(rng);
  const double z = (k - 0.5 * (sp.sheet_count - 1)) * sp.sheet_gap;
  // Even sheets are bottom faces of thin plates, odd sheets are top faces.
  const double nz = (k % 2 == 0) ? -1.0 : 1.0;
  return {Vec3(sp.sheet_size * uni(rng), sp.sheet_size * uni(rng), z), Vec3(0.0, 0.0, nz)};
}

std::pair<double, double> analytic_x_range(const ShapeSpec& spec) {
  const auto& sp = spec.params;
  switch (spec.kind) {
    case ShapeKind::Sphere:
    case ShapeKind::Cylinder:
      return {-sp.radius, sp.radius};
    case ShapeKind::Torus:
      return {-(sp.major_radius + sp.minor_radius), sp.major_radius + sp.minor_radius};
    case ShapeKind::Cube:
      return {-0.5 * sp.edge, 0.5 * sp.edge};
    case ShapeKind::SheetStack:
      return {-0.5 * sp.sheet_size, 0.5 * sp.sheet_size};
  }
  throw std::invalid_argument("unknown shape kind");
}

std::string vector_line(const Vec3& v) {
  return format_number(v.x()) + " " + format_number(v.y()) + " " + format_number(v.z()) + "\n";
}

}  // namespace

void ShapeSpec::validate() const {
  if (sample_count < 100) {
    throw std::invalid_argument("shape sample_count must be at least 100");
  }
  if (!(noise_pct >= 0.0 && noise_pct <= 5.0)) {
    throw std::invalid_argument("shape noise_pct must lie in [0, 5]");
  }
  if (kind == ShapeKind::SheetStack && !(params.sheet_gap > 0.0)) {
    throw std::invalid_argument("sheet stack gap must be positive");
  }
  if (kind == ShapeKind::SheetStack && params.sheet_count < 1) {
    throw std::invalid_argument("sheet stack needs at least one sheet");
  }
}

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Sphere:
      return "sphere";
    case ShapeKind::Torus:
      return "torus";
    case ShapeKind::Cube:
      return "cube";
    case ShapeKind::Cylinder:
      return "cylinder";
    case ShapeKind::SheetStack:
      return "sheets";
  }
  return "unknown";
}

std::string to_string(DensityMode mode) {
  switch (mode) {
    case DensityMode::Uniform:
      return "uniform";
    case DensityMode::Stripes:
      return "stripes";
    case DensityMode::Gradient:
      return "gradient";
  }
  return "unknown";
}

ShapeKind parse_shape_kind(const std::string& name) {
  static const std::map<std::string, ShapeKind> kinds{
      {"sphere", ShapeKind::Sphere},     {"torus", ShapeKind::Torus},
      {"cube", ShapeKind::Cube},         {"cylinder", ShapeKind::Cylinder},
      {"sheets", ShapeKind::SheetStack}, {"sheet_stack", ShapeKind::SheetStack}};
  auto it = kinds.find(name);
  if (it == kinds.end()) {
    throw std::invalid_argument("unknown shape kind '" + name + "'");
  }
  return it->second;
}

DensityMode parse_density_mode(const std::string& name) {
  if (name == "uniform") return DensityMode::Uniform;
  if (name == "stripes" || name == "stripe") return DensityMode::Stripes;
  if (name == "gradient") return DensityMode::Gradient;
  throw std::invalid_argument("unknown density mode '" + name + "'");
}

bool in_removed_stripe(double t) {
  const double u = 4.0 * t;
  return u - std::floor(u) < 0.3;
}

double gradient_acceptance(double t) { return 1.0 - 0.95 * std::clamp(t, 0.0, 1.0); }

PointCloud sample_shape(const ShapeSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, 1));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const auto [x_lo, x_hi] = analytic_x_range(spec);

  PointCloud cloud;
  cloud.name = to_string(spec.kind);
  cloud.points.reserve(spec.sample_count);
  cloud.gt_normals.reserve(spec.sample_count);
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    Sample s;
    switch (spec.kind) {
      case ShapeKind::Sphere:
        s = sample_sphere(spec.params, rng);
        break;
      case ShapeKind::Torus:
        s = sample_torus(spec.params, rng);
        break;
      case ShapeKind::Cube:
        s = sample_cube(spec.params, rng);
        break;
      case ShapeKind::Cylinder:
        s = sample_cylinder(spec.params, rng);
        break;
      case ShapeKind::SheetStack:
        s = sample_sheets(spec.params, rng);
        break;
      default:
        throw std::invalid_argument("unknown shape kind");
    }
    const double t = (s.p.x() - x_lo) / (x_hi - x_lo);
    if (spec.density_mode == DensityMode::Stripes && in_removed_stripe(t)) {
      continue;
    }
    if (spec.density_mode == DensityMode::Gradient && uni(rng) >= gradient_acceptance(t)) {
      continue;
    }
    cloud.points.push_back(s.p);
    cloud.gt_normals.push_back(s.n);
  }
  return cloud;
}

PointCloud add_noise(const PointCloud& clean, double noise_pct, std::uint64_t seed) {
  if (!(noise_pct >= 0.0)) {
    throw std::invalid_argument("noise percentage must be nonnegative");
  }
  if (!clean.has_normals()) {
    throw std::invalid_argument("add_noise: clean cloud has no normals");
  }
  PointCloud noisy = clean;
  noisy.clean_ref = clean.name;
  if (noise_pct == 0.0) {
    return noisy;
  }
  const double sigma = noise_pct / 100.0 * bbox_diagonal(clean.points);
  std::mt19937_64 rng(mix_seed(seed, 2));
  std::normal_distribution<double> gauss(0.0, sigma);
  for (auto& p : noisy.points) {
    const double dx = gauss(rng);
    const double dy = gauss(rng);
    const double dz = gauss(rng);
    p += Vec3(dx, dy, dz);
  }
  return noisy;
}

// ---------------------------------------------------------------------------
// ASCII I/O

void write_vectors(const std::vector<Vec3>& values, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot open '" + path.string() + "' for writing");
  }
  std::string buf;
  buf.reserve(values.size() * 40);
  for (const auto& v : values) {
    buf += vector_line(v);
  }
  out << buf;
  if (!out) {
    throw DataError("failed writing '" + path.string() + "'");
  }
}

void write_scalars(const std::vector<double>& values, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot open '" + path.string() + "' for writing");
  }
  std::string buf;
  for (double v : values) {
    buf += format_number(v);
    buf += '\n';
  }
  out << buf;
  if (!out) {
    throw DataError("failed writing '" + path.string() + "'");
  }
}

std::vector<Vec3> read_vectors(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open '" + path.string() + "'");
  }
  std::vector<Vec3> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.find_first_not_of(" \t") == std::string::npos) {
      continue;
    }
    Vec3 v;
    const char* ptr = line.data();
    const char* end = line.data() + line.size();
    for (int c = 0; c < 3; ++c) {
      while (ptr < end && (*ptr == ' ' || *ptr == '\t')) ++ptr;
      double value = 0.0;
      auto res = std::from_chars(ptr, end, value);
      if (res.ec != std::errc() || !std::isfinite(value)) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": expected three finite numbers");
      }
      v[c] = value;
      ptr = res.ptr;
    }
    while (ptr < end && (*ptr == ' ' || *ptr == '\t')) ++ptr;
    if (ptr != end) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": trailing characters after three numbers");
    }
    out.push_back(v);
  }
  return out;
}

void write_cloud(const PointCloud& cloud, const fs::path& prefix) {
  write_vectors(cloud.points, fs::path(prefix.string() + ".xyz"));
  if (cloud.has_normals()) {
    write_vectors(cloud.gt_normals, fs::path(prefix.string() + ".normals"));
  }
}

PointCloud read_cloud(const fs::path& prefix) {
  PointCloud cloud;
  cloud.name = prefix.filename().string();
  const fs::path xyz(prefix.string() + ".xyz");
  const fs::path normals(prefix.string() + ".normals");
  cloud.points = read_vectors(xyz);
  if (fs::exists(normals)) {
    cloud.gt_normals = read_vectors(normals);
    if (cloud.gt_normals.size() != cloud.points.size()) {
      throw DataError("'" + normals.string() + "' has " + std::to_string(cloud.gt_normals.size()) +
                      " lines but '" + xyz.string() + "' has " +
                      std::to_string(cloud.points.size()));
    }
    for (auto& n : cloud.gt_normals) {
      // Undo the 9-digit rounding of the text format.
      const double len = n.norm();
      if (std::abs(len - 1.0) > 1e-6) {
        throw DataError("'" + normals.string() + "' contains a non-unit normal");
      }
      n /= len;
    }
  }
  if (cloud.points.empty()) {
    throw DataError("'" + xyz.string() + "' contains no points");
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Benchmarks and manifests

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Split parse_split(const std::string& name) {
  if (name == "train" || name == "TRAIN") return Split::Train;
  if (name == "test" || name == "TEST") return Split::Test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

std::string category_label(DensityMode mode, double noise_pct) {
  const std::string noise = noise_pct == 0.0 ? "none" : format_number(noise_pct) + "%";
  if (mode == DensityMode::Uniform) {
    return noise;
  }
  return noise_pct == 0.0 ? to_string(mode) : to_string(mode) + "+" + noise;
}

namespace {

std::string strip_suffix(const std::string& s, const std::string& suffix) {
  if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return s.substr(0, s.size() - suffix.size());
  }
  return s;
}

}  // namespace

PointCloud DatasetManifest::load_noisy(const ManifestEntry& entry) const {
  PointCloud cloud;
  const std::string prefix = strip_suffix(entry.noisy, ".xyz");
  cloud.name = prefix;
  cloud.points = read_vectors(root / entry.noisy);
  cloud.gt_normals = read_vectors(root / entry.normals);
  if (cloud.gt_normals.size() != cloud.points.size()) {
    throw DataError("'" + (root / entry.normals).string() + "' has " +
                    std::to_string(cloud.gt_normals.size()) + " lines but '" +
                    (root / entry.noisy).string() + "' has " + std::to_string(cloud.points.size()));
  }
  for (auto& n : cloud.gt_normals) {
    n.normalize();
  }
  cloud.clean_ref = strip_suffix(entry.clean, ".xyz");
  return cloud;
}

PointCloud DatasetManifest::load_clean(const ManifestEntry& entry) const {
  const fs::path prefix = root / strip_suffix(entry.clean, ".xyz");
  if (!fs::exists(fs::path(prefix.string() + ".xyz"))) {
    throw DataError("clean cloud '" + prefix.string() + ".xyz' referenced by '" + entry.noisy +
                    "' does not exist");
  }
  PointCloud cloud = read_cloud(prefix);
  if (!cloud.has_normals()) {
    throw DataError("clean cloud '" + prefix.string() + "' has no normals");
  }
  return cloud;
}

DatasetManifest build_benchmark(const fs::path& output_dir, const BenchmarkOptions& options) {
  std::error_code ec;
  fs::create_directories(output_dir, ec);
  if (ec) {
    throw DataError("cannot create '" + output_dir.string() + "': " + ec.message());
  }
  DatasetManifest manifest;
  manifest.root = output_dir;
  std::map<std::string, int> name_counts;
  for (std::size_t s = 0; s < options.shapes.size(); ++s) {
    const ShapeSpec& base = options.shapes[s];
    std::string shape_name = to_string(base.kind);
    if (++name_counts[shape_name] > 1) {
      shape_name += "_" + std::to_string(name_counts[shape_name]);
    }
    for (std::size_t d = 0; d < options.densities.size(); ++d) {
      ShapeSpec spec = base;
      spec.density_mode = options.densities[d];
      spec.noise_pct = 0.0;
      spec.seed = mix_seed(options.seed, s + 1, d + 1);
      PointCloud clean = sample_shape(spec);
      const std::string stem = shape_name + "_" + to_string(spec.density_mode);
      clean.name = stem + "_clean";
      write_cloud(clean, output_dir / clean.name);
      for (std::size_t l = 0; l < options.noise_levels.size(); ++l) {
        const double pct = options.noise_levels[l];
        if (!(pct >= 0.0 && pct <= 5.0)) {
          throw std::invalid_argument("noise level must lie in [0, 5]");
        }
        PointCloud noisy = add_noise(clean, pct, mix_seed(options.seed, s + 1, d + 1, l + 1));
        noisy.name = stem + "_n" + format_number(pct);
        write_cloud(noisy, output_dir / noisy.name);
        manifest.entries.push_back({clean.name + ".xyz", noisy.name + ".xyz",
                                    noisy.name + ".normals",
                                    category_label(spec.density_mode, pct), shape_name,
                                    options.split});
      }
    }
  }
  write_manifest(manifest, output_dir / "manifest.json");
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json je;
    je["clean"] = e.clean;
    je["noisy"] = e.noisy;
    je["normals"] = e.normals;
    je["category"] = e.category;
    je["shape"] = e.shape;
    je["split"] = to_string(e.split);
    j["entries"].push_back(je);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot open '" + path.string() + "' for writing");
  }
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open manifest '" + path.string() + "'");
  }
  DatasetManifest manifest;
  manifest.root = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("version").get<int>() != 1) {
      throw DataError("unsupported manifest version in '" + path.string() + "'");
    }
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.clean = je.at("clean").get<std::string>();
      e.noisy = je.at("noisy").get<std::string>();
      e.normals = je.at("normals").get<std::string>();
      e.category = je.at("category").get<std::string>();
      e.shape = je.value("shape", std::string{});
      e.split = parse_split(je.value("split", std::string("train")));
      manifest.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("malformed manifest '" + path.string() + "': " + ex.what());
  }
  return manifest;
}

}  // namespace orinorm
