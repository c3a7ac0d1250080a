#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "orinorm/geom.hpp"

namespace orinorm {

enum class ShapeKind { Sphere, Torus, Cube, Cylinder, SheetStack };
enum class DensityMode { Uniform, Stripes, Gradient };

struct ShapeParams {
  double radius = 1.0;        // sphere, cylinder
  double major_radius = 1.0;  // torus
  double minor_radius = 0.3;  // torus
  double edge = 2.0;          // cube edge length
  double height = 2.0;        // cylinder
  double sheet_size = 2.0;    // sheet stack: square side
  double sheet_gap = 0.05;    // sheet stack: distance between sheets
  int sheet_count = 2;
};

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Sphere;
  ShapeParams params;
  std::size_t sample_count = 1000;
  DensityMode density_mode = DensityMode::Uniform;
  double noise_pct = 0.0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on sample_count < 100, noise outside
  /// [0, 5] or a non-positive sheet gap.
  void validate() const;
};

std::string to_string(ShapeKind kind);
std::string to_string(DensityMode mode);
ShapeKind parse_shape_kind(const std::string& name);
DensityMode parse_density_mode(const std::string& name);

/// Stripe rule: with t the x coordinate mapped to [0, 1] over the bounding
/// box, a point is removed when frac(4 t) < 0.3 (4 bands, 30% of the extent).
bool in_removed_stripe(double t);
/// Gradient rule: acceptance probability ramps linearly from 1.0 at the low
/// x end to 0.05 at the high x end.
double gradient_acceptance(double t);

/// Clean samples of the analytic surface with exact outward normals.
/// Density variants draw `sample_count` candidates and then thin them.
PointCloud sample_shape(const ShapeSpec& spec);

/// Isotropic Gaussian displacement with sigma = pct/100 * bbox diagonal.
/// Normals are copied unchanged and clean_ref is set to the input's name.
PointCloud add_noise(const PointCloud& clean, double noise_pct, std::uint64_t seed);

/// Writes `<prefix>.xyz` and, when the cloud has normals, `<prefix>.normals`.
void write_cloud(const PointCloud& cloud, const std::filesystem::path& prefix);
/// Reads `<prefix>.xyz` and `<prefix>.normals` if it exists.
PointCloud read_cloud(const std::filesystem::path& prefix);

std::vector<Vec3> read_vectors(const std::filesystem::path& path);
void write_vectors(const std::vector<Vec3>& values, const std::filesystem::path& path);
void write_scalars(const std::vector<double>& values, const std::filesystem::path& path);

enum class Split { Train, Test };
std::string to_string(Split split);
Split parse_split(const std::string& name);

/// One (clean, noisy) pair. File fields are prefixes relative to the
/// manifest directory; `normals` is the annotated normal file of the noisy cloud.
struct ManifestEntry {
  std::string clean;
  std::string noisy;
  std::string normals;
  std::string category;
  std::string shape;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory containing manifest.json
  std::vector<ManifestEntry> entries;

  PointCloud load_noisy(const ManifestEntry& entry) const;
  PointCloud load_clean(const ManifestEntry& entry) const;
};

/// Category label: "none", "0.12%", ..., "stripes", "gradient", and
/// "stripes+0.6%" for combined variants.
std::string category_label(DensityMode mode, double noise_pct);

struct BenchmarkOptions {
  std::vector<ShapeSpec> shapes;  // density_mode and noise_pct are ignored
  std::vector<double> noise_levels{0.0, 0.12, 0.6, 1.2};
  std::vector<DensityMode> densities{DensityMode::Uniform};
  Split split = Split::Train;
  std::uint64_t seed = 0;
};

/// Writes one clean/noisy pair per shape x density x noise level plus
/// manifest.json into `output_dir`.
DatasetManifest build_benchmark(const std::filesystem::path& output_dir,
                                const BenchmarkOptions& options);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace orinorm
