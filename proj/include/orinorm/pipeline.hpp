#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "orinorm/geom.hpp"
#include "orinorm/metrics.hpp"
#include "orinorm/net.hpp"
#include "orinorm/orient.hpp"
#include "orinorm/synth.hpp"

namespace orinorm {

/// Per-query decision of a refinement model, in the patch's PCA frame.
struct RefineResult {
  Vec3 unoriented = Vec3::UnitZ();
  int sgn_mst = 1;
  int s_hat = 1;
};

class Refiner {
 public:
  virtual ~Refiner() = default;
  virtual std::size_t patch_size() const = 0;
  virtual std::size_t cloud_size() const = 0;
  virtual RefineResult refine(const ForwardInput& input) const = 0;
};

/// Runs the trained network: the unoriented normal mapped back through the
/// predicted rotation, the initialization sign and the two-head decision.
class NetworkRefiner final : public Refiner {
 public:
  explicit NetworkRefiner(const Model& model, bool use_mst_init = true)
      : model_(model), use_mst_init_(use_mst_init) {}

  std::size_t patch_size() const override { return model_.config().n_p; }
  std::size_t cloud_size() const override { return model_.config().n_d; }
  RefineResult refine(const ForwardInput& input) const override;

 private:
  Model model_;
  bool use_mst_init_;
};

/// Stand-in that answers with the PCA normal of the patch and never flips
/// the initialization sign.
class StubRefiner final : public Refiner {
 public:
  StubRefiner(std::size_t patch_size, std::size_t cloud_size)
      : patch_size_(patch_size), cloud_size_(cloud_size) {}

  std::size_t patch_size() const override { return patch_size_; }
  std::size_t cloud_size() const override { return cloud_size_; }
  RefineResult refine(const ForwardInput& input) const override;

 private:
  std::size_t patch_size_;
  std::size_t cloud_size_;
};

struct Timing {
  double init_seconds = 0.0;
  double inference_seconds = 0.0;
};

struct EstimateOptions {
  std::size_t k_pca = 16;
  std::size_t k_graph = 8;
  std::size_t subset = 0;  // refine only this many evenly strided points; 0 = all
  std::uint64_t seed = 0;
};

struct EstimateResult {
  OrientedNormalField field;
  Timing timing;
  std::vector<std::size_t> refined;  // indices that went through the refiner
};

OrientedNormalField estimate_baseline(const PointCloud& cloud, std::size_t k_pca = 16,
                                      std::size_t k_graph = 8);

/// PCA+MST initialization followed by per-point refinement.
EstimateResult estimate_network(const PointCloud& cloud, const Refiner& refiner,
                                const EstimateOptions& options = {});

/// Same as estimate_network with the initialization taken from `init_normals`.
EstimateResult refine_external(const PointCloud& cloud, std::span<const Vec3> init_normals,
                               const Refiner& refiner, const EstimateOptions& options = {});

/// Reads an external normal field. Vectors within 1e-3 of unit length are
/// renormalized; others throw DataError naming the line.
std::vector<Vec3> load_init_normals(const std::filesystem::path& path, std::size_t expected);

/// Indices refined under a subset request.
std::vector<std::size_t> subset_indices(std::size_t count, std::size_t subset);

struct EvalOptions {
  std::string model_id = "unspecified";
  std::string timestamp;  // empty: SOURCE_DATE_EPOCH if set, else now
  std::filesystem::path error_dir;  // per-point .err files; empty disables
  std::ostream* warn = nullptr;
};

/// Scores `<pred_dir>/<noisy prefix>.normals` for every manifest entry.
/// Missing predictions are listed and their category skipped.
EvalReport evaluate(const DatasetManifest& manifest, const std::filesystem::path& manifest_path,
                    const std::filesystem::path& pred_dir, const EvalOptions& options = {});

/// Hex FNV-1a 64 digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

/// ISO-8601 UTC time from SOURCE_DATE_EPOCH when set, else the current time.
std::string report_timestamp();

}  // namespace orinorm
