#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "orinorm/checkpoint.hpp"
#include "orinorm/geom.hpp"
#include "orinorm/loss.hpp"
#include "orinorm/metrics.hpp"
#include "orinorm/net.hpp"
#include "orinorm/optim.hpp"
#include "orinorm/synth.hpp"

namespace orinorm {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  double lr0 = 5e-4;
  double weight_decay = 0.01;
  std::size_t queries_per_shape = 64;  // per training cloud and epoch
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 10;  // 0 disables intermediate checkpoints
  double grad_clip = 5.0;
  std::size_t k_pca = 16;
  std::size_t k_graph = 8;
  bool use_mst_init = true;
  bool use_feature_augmentation = true;
  bool use_cnd_gt = true;
  bool use_l2 = true;
  bool use_l5 = true;

  void validate() const;
  LossConfig loss_config() const;
  ForwardOptions forward_options() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Deterministic 64-bit seed derived from a base seed and a stream id.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// Network input for one query point together with its patch.
struct NetworkInput {
  ForwardInput input;
  Patch patch;
};

/// Patch of n_p points around `query`, plus a uniform random subsample of
/// n_d cloud points that always contains the query, sorted by distance to
/// it, centered at the patch centroid, scaled to the unit ball and rotated
/// into the patch's PCA frame. Clouds smaller than n_d are sampled with
/// replacement (warning once). `n_init_world` is rotated into the same frame.
NetworkInput build_network_input(const PointCloud& cloud, const SpatialIndex& index,
                                 std::size_t query, const Vec3& n_init_world, std::size_t n_p,
                                 std::size_t n_d, std::mt19937_64& rng);

/// A training cloud with everything that does not depend on the query.
struct TrainingCloud {
  std::string name;
  PointCloud noisy;
  PointCloud clean;
  SpatialIndex index;
  Correspondence corr;
  std::vector<Vec3> n_init;  // PCA+MST oriented normals of the noisy cloud

  TrainingCloud(PointCloud noisy_cloud, PointCloud clean_cloud, std::size_t k_pca,
                std::size_t k_graph);
};

std::vector<TrainingCloud> load_training_clouds(const DatasetManifest& manifest,
                                                const TrainConfig& config);

struct TrainingItem {
  NetworkInput net;
  Vec3 gt_cnd;    // clean twin's normal, PCA frame
  Vec3 gt_stale;  // annotated normal of the noisy point, PCA frame
  std::size_t cloud = 0;
  std::size_t query = 0;
};

TrainingItem make_training_item(const std::vector<TrainingCloud>& clouds, std::size_t cloud,
                                std::size_t query, const ModelConfig& model,
                                std::mt19937_64& rng);
/// Uniformly random cloud and query point.
TrainingItem sample_training_item(const std::vector<TrainingCloud>& clouds,
                                  const ModelConfig& model, std::mt19937_64& rng);

struct EpochLoss {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0;
  std::array<double, 5> parts{};
};

/// Loss and its terms for one item; gradients accumulate into the model
/// scaled by `weight` when `backward` is set.
EpochLoss item_loss(const Model& model, const TrainingItem& item, const TrainConfig& config,
                    double weight, bool backward);

struct TrainState {
  Model model;
  OptimizerState optimizer;
  TrainConfig config;
  std::size_t epoch = 0;  // completed epochs
  std::vector<EpochLoss> history;
};

Checkpoint make_checkpoint(const TrainState& state);
TrainState restore_checkpoint(const Checkpoint& ckpt);

/// Writes the checkpoint and a model.json sidecar next to it.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Accepts the path with or without the ".ckpt" extension. Throws DataError
/// on corruption or when an array disagrees with the model's parameter shape.
TrainState load_checkpoint(const std::filesystem::path& path);

std::size_t steps_per_epoch(std::size_t cloud_count, const TrainConfig& config);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> stop_after_epoch;  // simulate an interrupted run
  std::ostream* log = nullptr;
};

/// Trains on the manifest's train split. Writes `<out>/losses.csv`,
/// `<out>/model.json`, `<out>/epoch_XXXX.ckpt` every checkpoint_every epochs
/// and `<out>/final.ckpt`. Throws NumericError naming the batch on a
/// non-finite loss.
TrainState train(const DatasetManifest& manifest, const ModelConfig& model_config,
                 const TrainConfig& config, const std::filesystem::path& out_dir,
                 const TrainOptions& options = {});

void write_loss_csv(const std::vector<EpochLoss>& history, const std::filesystem::path& path);

}  // namespace orinorm
