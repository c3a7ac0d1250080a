#include "orinorm/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "orinorm/error.hpp"
#include "orinorm/orient.hpp"

namespace orinorm {

using ad::Tensor;

namespace {

void warn_small_cloud(std::size_t size, std::size_t n_d) {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true)) {
    std::cerr << "warning: cloud of " << size << " points is smaller than the " << n_d
              << "-point subsample; sampling with replacement\n";
  }
}

std::filesystem::path with_ckpt_extension(const std::filesystem::path& path) {
  if (path.extension() == ".ckpt") return path;
  std::filesystem::path p = path;
  p += ".ckpt";
  return p;
}

std::string epoch_file(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04zu.ckpt", epoch);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (epochs == 0 || batch_size == 0 || queries_per_shape == 0) {
    fail("epochs, batch_size and queries_per_shape must be positive");
  }
  if (!(lr0 > 0.0) || !(weight_decay >= 0.0) || !(grad_clip > 0.0)) {
    fail("lr0 and grad_clip must be positive, weight_decay nonnegative");
  }
  if (k_pca < 3 || k_graph < 2) fail("k_pca must be at least 3 and k_graph at least 2");
}

LossConfig TrainConfig::loss_config() const {
  LossConfig c;
  c.use_cnd_gt = use_cnd_gt;
  c.use_l2 = use_l2;
  c.use_l5 = use_l5 && use_feature_augmentation;
  return c;
}

ForwardOptions TrainConfig::forward_options() const {
  ForwardOptions o;
  o.use_mst_init = use_mst_init;
  o.with_negative = use_feature_augmentation;
  return o;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr0", lr0},
          {"weight_decay", weight_decay},
          {"queries_per_shape", queries_per_shape},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"grad_clip", grad_clip},
          {"k_pca", k_pca},
          {"k_graph", k_graph},
          {"use_mst_init", use_mst_init},
          {"use_feature_augmentation", use_feature_augmentation},
          {"use_cnd_gt", use_cnd_gt},
          {"use_l2", use_l2},
          {"use_l5", use_l5}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr0 = j.value("lr0", c.lr0);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.queries_per_shape = j.value("queries_per_shape", c.queries_per_shape);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.k_pca = j.value("k_pca", c.k_pca);
  c.k_graph = j.value("k_graph", c.k_graph);
  c.use_mst_init = j.value("use_mst_init", c.use_mst_init);
  c.use_feature_augmentation = j.value("use_feature_augmentation", c.use_feature_augmentation);
  c.use_cnd_gt = j.value("use_cnd_gt", c.use_cnd_gt);
  c.use_l2 = j.value("use_l2", c.use_l2);
  c.use_l5 = j.value("use_l5", c.use_l5);
  return c;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Inputs

NetworkInput build_network_input(const PointCloud& cloud, const SpatialIndex& index,
                                 std::size_t query, const Vec3& n_init_world, std::size_t n_p,
                                 std::size_t n_d, std::mt19937_64& rng) {
  if (query >= cloud.size()) {
    throw std::invalid_argument("query index " + std::to_string(query) + " out of range");
  }
  NetworkInput out;
  out.patch = extract_patch(cloud, index, query, n_p);
  out.input.patch = out.patch.local_points;

  const std::size_t n = cloud.size();
  std::vector<std::size_t> picks;
  picks.reserve(n_d);
  picks.push_back(query);
  if (n >= n_d) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    std::swap(pool[query], pool[n - 1]);
    for (std::size_t t = 0; t + 1 < n_d; ++t) {
      std::uniform_int_distribution<std::size_t> dist(t, n - 2);
      std::swap(pool[t], pool[dist(rng)]);
      picks.push_back(pool[t]);
    }
  } else {
    warn_small_cloud(n, n_d);
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    while (picks.size() < n_d) picks.push_back(dist(rng));
  }
  const Vec3& q = cloud.points[query];
  std::vector<std::pair<double, std::size_t>> order;
  order.reserve(picks.size());
  for (auto i : picks) order.emplace_back((cloud.points[i] - q).squaredNorm(), i);
  std::sort(order.begin(), order.end());

  const Mat3& r = out.patch.pca_rotation;
  double radius = 0.0;
  for (const auto& [d, i] : order) {
    radius = std::max(radius, (cloud.points[i] - out.patch.centroid).norm());
  }
  if (!(radius > 0.0)) radius = 1.0;
  out.input.cloud.reserve(order.size());
  for (const auto& [d, i] : order) {
    out.input.cloud.push_back(r.transpose() * (cloud.points[i] - out.patch.centroid) / radius);
  }
  out.input.n_init = r.transpose() * n_init_world;
  return out;
}

TrainingCloud::TrainingCloud(PointCloud noisy_cloud, PointCloud clean_cloud, std::size_t k_pca,
                             std::size_t k_graph)
    : name(noisy_cloud.name),
      noisy(std::move(noisy_cloud)),
      clean(std::move(clean_cloud)),
      index(noisy.points) {
  if (!clean.has_normals()) {
    throw DataError("training cloud '" + name + "' has no clean normals");
  }
  if (!noisy.has_normals()) {
    throw DataError("training cloud '" + name + "' has no annotated normals");
  }
  corr = nearest_clean(noisy, clean);
  n_init = init_oriented_normals(noisy, k_pca, k_graph).normals;
}

std::vector<TrainingCloud> load_training_clouds(const DatasetManifest& manifest,
                                                const TrainConfig& config) {
  std::vector<TrainingCloud> clouds;
  for (const auto& e : manifest.entries) {
    if (e.split != Split::Train) continue;
    clouds.emplace_back(manifest.load_noisy(e), manifest.load_clean(e), config.k_pca,
                        config.k_graph);
  }
  if (clouds.empty()) {
    throw DataError("manifest has no training entries");
  }
  return clouds;
}

TrainingItem make_training_item(const std::vector<TrainingCloud>& clouds, std::size_t cloud,
                                std::size_t query, const ModelConfig& model,
                                std::mt19937_64& rng) {
  const TrainingCloud& c = clouds.at(cloud);
  TrainingItem item;
  item.cloud = cloud;
  item.query = query;
  item.net = build_network_input(c.noisy, c.index, query, c.n_init[query], model.n_p, model.n_d, rng);
  const Mat3 rt = item.net.patch.pca_rotation.transpose();
  item.gt_cnd = rt * c.clean.gt_normals[c.corr.clean_index[query]];
  item.gt_stale = rt * c.noisy.gt_normals[query];
  return item;
}

TrainingItem sample_training_item(const std::vector<TrainingCloud>& clouds,
                                  const ModelConfig& model, std::mt19937_64& rng) {
  if (clouds.empty()) {
    throw std::invalid_argument("sample_training_item: no clouds");
  }
  const std::size_t cloud = std::uniform_int_distribution<std::size_t>(0, clouds.size() - 1)(rng);
  const std::size_t query =
      std::uniform_int_distribution<std::size_t>(0, clouds[cloud].noisy.size() - 1)(rng);
  return make_training_item(clouds, cloud, query, model, rng);
}

EpochLoss item_loss(const Model& model, const TrainingItem& item, const TrainConfig& config,
                    double weight, bool backward) {
  const LossConfig lc = config.loss_config();
  const ForwardOutput out = model.forward(item.net.input, config.forward_options());
  const LossParts parts = compute_losses(out, config.use_cnd_gt ? item.gt_cnd : item.gt_stale, lc);
  const Tensor total = total_loss(parts, lc);
  EpochLoss loss;
  loss.total = total.item();
  loss.parts = parts.values();
  if (backward) {
    ad::scale(total, weight).backward();
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint make_checkpoint(const TrainState& state) {
  Checkpoint ckpt;
  const auto& params = state.model.params();
  for (const auto& p : params) {
    ckpt.arrays.push_back({"param/" + p.name, p.tensor.shape(), p.tensor.values()});
  }
  if (state.optimizer.m.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.arrays.push_back({"adam_m/" + params[i].name, params[i].tensor.shape(), state.optimizer.m[i]});
      ckpt.arrays.push_back({"adam_v/" + params[i].name, params[i].tensor.shape(), state.optimizer.v[i]});
    }
  }
  const auto& oc = state.optimizer.config;
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : state.history) {
    history.push_back({{"epoch", h.epoch}, {"total", h.total}, {"parts", h.parts}});
  }
  ckpt.meta = {{"model", state.model.config().to_json()},
               {"train", state.config.to_json()},
               {"optimizer",
                {{"step", state.optimizer.step},
                 {"lr0", oc.lr0},
                 {"beta1", oc.beta1},
                 {"beta2", oc.beta2},
                 {"eps", oc.eps},
                 {"weight_decay", oc.weight_decay},
                 {"total_steps", oc.total_steps}}},
               {"epoch", state.epoch},
               {"history", history}};
  return ckpt;
}

TrainState restore_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.meta;
  if (!meta.contains("model")) {
    throw DataError("checkpoint lacks a model configuration");
  }
  TrainState state{Model(ModelConfig::from_json(meta["model"])), {}, {}, 0, {}};
  state.config = TrainConfig::from_json(meta.value("train", nlohmann::json::object()));
  state.epoch = meta.value("epoch", std::size_t{0});
  for (const auto& h : meta.value("history", nlohmann::json::array())) {
    EpochLoss e;
    e.epoch = h.at("epoch").get<std::size_t>();
    e.total = h.at("total").get<double>();
    e.parts = h.at("parts").get<std::array<double, 5>>();
    state.history.push_back(e);
  }
  auto& params = state.model.params();
  auto load_into = [&](const std::string& name, const ad::Shape& shape) -> const std::vector<double>& {
    const auto& a = ckpt.find(name);
    if (a.shape != shape) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(a.shape) +
                      " but the model expects " + ad::shape_str(shape));
    }
    return a.values;
  };
  for (auto& p : params) {
    p.tensor.mutable_values() = load_into("param/" + p.name, p.tensor.shape());
  }
  AdamWConfig oc;
  const auto o = meta.value("optimizer", nlohmann::json::object());
  oc.lr0 = o.value("lr0", oc.lr0);
  oc.beta1 = o.value("beta1", oc.beta1);
  oc.beta2 = o.value("beta2", oc.beta2);
  oc.eps = o.value("eps", oc.eps);
  oc.weight_decay = o.value("weight_decay", oc.weight_decay);
  oc.total_steps = o.value("total_steps", oc.total_steps);
  state.optimizer = make_optimizer(params, oc);
  state.optimizer.step = o.value("step", std::size_t{0});
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const char* kind : {"adam_m/", "adam_v/"}) {
      const std::string name = kind + params[i].name;
      bool present = false;
      for (const auto& a : ckpt.arrays) present = present || a.name == name;
      if (!present) continue;
      auto& dst = kind[5] == 'm' ? state.optimizer.m[i] : state.optimizer.v[i];
      dst = load_into(name, params[i].tensor.shape());
    }
  }
  return state;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto file = with_ckpt_extension(path);
  write_checkpoint(make_checkpoint(state), file);
  std::ofstream sidecar(file.parent_path() / "model.json");
  sidecar << state.model.config().to_json().dump(2) << "\n";
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  return restore_checkpoint(read_checkpoint(with_ckpt_extension(path)));
}

// ---------------------------------------------------------------------------
// Training loop

std::size_t steps_per_epoch(std::size_t cloud_count, const TrainConfig& config) {
  const std::size_t items = cloud_count * config.queries_per_shape;
  return (items + config.batch_size - 1) / config.batch_size;
}

void write_loss_csv(const std::vector<EpochLoss>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << "epoch,mean_total,mean_l1,mean_l2,mean_l3,mean_l4,mean_l5\n";
  out << std::setprecision(17);
  for (const auto& h : history) {
    out << h.epoch << "," << h.total;
    for (double p : h.parts) out << "," << p;
    out << "\n";
  }
}

TrainState train(const DatasetManifest& manifest, const ModelConfig& model_config,
                 const TrainConfig& config, const std::filesystem::path& out_dir,
                 const TrainOptions& options) {
  config.validate();
  model_config.validate();
  const auto clouds = load_training_clouds(manifest, config);
  for (const auto& c : clouds) {
    if (c.noisy.size() < model_config.n_p) {
      throw DataError("training cloud '" + c.name + "' has " + std::to_string(c.noisy.size()) +
                      " points, fewer than the patch size " + std::to_string(model_config.n_p));
    }
  }
  std::filesystem::create_directories(out_dir);

  const std::size_t steps = steps_per_epoch(clouds.size(), config);
  TrainState state = [&] {
    if (options.resume) {
      TrainState s = load_checkpoint(*options.resume);
      s.config = config;
      return s;
    }
    Model model(model_config);
    AdamWConfig oc;
    oc.lr0 = config.lr0;
    oc.weight_decay = config.weight_decay;
    oc.total_steps = config.epochs * steps;
    OptimizerState opt = make_optimizer(model.params(), oc);
    return TrainState{std::move(model), std::move(opt), config, 0, {}};
  }();
  state.history.resize(std::min(state.history.size(), state.epoch));

  auto& params = state.model.params();
  for (std::size_t epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(config.seed, epoch));
    std::vector<std::pair<std::size_t, std::size_t>> queue;
    for (std::size_t c = 0; c < clouds.size(); ++c) {
      std::uniform_int_distribution<std::size_t> pick(0, clouds[c].noisy.size() - 1);
      for (std::size_t q = 0; q < config.queries_per_shape; ++q) queue.emplace_back(c, pick(rng));
    }
    std::shuffle(queue.begin(), queue.end(), rng);

    EpochLoss sum;
    sum.epoch = epoch;
    for (std::size_t start = 0, batch = 0; start < queue.size(); start += config.batch_size, ++batch) {
      const std::size_t end = std::min(queue.size(), start + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      zero_grads(params);
      for (std::size_t t = start; t < end; ++t) {
        const TrainingItem item =
            make_training_item(clouds, queue[t].first, queue[t].second, model_config, rng);
        EpochLoss l;
        try {
          l = item_loss(state.model, item, config, weight, true);
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                             ": " + e.what());
        }
        sum.total += l.total;
        for (std::size_t i = 0; i < 5; ++i) sum.parts[i] += l.parts[i];
      }
      const double norm = clip_grad_norm(params, config.grad_clip);
      if (!std::isfinite(norm)) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ": non-finite gradient norm");
      }
      adamw_step(state.optimizer, params);
    }
    const double n = static_cast<double>(queue.size());
    sum.total /= n;
    for (double& p : sum.parts) p /= n;
    state.history.push_back(sum);
    state.epoch = epoch;
    if (options.log) {
      *options.log << "epoch " << epoch << "/" << config.epochs << " loss " << std::setprecision(6)
                   << sum.total << std::endl;
    }
    write_loss_csv(state.history, out_dir / "losses.csv");
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) {
      save_checkpoint(state, out_dir / epoch_file(epoch));
    }
    if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) {
      save_checkpoint(state, out_dir / epoch_file(epoch));
      return state;
    }
  }
  save_checkpoint(state, out_dir / "final.ckpt");
  return state;
}

}  // namespace orinorm
