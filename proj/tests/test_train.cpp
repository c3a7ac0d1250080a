#include <fstream>

#include "doctest.h"
#include "orinorm/checkpoint.hpp"
#include "orinorm/error.hpp"
#include "orinorm/train.hpp"
#include "support.hpp"

using namespace orinorm;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

DatasetManifest tiny_benchmark(const std::string& name, std::vector<double> noise = {0.0, 0.6}) {
  const auto dir = testing::scratch_dir(name);
  BenchmarkOptions opts;
  ShapeSpec s;
  s.kind = ShapeKind::Sphere;
  s.sample_count = 300;
  opts.shapes = {s};
  opts.noise_levels = std::move(noise);
  opts.seed = 3;
  build_benchmark(dir, opts);
  return read_manifest(dir / "manifest.json");
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 3;
  c.queries_per_shape = 4;
  c.checkpoint_every = 1;
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("train config json round trip and validation") {
  TrainConfig c;
  c.epochs = 7;
  c.use_cnd_gt = false;
  const auto j = c.to_json();
  CHECK(TrainConfig::from_json(j).to_json() == j);
  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  TrainConfig no_aug;
  no_aug.use_feature_augmentation = false;
  CHECK_FALSE(no_aug.loss_config().use_l5);
  CHECK_FALSE(no_aug.forward_options().with_negative);
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
}

TEST_CASE("network inputs") {
  const auto m = tiny_benchmark("train_inputs");
  const PointCloud noisy = m.load_noisy(m.entries[1]);
  const auto index = build_spatial_index(noisy.points);
  std::mt19937_64 rng(1);
  const NetworkInput ni = build_network_input(noisy, index, 17, noisy.gt_normals[17], 32, 64, rng);
  CHECK(ni.patch.neighbor_indices[0] == 17);
  REQUIRE(ni.input.patch.size() == 32);
  REQUIRE(ni.input.cloud.size() == 64);
  // Query first in the cloud sample, sorted by distance, inside the unit ball.
  double prev = -1.0;
  double max_r = 0.0;
  for (const auto& p : ni.input.cloud) {
    max_r = std::max(max_r, p.norm());
  }
  CHECK(max_r == doctest::Approx(1.0).epsilon(1e-12));
  const Vec3 first = ni.input.cloud[0];
  for (const auto& p : ni.input.cloud) {
    const double d = (p - first).norm();
    CHECK(d >= prev - 1e-12);
    prev = d;
  }
  CHECK((ni.input.n_init - ni.patch.direction_to_local(noisy.gt_normals[17])).norm() < 1e-15);

  std::mt19937_64 r1(9), r2(9);
  const auto a = build_network_input(noisy, index, 3, Vec3::UnitZ(), 32, 64, r1);
  const auto b = build_network_input(noisy, index, 3, Vec3::UnitZ(), 32, 64, r2);
  CHECK(a.input.cloud == b.input.cloud);
  CHECK_THROWS_AS(build_network_input(noisy, index, 300, Vec3::UnitZ(), 32, 64, r1),
                  std::invalid_argument);
}

TEST_CASE("training items") {
  const auto m = tiny_benchmark("train_items");
  TrainConfig tc;
  const auto clouds = load_training_clouds(m, tc);
  REQUIRE(clouds.size() == 2);
  const ModelConfig mc = ModelConfig::toy();

  // Entry 0 is noise-free: the clean twin's normal is the annotation.
  for (std::size_t q = 0; q < 300; q += 37) {
    std::mt19937_64 rng(q);
    const auto item = make_training_item(clouds, 0, q, mc, rng);
    CHECK((item.gt_cnd - item.gt_stale).norm() == 0.0);
    CHECK(item.net.patch.neighbor_indices[0] == q);
  }
  std::mt19937_64 r1(4), r2(4);
  for (int t = 0; t < 5; ++t) {
    const auto a = sample_training_item(clouds, mc, r1);
    const auto b = sample_training_item(clouds, mc, r2);
    CHECK(a.cloud == b.cloud);
    CHECK(a.query == b.query);
    CHECK(a.net.input.cloud == b.net.input.cloud);
  }
}

TEST_CASE("checkpoint container") {
  Checkpoint c;
  c.meta = {{"k", 1}};
  c.arrays.push_back({"a", {2, 3}, {1, 2, 3, 4, 5, 6}});
  c.arrays.push_back({"b", {}, {7.5}});
  const std::string bytes = encode_checkpoint(c);
  const Checkpoint d = decode_checkpoint(bytes);
  CHECK(d.meta == c.meta);
  CHECK(d.find("a").values == c.arrays[0].values);
  CHECK(d.find("b").shape.empty());
  CHECK(encode_checkpoint(d) == bytes);
  CHECK_THROWS_AS(d.find("zz"), DataError);

  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 10)), DataError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "extra"), DataError);

  Checkpoint wrong = c;
  wrong.arrays[0].shape = {4, 3};
  CHECK_THROWS_AS(encode_checkpoint(wrong), std::invalid_argument);
}

TEST_CASE("model checkpoints round trip and name conflicting tensors") {
  const auto dir = testing::scratch_dir("train_ckpt");
  Model model(ModelConfig::toy());
  AdamWConfig oc;
  oc.total_steps = 9;
  TrainState st{model, make_optimizer(model.params(), oc), TrainConfig{}, 3, {}};
  st.optimizer.step = 4;
  st.history.push_back({1, 0.5, {0.1, 0.2, 0.3, 0.4, 0.5}});
  save_checkpoint(st, dir / "a");
  const TrainState back = load_checkpoint(dir / "a");
  CHECK(back.epoch == 3);
  CHECK(back.optimizer.step == 4);
  CHECK(back.optimizer.config.total_steps == 9);
  REQUIRE(back.history.size() == 1);
  CHECK(back.history[0].parts[4] == 0.5);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CHECK(back.model.params()[i].tensor.values() == model.params()[i].tensor.values());
  }
  save_checkpoint(back, dir / "b.ckpt");
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));
  CHECK(std::filesystem::exists(dir / "model.json"));

  const std::string bytes = read_bytes(dir / "a.ckpt");
  {
    std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc"), DataError);

  Checkpoint ck = read_checkpoint(dir / "a.ckpt");
  const std::string victim = ck.arrays[0].name;
  ck.arrays[0].shape = {ck.arrays[0].values.size()};
  try {
    restore_checkpoint(ck);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(victim) != std::string::npos);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), DataError);
}

TEST_CASE("training smoke run and resume determinism") {
  const auto m = tiny_benchmark("train_run");
  const ModelConfig mc = ModelConfig::toy();
  const auto out = testing::scratch_dir("train_run_out");
  const TrainState full = train(m, mc, tiny_train(3), out);
  REQUIRE(full.history.size() == 3);
  CHECK(std::filesystem::exists(out / "final.ckpt"));
  CHECK(std::filesystem::exists(out / "epoch_0002.ckpt"));
  CHECK(std::filesystem::exists(out / "losses.csv"));
  const TrainState loaded = load_checkpoint(out / "final");
  CHECK(loaded.epoch == 3);
  CHECK(loaded.optimizer.step == 3 * steps_per_epoch(2, tiny_train(3)));

  const auto out2 = testing::scratch_dir("train_run_resume");
  TrainOptions stop;
  stop.stop_after_epoch = 1;
  train(m, mc, tiny_train(3), out2, stop);
  TrainOptions resume;
  resume.resume = out2 / "epoch_0001.ckpt";
  const TrainState resumed = train(m, mc, tiny_train(3), out2, resume);
  REQUIRE(resumed.history.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(std::abs(resumed.history[e].total - full.history[e].total) <= 1e-10);
  }
  CHECK(read_bytes(out / "losses.csv") == read_bytes(out2 / "losses.csv"));
  CHECK(read_bytes(out / "final.ckpt") == read_bytes(out2 / "final.ckpt"));
}

TEST_CASE("training rejects unusable data") {
  const auto m = tiny_benchmark("train_bad");
  ModelConfig big = ModelConfig::toy();
  big.n_p = 400;
  big.n_d = 400;
  CHECK_THROWS_AS(train(m, big, tiny_train(1), testing::scratch_dir("train_bad_out")), DataError);

  DatasetManifest test_only = m;
  for (auto& e : test_only.entries) e.split = Split::Test;
  CHECK_THROWS_AS(load_training_clouds(test_only, TrainConfig{}), DataError);
}
