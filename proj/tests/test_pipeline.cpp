#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "orinorm/error.hpp"
#include "orinorm/pipeline.hpp"
#include "orinorm/train.hpp"
#include "support.hpp"

using namespace orinorm;

namespace {

DatasetManifest bench(const std::string& name) {
  const auto dir = testing::scratch_dir(name);
  BenchmarkOptions opts;
  for (auto kind : {ShapeKind::Sphere, ShapeKind::Torus}) {
    ShapeSpec s;
    s.kind = kind;
    s.sample_count = 400;
    opts.shapes.push_back(s);
  }
  opts.noise_levels = {0.0, 0.6};
  opts.seed = 11;
  build_benchmark(dir, opts);
  return read_manifest(dir / "manifest.json");
}

std::string prefix_of(const ManifestEntry& e) { return e.noisy.substr(0, e.noisy.size() - 4); }

}  // namespace

TEST_CASE("stub refiner reproduces the baseline bit for bit") {
  const auto m = bench("pipe_stub");
  const StubRefiner stub(16, 64);
  for (const auto& e : m.entries) {
    const PointCloud c = m.load_noisy(e);
    const auto base = estimate_baseline(c, 16, 8);
    const auto net = estimate_network(c, stub);
    REQUIRE(net.field.normals.size() == base.normals.size());
    std::size_t same = 0;
    for (std::size_t i = 0; i < c.size(); ++i) same += net.field.normals[i] == base.normals[i];
    CHECK(same == c.size());
    CHECK(net.field.signs == base.signs);
    CHECK(net.field.source == FieldSource::Network);
    CHECK(net.timing.init_seconds > 0.0);
    CHECK(net.timing.inference_seconds > 0.0);
  }
}

TEST_CASE("network output is unit length and deterministic") {
  const auto m = bench("pipe_net");
  const PointCloud c = m.load_noisy(m.entries[1]);
  const Model model(ModelConfig::toy());
  const NetworkRefiner refiner(model);
  EstimateOptions opts;
  opts.subset = 40;
  const auto a = estimate_network(c, refiner, opts);
  const auto b = estimate_network(c, refiner, opts);
  CHECK(a.refined.size() == 40);
  CHECK(a.field.normals == b.field.normals);
  for (const auto& n : a.field.normals) CHECK(std::abs(n.norm() - 1.0) < 1e-9);

  // Substituting the baseline's own field as external input. Renormalizing
  // the external field may move the last bit, hence the tolerance.
  const auto base = estimate_baseline(c);
  const auto ext = refine_external(c, base.normals, refiner, opts);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK((ext.field.normals[i] - a.field.normals[i]).norm() < 1e-12);
  }
  CHECK(ext.field.signs == a.field.signs);

  // Points outside the subset keep their initialization.
  std::vector<bool> refined(c.size(), false);
  for (auto i : a.refined) refined[i] = true;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!refined[i]) CHECK(a.field.normals[i] == base.normals[i]);
  }
}

TEST_CASE("the sign context is the sign of the prediction against the initialization") {
  const auto m = bench("pipe_sign");
  const PointCloud c = m.load_noisy(m.entries[3]);
  const Model model(ModelConfig::toy());
  const NetworkRefiner refiner(model);
  const auto index = build_spatial_index(c.points);
  for (std::size_t q = 0; q < c.size(); q += 50) {
    std::mt19937_64 rng(q);
    const auto ni = build_network_input(c, index, q, c.gt_normals[q], 32, 32, rng);
    const RefineResult r = refiner.refine(ni.input);
    CHECK(r.sgn_mst == (r.unoriented.dot(ni.input.n_init) >= 0.0 ? 1 : -1));
  }
}

TEST_CASE("ground-truth initialization orients at least as well as PCA+MST") {
  const auto m = bench("pipe_gt_init");
  const StubRefiner stub(16, 64);
  for (const auto& e : m.entries) {
    const PointCloud noisy = m.load_noisy(e);
    const PointCloud clean = m.load_clean(e);
    const auto corr = nearest_clean(noisy, clean);
    const auto mst = estimate_network(noisy, stub);
    const auto gt = refine_external(noisy, noisy.gt_normals, stub);
    CHECK(sign_agreement(gt.field, clean, corr) >= sign_agreement(mst.field, clean, corr));
  }
}

TEST_CASE("external normals are validated") {
  const auto dir = testing::scratch_dir("pipe_ext");
  {
    std::ofstream out(dir / "ext.normals");
    out << "0 0 1\n1 0 0\n0 0 0\n0 1 0\n";
  }
  try {
    load_init_normals(dir / "ext.normals", 4);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("prediction 2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_init_normals(dir / "ext.normals", 5), DataError);
  {
    std::ofstream out(dir / "near.normals");
    out << "0 0 1.0004\n";
  }
  CHECK(load_init_normals(dir / "near.normals", 1)[0] == Vec3::UnitZ());
}

TEST_CASE("subset indices") {
  CHECK(subset_indices(5, 0) == std::vector<std::size_t>{0, 1, 2, 3, 4});
  CHECK(subset_indices(10, 4) == std::vector<std::size_t>{0, 2, 5, 7});
  CHECK(subset_indices(3, 10).size() == 3);
}

TEST_CASE("evaluation") {
  const auto m = bench("pipe_eval");
  const auto manifest_path = m.root / "manifest.json";
  const auto preds = testing::scratch_dir("pipe_eval_preds");

  SUBCASE("clean ground truth scores zero on noise-free clouds") {
    for (const auto& e : m.entries) {
      write_vectors(m.load_noisy(e).gt_normals, preds / (prefix_of(e) + ".normals"));
    }
    EvalOptions opts;
    opts.timestamp = "fixed";
    opts.error_dir = preds;
    const EvalReport r = evaluate(m, manifest_path, preds, opts);
    REQUIRE(r.categories.size() == 2);
    CHECK(r.categories[0].name == "none");
    CHECK(r.categories[0].clouds == 2);
    CHECK(r.categories[0].rmse_deg < 1e-5);
    CHECK(r.categories[0].cnd_deg < 1e-5);
    CHECK(r.categories[0].oriented_cnd_deg < 1e-5);
    CHECK(r.categories[0].sign_agreement_ratio == 1.0);
    CHECK(r.missing.empty());
    CHECK(std::filesystem::exists(preds / (prefix_of(m.entries[1]) + ".err")));
    CHECK(report_to_json(r) == report_to_json(evaluate(m, manifest_path, preds, opts)));
    const auto j = nlohmann::json::parse(report_to_json(r));
    CHECK(j["metadata"]["timestamp"] == "fixed");
    CHECK(j["metadata"]["dataset_id"] == file_digest(manifest_path));
  }
  SUBCASE("missing predictions are listed and their category skipped") {
    for (const auto& e : m.entries) {
      if (e.category == "0.6%" && e.shape == "torus") continue;
      write_vectors(estimate_baseline(m.load_noisy(e)).normals, preds / (prefix_of(e) + ".normals"));
    }
    std::ostringstream warn;
    EvalOptions opts;
    opts.warn = &warn;
    const EvalReport r = evaluate(m, manifest_path, preds, opts);
    CHECK(r.missing.size() == 1);
    CHECK(r.skipped_categories == std::vector<std::string>{"0.6%"});
    REQUIRE(r.categories.size() == 1);
    CHECK(r.average.rmse_deg == r.categories[0].rmse_deg);
    CHECK(warn.str().find("skipped") != std::string::npos);
  }
  SUBCASE("a prediction of the wrong length is a data error") {
    for (const auto& e : m.entries) {
      write_vectors({Vec3::UnitZ()}, preds / (prefix_of(e) + ".normals"));
    }
    CHECK_THROWS_AS(evaluate(m, manifest_path, preds), DataError);
  }
}

TEST_CASE("report timestamp honours SOURCE_DATE_EPOCH") {
  setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(report_timestamp() == "1970-01-02T00:00:00Z");
  unsetenv("SOURCE_DATE_EPOCH");
  CHECK(report_timestamp().size() == 20);
}
