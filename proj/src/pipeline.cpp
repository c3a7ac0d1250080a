#include "orinorm/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <stdexcept>

#include "orinorm/error.hpp"
#include "orinorm/train.hpp"

namespace orinorm {

namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string strip_xyz(const std::string& s) {
  const std::string ext = ".xyz";
  if (s.size() >= ext.size() && s.compare(s.size() - ext.size(), ext.size(), ext) == 0) {
    return s.substr(0, s.size() - ext.size());
  }
  return s;
}

EstimateResult refine_field(const PointCloud& cloud, std::vector<Vec3> init, double init_seconds,
                            const Refiner& refiner,
                            const EstimateOptions& options) {
  if (init.size() != cloud.size()) {
    throw DataError("initial field has " + std::to_string(init.size()) + " normals for " +
                    std::to_string(cloud.size()) + " points");
  }
  if (cloud.size() < refiner.patch_size()) {
    throw DataError("cloud of " + std::to_string(cloud.size()) +
                    " points is smaller than the patch size " +
                    std::to_string(refiner.patch_size()));
  }
  EstimateResult result;
  result.timing.init_seconds = init_seconds;
  const auto t0 = std::chrono::steady_clock::now();
  const SpatialIndex index = build_spatial_index(cloud.points);
  result.field.source = FieldSource::Network;
  result.field.normals = init;
  result.field.signs.assign(cloud.size(), 1);
  result.refined = subset_indices(cloud.size(), options.subset);
  for (std::size_t i : result.refined) {
    std::mt19937_64 rng(mix_seed(options.seed, i));
    const NetworkInput net = build_network_input(cloud, index, i, init[i], refiner.patch_size(),
                                                 refiner.cloud_size(), rng);
    const RefineResult r = refiner.refine(net.input);
    const int sign = r.sgn_mst * r.s_hat;
    const Vec3 oriented = sign < 0 ? Vec3(-r.unoriented) : r.unoriented;
    result.field.normals[i] = (net.patch.pca_rotation * oriented).normalized();
    result.field.signs[i] = sign;
  }
  result.timing.inference_seconds = seconds_since(t0);
  return result;
}

}  // namespace

RefineResult NetworkRefiner::refine(const ForwardInput& input) const {
  ad::NoGradGuard guard;
  ForwardOptions opts;
  opts.use_mst_init = use_mst_init_;
  const ForwardOutput out = model_.forward(input, opts);
  RefineResult r;
  // Head frame = PCA frame * R as row vectors, so the PCA-frame column is R n.
  r.unoriented = to_mat3(out.r_qstn) * to_vec3(out.n_hat_u);
  r.sgn_mst = out.sgn_mst;
  r.s_hat = out.s_plus.item() >= out.s_minus.item() ? 1 : -1;
  return r;
}

RefineResult StubRefiner::refine(const ForwardInput& input) const {
  RefineResult r;
  r.unoriented = Vec3::UnitZ();
  r.sgn_mst = input.n_init.z() >= 0.0 ? 1 : -1;
  r.s_hat = 1;
  return r;
}

OrientedNormalField estimate_baseline(const PointCloud& cloud, std::size_t k_pca,
                                      std::size_t k_graph) {
  return init_oriented_normals(cloud, k_pca, k_graph);
}

std::vector<std::size_t> subset_indices(std::size_t count, std::size_t subset) {
  std::vector<std::size_t> out;
  if (subset == 0 || subset >= count) {
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = i;
    return out;
  }
  out.reserve(subset);
  for (std::size_t t = 0; t < subset; ++t) out.push_back(t * count / subset);
  return out;
}

EstimateResult estimate_network(const PointCloud& cloud, const Refiner& refiner,
                                const EstimateOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  OrientedNormalField init = init_oriented_normals(cloud, options.k_pca, options.k_graph);
  const double init_seconds = seconds_since(t0);
  return refine_field(cloud, std::move(init.normals), init_seconds, refiner,
                      options);
}

EstimateResult refine_external(const PointCloud& cloud, std::span<const Vec3> init_normals,
                               const Refiner& refiner, const EstimateOptions& options) {
  const auto unit = checked_unit(init_normals);
  return refine_field(cloud, unit, 0.0, refiner, options);
}

std::vector<Vec3> load_init_normals(const fs::path& path, std::size_t expected) {
  const auto raw = read_vectors(path);
  if (raw.size() != expected) {
    throw DataError("'" + path.string() + "' has " + std::to_string(raw.size()) +
                    " normals for a cloud of " + std::to_string(expected) + " points");
  }
  try {
    return checked_unit(raw);
  } catch (const DataError& e) {
    throw DataError("'" + path.string() + "': " + e.what());
  }
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open '" + path.string() + "'");
  }
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string report_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
    t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

EvalReport evaluate(const DatasetManifest& manifest, const fs::path& manifest_path,
                    const fs::path& pred_dir, const EvalOptions& options) {
  EvalReport report;
  report.model_id = options.model_id;
  report.dataset_id = file_digest(manifest_path);
  report.timestamp = options.timestamp.empty() ? report_timestamp() : options.timestamp;

  std::vector<std::string> order;
  std::map<std::string, std::vector<CategoryMetrics>> per_category;
  std::map<std::string, bool> incomplete;
  for (const auto& e : manifest.entries) {
    if (!per_category.count(e.category) && !incomplete.count(e.category)) {
      order.push_back(e.category);
    }
    per_category[e.category];
    const std::string prefix = strip_xyz(e.noisy);
    const fs::path pred_path = pred_dir / (prefix + ".normals");
    if (!fs::exists(pred_path)) {
      report.missing.push_back(pred_path.string());
      incomplete[e.category] = true;
      if (options.warn) {
        *options.warn << "warning: missing prediction " << pred_path.string() << "\n";
      }
      continue;
    }
    const PointCloud noisy = manifest.load_noisy(e);
    const PointCloud clean = manifest.load_clean(e);
    const auto pred = read_vectors(pred_path);
    if (pred.size() != noisy.size()) {
      throw DataError("'" + pred_path.string() + "' has " + std::to_string(pred.size()) +
                      " normals for " + std::to_string(noisy.size()) + " points");
    }
    CategoryMetrics m;
    try {
      m = evaluate_cloud(pred, noisy, clean);
    } catch (const DataError& ex) {
      throw DataError("'" + pred_path.string() + "': " + ex.what());
    }
    per_category[e.category].push_back(m);
    if (!options.error_dir.empty()) {
      const auto corr = nearest_clean(noisy, clean);
      fs::create_directories((options.error_dir / prefix).parent_path());
      write_scalars(cnd_point_errors(pred, clean, corr, false),
                    options.error_dir / (prefix + ".err"));
    }
  }

  for (const auto& name : order) {
    if (incomplete.count(name)) {
      report.skipped_categories.push_back(name);
      if (options.warn) {
        *options.warn << "warning: category '" << name << "' skipped (missing predictions)\n";
      }
      continue;
    }
    const auto& clouds = per_category[name];
    CategoryMetrics c;
    c.name = name;
    c.clouds = clouds.size();
    for (const auto& m : clouds) {
      c.rmse_deg += m.rmse_deg;
      c.cnd_deg += m.cnd_deg;
      c.oriented_rmse_deg += m.oriented_rmse_deg;
      c.oriented_cnd_deg += m.oriented_cnd_deg;
      c.sign_agreement_ratio += m.sign_agreement_ratio;
    }
    const double n = static_cast<double>(clouds.size());
    c.rmse_deg /= n;
    c.cnd_deg /= n;
    c.oriented_rmse_deg /= n;
    c.oriented_cnd_deg /= n;
    c.sign_agreement_ratio /= n;
    report.categories.push_back(c);
  }
  CategoryMetrics& avg = report.average;
  avg.name = "Ave.";
  for (const auto& c : report.categories) {
    avg.clouds += c.clouds;
    avg.rmse_deg += c.rmse_deg;
    avg.cnd_deg += c.cnd_deg;
    avg.oriented_rmse_deg += c.oriented_rmse_deg;
    avg.oriented_cnd_deg += c.oriented_cnd_deg;
    avg.sign_agreement_ratio += c.sign_agreement_ratio;
  }
  if (!report.categories.empty()) {
    const double n = static_cast<double>(report.categories.size());
    avg.rmse_deg /= n;
    avg.cnd_deg /= n;
    avg.oriented_rmse_deg /= n;
    avg.oriented_cnd_deg /= n;
    avg.sign_agreement_ratio /= n;
  }
  return report;
}

}  // namespace orinorm
