// Command line front end: gen, baseline, train, estimate, eval.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "orinorm/error.hpp"
#include "orinorm/metrics.hpp"
#include "orinorm/pipeline.hpp"
#include "orinorm/synth.hpp"
#include "orinorm/train.hpp"

namespace fs = std::filesystem;
using namespace orinorm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

fs::path cloud_prefix(const std::string& path) {
  fs::path p(path);
  if (p.extension() == ".xyz") p.replace_extension();
  return p;
}

void print_timing(const Timing& t) {
  std::fprintf(stderr, "init %.3f s, inference %.3f s\n", t.init_seconds, t.inference_seconds);
}

struct GenArgs {
  std::string out;
  std::string shapes = "sphere,torus,cube,sheets";
  std::string noise = "0,0.12,0.6,1.2";
  std::string density = "uniform,stripes,gradient";
  std::size_t n = 5000;
  std::uint64_t seed = 7;
  std::string split = "train";
};

int run_gen(const GenArgs& a) {
  BenchmarkOptions opts;
  for (const auto& name : split_list(a.shapes)) {
    ShapeSpec spec;
    spec.kind = parse_shape_kind(name);
    spec.sample_count = a.n;
    opts.shapes.push_back(spec);
  }
  opts.noise_levels.clear();
  for (const auto& v : split_list(a.noise)) opts.noise_levels.push_back(std::stod(v));
  opts.densities.clear();
  for (const auto& d : split_list(a.density)) opts.densities.push_back(parse_density_mode(d));
  opts.split = parse_split(a.split);
  opts.seed = a.seed;
  fs::create_directories(a.out);
  const auto manifest = build_benchmark(a.out, opts);
  std::cerr << "wrote " << manifest.entries.size() << " clouds to " << a.out << "\n";
  return kOk;
}

struct BaselineArgs {
  std::string in;
  std::string out;
  std::size_t k_pca = 16;
  std::size_t k_graph = 8;
};

int run_baseline(const BaselineArgs& a) {
  const PointCloud cloud = read_cloud(cloud_prefix(a.in));
  const auto t0 = std::chrono::steady_clock::now();
  const auto field = estimate_baseline(cloud, a.k_pca, a.k_graph);
  Timing t;
  t.init_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_vectors(field.normals, a.out);
  print_timing(t);
  return kOk;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& a) {
  nlohmann::json cfg = nlohmann::json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw DataError("cannot open config '" + a.config + "'");
    try {
      cfg = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed config '" + a.config + "': " + e.what());
    }
  }
  const TrainConfig tc = TrainConfig::from_json(cfg);
  const ModelConfig mc = ModelConfig::from_json(cfg.value("model", nlohmann::json::object()));
  const auto manifest = read_manifest(a.data);
  TrainOptions opts;
  opts.log = &std::cerr;
  if (!a.resume.empty()) opts.resume = a.resume;
  train(manifest, mc, tc, a.out, opts);
  return kOk;
}

struct EstimateArgs {
  std::string in;
  std::string ckpt;
  std::string out;
  std::string init_normals;
  std::size_t subset = 0;
  std::size_t k_pca = 16;
  std::size_t k_graph = 8;
};

int run_estimate(const EstimateArgs& a) {
  const PointCloud cloud = read_cloud(cloud_prefix(a.in));
  const TrainState state = load_checkpoint(a.ckpt);
  const NetworkRefiner refiner(state.model, state.config.use_mst_init);
  EstimateOptions opts;
  opts.k_pca = a.k_pca;
  opts.k_graph = a.k_graph;
  opts.subset = a.subset;
  EstimateResult result;
  if (a.init_normals.empty()) {
    result = estimate_network(cloud, refiner, opts);
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    const auto init = load_init_normals(a.init_normals, cloud.size());
    const double init_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result = refine_external(cloud, init, refiner, opts);
    result.timing.init_seconds = init_seconds;
  }
  write_vectors(result.field.normals, a.out);
  print_timing(result.timing);
  return kOk;
}

struct EvalArgs {
  std::string data;
  std::string pred_dir;
  std::string format = "table";
  std::string out;
  std::string model_id;
  std::string ckpt;
  std::string timestamp;
};

int run_eval(const EvalArgs& a) {
  const auto manifest = read_manifest(a.data);
  EvalOptions opts;
  opts.warn = &std::cerr;
  opts.timestamp = a.timestamp;
  if (!a.model_id.empty()) {
    opts.model_id = a.model_id;
  } else if (!a.ckpt.empty()) {
    fs::path p(a.ckpt);
    if (p.extension() != ".ckpt") p += ".ckpt";
    opts.model_id = file_digest(p);
  }
  opts.error_dir = a.out.empty() ? fs::path(a.pred_dir) : fs::path(a.out).parent_path();
  if (opts.error_dir.empty()) opts.error_dir = ".";
  const EvalReport report = evaluate(manifest, a.data, a.pred_dir, opts);
  const std::string json = report_to_json(report);
  if (!a.out.empty()) {
    std::ofstream out(a.out, std::ios::binary);
    if (!out) throw DataError("cannot write '" + a.out + "'");
    out << json;
  }
  std::cout << (a.format == "json" ? json : report_to_table(report));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Oriented normal estimation for point clouds"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic benchmark");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--shapes", gen.shapes, "Comma-separated shapes");
  g->add_option("--noise", gen.noise, "Comma-separated noise levels in percent of the bbox diagonal");
  g->add_option("--density", gen.density, "Comma-separated density modes");
  g->add_option("--n", gen.n, "Samples per shape");
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--split", gen.split, "train or test")->check(CLI::IsMember({"train", "test"}));

  BaselineArgs base;
  auto* b = app.add_subcommand("baseline", "PCA normals oriented over a minimum spanning tree");
  b->add_option("--in", base.in, "Input .xyz")->required();
  b->add_option("--out", base.out, "Output .normals")->required();
  b->add_option("--k-pca", base.k_pca, "PCA neighborhood size");
  b->add_option("--k-graph", base.k_graph, "Graph neighbors");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the refinement network");
  t->add_option("--data", tr.data, "manifest.json")->required();
  t->add_option("--config", tr.config, "train.json");
  t->add_option("--out", tr.out, "Checkpoint directory")->required();
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");

  EstimateArgs est;
  auto* e = app.add_subcommand("estimate", "Estimate oriented normals with a trained model");
  e->add_option("--in", est.in, "Input .xyz")->required();
  e->add_option("--ckpt", est.ckpt, "Checkpoint path, with or without .ckpt")->required();
  e->add_option("--out", est.out, "Output .normals")->required();
  e->add_option("--init-normals", est.init_normals, "External initial normals");
  e->add_option("--subset", est.subset, "Refine only N evenly spaced points");
  e->add_option("--k-pca", est.k_pca, "PCA neighborhood size");
  e->add_option("--k-graph", est.k_graph, "Graph neighbors");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "Score predictions against a benchmark");
  v->add_option("--data", ev.data, "manifest.json")->required();
  v->add_option("--pred-dir", ev.pred_dir, "Directory of .normals predictions")->required();
  v->add_option("--format", ev.format, "table or json")->check(CLI::IsMember({"table", "json"}));
  v->add_option("--out", ev.out, "Write the JSON report here");
  v->add_option("--model-id", ev.model_id, "Model identifier for the report");
  v->add_option("--ckpt", ev.ckpt, "Derive the model identifier from this checkpoint");
  v->add_option("--timestamp", ev.timestamp, "Report timestamp (default: SOURCE_DATE_EPOCH or now)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*g) return run_gen(gen);
    if (*b) return run_baseline(base);
    if (*t) return run_train(tr);
    if (*e) return run_estimate(est);
    if (*v) return run_eval(ev);
  } catch (const NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return kNumeric;
  } catch (const DataError& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "invalid input: " << ex.what() << "\n";
    return kData;
  } catch (const std::out_of_range& ex) {
    std::cerr << "invalid input: " << ex.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& ex) {
    std::cerr << "file error: " << ex.what() << "\n";
    return kData;
  }
  return kUsage;
}
