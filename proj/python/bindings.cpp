#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "json.hpp"
#include "orinorm/error.hpp"
#include "orinorm/metrics.hpp"
#include "orinorm/pipeline.hpp"
#include "orinorm/synth.hpp"
#include "orinorm/train.hpp"

namespace py = pybind11;
using namespace orinorm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Vec3> to_points(const Array& a, const char* what) {
  if (a.ndim() != 2 || a.shape(1) != 3) {
    throw std::invalid_argument(std::string(what) + " must have shape (N, 3)");
  }
  const auto r = a.unchecked<2>();
  std::vector<Vec3> out(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out[i] = Vec3(r(i, 0), r(i, 1), r(i, 2));
  return out;
}

Array to_array(std::span<const Vec3> v) {
  Array out({static_cast<py::ssize_t>(v.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (py::ssize_t c = 0; c < 3; ++c) w(i, c) = v[i][c];
  }
  return out;
}

PointCloud make_cloud(const Array& points, const std::optional<Array>& normals) {
  PointCloud c;
  c.points = to_points(points, "points");
  if (normals) c.gt_normals = to_points(*normals, "normals");
  c.validate();
  return c;
}

py::object parse_json(const std::string& s) {
  return py::module_::import("json").attr("loads")(s);
}

nlohmann::json to_json(const py::object& obj) {
  if (obj.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Oriented normal estimation for point clouds";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "sample_shape",
      [](const std::string& shape, std::size_t n, const std::string& density, double noise,
         std::uint64_t seed) {
        ShapeSpec s;
        s.kind = parse_shape_kind(shape);
        s.sample_count = n;
        s.density_mode = parse_density_mode(density);
        s.seed = seed;
        const PointCloud clean = sample_shape(s);
        const PointCloud noisy = add_noise(clean, noise, seed + 1);
        return py::dict(py::arg("points") = to_array(noisy.points),
                        py::arg("normals") = to_array(noisy.gt_normals),
                        py::arg("clean_points") = to_array(clean.points),
                        py::arg("clean_normals") = to_array(clean.gt_normals));
      },
      py::arg("shape"), py::arg("n") = 5000, py::arg("density") = "uniform",
      py::arg("noise") = 0.0, py::arg("seed") = 0,
      "Sample a synthetic shape; noise is in percent of the bounding-box diagonal.");

  m.def(
      "pca_normals",
      [](const Array& points, std::size_t k) {
        const PointCloud c = make_cloud(points, std::nullopt);
        return to_array(pca_normals(c, build_spatial_index(c.points), k));
      },
      py::arg("points"), py::arg("k") = 16, "Unoriented PCA normals.");

  m.def(
      "estimate_baseline",
      [](const Array& points, std::size_t k_pca, std::size_t k_graph) {
        const OrientedNormalField f = estimate_baseline(make_cloud(points, std::nullopt), k_pca, k_graph);
        return to_array(f.normals);
      },
      py::arg("points"), py::arg("k_pca") = 16, py::arg("k_graph") = 8,
      "PCA normals oriented by propagation over a minimum spanning tree.");

  m.def(
      "rmse",
      [](const Array& pred, const Array& gt, bool oriented) {
        return rmse(to_points(pred, "pred"), to_points(gt, "gt"), oriented);
      },
      py::arg("pred"), py::arg("gt"), py::arg("oriented") = false, "RMS angle in degrees.");

  m.def(
      "cnd",
      [](const Array& pred, const Array& noisy_points, const Array& clean_points,
         const Array& clean_normals, bool oriented) {
        const PointCloud noisy = make_cloud(noisy_points, std::nullopt);
        const PointCloud clean = make_cloud(clean_points, clean_normals);
        return cnd(to_points(pred, "pred"), noisy, clean, oriented);
      },
      py::arg("pred"), py::arg("noisy_points"), py::arg("clean_points"), py::arg("clean_normals"),
      py::arg("oriented") = false,
      "RMS angle in degrees against the normal of each point's nearest clean point.");

  m.def(
      "generate_benchmark",
      [](const std::filesystem::path& out, const std::vector<std::string>& shapes,
         const std::vector<double>& noise, const std::vector<std::string>& densities,
         std::size_t n, std::uint64_t seed, const std::string& split) {
        BenchmarkOptions opts;
        for (const auto& name : shapes) {
          ShapeSpec s;
          s.kind = parse_shape_kind(name);
          s.sample_count = n;
          opts.shapes.push_back(s);
        }
        opts.noise_levels = noise;
        opts.densities.clear();
        for (const auto& d : densities) opts.densities.push_back(parse_density_mode(d));
        opts.seed = seed;
        opts.split = parse_split(split);
        std::filesystem::create_directories(out);
        build_benchmark(out, opts);
        return out / "manifest.json";
      },
      py::arg("out"), py::arg("shapes") = std::vector<std::string>{"sphere", "torus", "cube", "sheets"},
      py::arg("noise") = std::vector<double>{0.0, 0.12, 0.6, 1.2},
      py::arg("densities") = std::vector<std::string>{"uniform", "stripes", "gradient"},
      py::arg("n") = 5000, py::arg("seed") = 7, py::arg("split") = "train",
      "Write a benchmark directory and return the manifest path.");

  m.def(
      "train",
      [](const std::filesystem::path& manifest, const std::filesystem::path& out,
         const py::object& config) {
        const nlohmann::json cfg = to_json(config);
        const TrainConfig tc = TrainConfig::from_json(cfg);
        const ModelConfig mc = ModelConfig::from_json(cfg.value("model", nlohmann::json::object()));
        const DatasetManifest m = read_manifest(manifest);
        TrainState st = [&] {
          py::gil_scoped_release release;
          return train(m, mc, tc, out);
        }();
        py::list losses;
        for (const auto& h : st.history) losses.append(h.total);
        return losses;
      },
      py::arg("manifest"), py::arg("out"), py::arg("config") = py::none(),
      "Train on a benchmark manifest; returns the mean loss of each epoch.");

  py::class_<TrainState>(m, "Model")
      .def_static(
          "load", [](const std::filesystem::path& path) { return load_checkpoint(path); },
          py::arg("path"))
      .def_property_readonly("parameter_count",
                             [](const TrainState& s) { return s.model.parameter_count(); })
      .def_property_readonly("config",
                             [](const TrainState& s) { return parse_json(s.model.config().to_json().dump()); })
      .def(
          "estimate",
          [](const TrainState& s, const Array& points, std::size_t subset,
             const std::optional<Array>& init_normals) {
            const PointCloud c = make_cloud(points, std::nullopt);
            std::optional<std::vector<Vec3>> init;
            if (init_normals) init = to_points(*init_normals, "init_normals");
            const NetworkRefiner refiner(s.model, s.config.use_mst_init);
            EstimateOptions opts;
            opts.subset = subset;
            EstimateResult r;
            {
              py::gil_scoped_release release;
              r = init ? refine_external(c, *init, refiner, opts) : estimate_network(c, refiner, opts);
            }
            return to_array(r.field.normals);
          },
          py::arg("points"), py::arg("subset") = 0, py::arg("init_normals") = py::none(),
          "Oriented normals; only `subset` evenly spaced points are refined when nonzero.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& manifest, const std::filesystem::path& pred_dir,
         const std::string& model_id, const std::string& timestamp) {
        EvalOptions opts;
        opts.model_id = model_id;
        opts.timestamp = timestamp;
        return parse_json(report_to_json(evaluate(read_manifest(manifest), manifest, pred_dir, opts)));
      },
      py::arg("manifest"), py::arg("pred_dir"), py::arg("model_id") = "unspecified",
      py::arg("timestamp") = "", "Score a directory of .normals predictions; returns the report.");

  m.def(
      "write_normals",
      [](const Array& normals, const std::filesystem::path& path) {
        write_vectors(to_points(normals, "normals"), path);
      },
      py::arg("normals"), py::arg("path"));
}
