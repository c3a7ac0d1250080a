#include "orinorm/net.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace orinorm {

using ad::Shape;
using ad::Tensor;

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

Tensor take_rows(const Tensor& x, std::size_t n) {
  const auto idx = iota_indices(n);
  return ad::gather(x, idx, {n}, 0);
}

void warn_identity_fallback(const char* why) {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true)) {
    std::cerr << "warning: rotation predictor fell back to the identity (" << why << ")\n";
  }
}

std::vector<std::size_t> counts_for(std::size_t n, const std::vector<double>& rho) {
  std::vector<std::size_t> out;
  for (double r : rho) {
    n = downsample_count(n, r);
    out.push_back(n);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::size_t downsample_count(std::size_t n, double rho) {
  // The epsilon keeps exact products such as 3 * (2/3) from rounding up.
  return static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n) - 1e-9));
}

std::vector<std::size_t> ModelConfig::stage_counts_p() const { return counts_for(n_p, rho_p); }
std::vector<std::size_t> ModelConfig::stage_counts_d() const { return counts_for(n_d, rho_d); }

std::size_t ModelConfig::head_points() const {
  const auto c = stage_counts_p();
  return c.empty() ? n_p : c.back();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (n_p < 4 || n_d < 4) fail("n_p and n_d must be at least 4");
  if (rho_p.empty() || rho_d.empty()) fail("rho_p and rho_d must be non-empty");
  if (rho_p.size() != hgif_scales.size()) fail("rho_p and hgif_scales differ in length");
  if (rho_d.size() != hgif_scales_d.size()) fail("rho_d and hgif_scales_d differ in length");
  for (double r : rho_p) {
    if (!(r > 0.0 && r <= 1.0)) fail("rho_p entries must lie in (0, 1]");
  }
  for (double r : rho_d) {
    if (!(r > 0.0 && r <= 1.0)) fail("rho_d entries must lie in (0, 1]");
  }
  if (lfe_scales.size() != 2) fail("lfe_scales must hold exactly two scales");
  auto check_scale = [&](std::size_t s) {
    if (s < 2) fail("neighbor scales must be at least 2");
  };
  for (auto s : lfe_scales) check_scale(s);
  for (auto s : hgif_scales) check_scale(s);
  for (auto s : hgif_scales_d) check_scale(s);
  check_scale(lfe_scale_d);
  check_scale(pff_neighbors);
  for (auto c : stage_counts_p()) {
    if (c < 2) fail("a patch stage keeps fewer than 2 points");
  }
  for (auto c : stage_counts_d()) {
    if (c < 2) fail("a cloud stage keeps fewer than 2 points");
  }
  if (head_points() < pff_neighbors) {
    fail("final patch size " + std::to_string(head_points()) + " is below pff_neighbors " +
         std::to_string(pff_neighbors));
  }
  if (lfe_depth < 1 || width < 1 || feature_dim < 1 || pos_width < 1) {
    fail("depth and widths must be positive");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_p", n_p},
          {"n_d", n_d},
          {"rho_p", rho_p},
          {"rho_d", rho_d},
          {"lfe_scales", lfe_scales},
          {"lfe_scale_d", lfe_scale_d},
          {"hgif_scales", hgif_scales},
          {"hgif_scales_d", hgif_scales_d},
          {"pff_neighbors", pff_neighbors},
          {"lfe_depth", lfe_depth},
          {"width", width},
          {"feature_dim", feature_dim},
          {"pos_width", pos_width},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_p = j.value("n_p", c.n_p);
  c.n_d = j.value("n_d", c.n_d);
  c.rho_p = j.value("rho_p", c.rho_p);
  c.rho_d = j.value("rho_d", c.rho_d);
  c.lfe_scales = j.value("lfe_scales", c.lfe_scales);
  c.lfe_scale_d = j.value("lfe_scale_d", c.lfe_scale_d);
  c.hgif_scales = j.value("hgif_scales", c.hgif_scales);
  c.hgif_scales_d = j.value("hgif_scales_d", c.hgif_scales_d);
  c.pff_neighbors = j.value("pff_neighbors", c.pff_neighbors);
  c.lfe_depth = j.value("lfe_depth", c.lfe_depth);
  c.width = j.value("width", c.width);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.pos_width = j.value("pos_width", c.pos_width);
  c.seed = j.value("seed", c.seed);
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.n_p = 32;
  c.n_d = 32;
  c.rho_p = {0.75, 0.75, 1.0, 1.0};
  c.rho_d = {0.5, 0.5, 1.0};
  c.lfe_scales = {4, 8};
  c.lfe_scale_d = 4;
  c.hgif_scales = {6, 6, 4, 4};
  c.hgif_scales_d = {4, 4, 4};
  c.pff_neighbors = 4;
  c.width = 6;
  c.feature_dim = 8;
  c.pos_width = 4;
  return c;
}

NeighborGraph knn_graph(std::span<const Vec3> points, std::size_t k) {
  NeighborGraph g;
  g.count = points.size();
  g.k = std::min(k, points.size());
  if (g.count == 0) {
    return g;
  }
  const KdTree tree(points);
  g.indices.reserve(g.count * g.k);
  for (std::size_t i = 0; i < g.count; ++i) {
    const auto nb = query_neighborhood(tree, i, g.k);
    g.indices.insert(g.indices.end(), nb.begin(), nb.end());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Parameters

Tensor ParamBuilder::make(const std::string& name, Shape shape, double bound) {
  std::vector<double> values(ad::shape_numel(shape), 0.0);
  if (bound > 0.0) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : values) v = dist(rng_);
  }
  Tensor t = Tensor::from_values(std::move(shape), std::move(values), true);
  params_.push_back({name, t});
  return t;
}

Dense ParamBuilder::dense(const std::string& name, std::size_t in, std::size_t out, bool bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Dense d;
  d.weight = make(name + ".weight", {in, out}, bound);
  if (bias) d.bias = make(name + ".bias", {out}, bound);
  return d;
}

Dense ParamBuilder::zero_dense(const std::string& name, std::size_t in, std::size_t out, bool bias) {
  Dense d;
  d.weight = make(name + ".weight", {in, out}, 0.0);
  if (bias) d.bias = make(name + ".bias", {out}, 0.0);
  return d;
}

Tensor ParamBuilder::matrix(const std::string& name, std::size_t rows, std::size_t cols) {
  return make(name, {rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)));
}

// ---------------------------------------------------------------------------
// Blocks

SkipBlock SkipBlock::create(ParamBuilder& pb, const std::string& name, std::size_t in,
                            std::size_t out) {
  return {pb.dense(name + ".a", in, out), pb.dense(name + ".b", out, out),
          pb.dense(name + ".s", in, out, false)};
}

Tensor SkipBlock::operator()(const Tensor& x) const {
  return ad::relu(ad::add(b(ad::relu(a(x))), s(x)));
}

LfeBlock LfeBlock::create(ParamBuilder& pb, const std::string& name, std::size_t in,
                          std::size_t out) {
  LfeBlock blk;
  blk.psi = pb.dense(name + ".psi", in, out);
  blk.a_self = pb.dense(name + ".a_self", out, out);
  blk.a_nbr = pb.dense(name + ".a_nbr", out, out, false);
  blk.b = pb.dense(name + ".b", out, out);
  blk.s_self = pb.dense(name + ".s_self", out, out, false);
  blk.s_nbr = pb.dense(name + ".s_nbr", out, out, false);
  return blk;
}

Tensor LfeBlock::operator()(const Tensor& features, const NeighborGraph& graph) const {
  const std::size_t n = features.dim(0);
  if (graph.count != n || graph.indices.size() != graph.count * graph.k) {
    throw std::invalid_argument("lfe_block: neighbor graph over " + std::to_string(graph.count) +
                                " points for " + std::to_string(n) + " features");
  }
  const Tensor p = ad::relu(psi(features));
  return ad::edge_max(a_self(p), a_nbr(p), graph.indices, graph.k, b.weight, b.bias, s_self(p),
                      s_nbr(p));
}

AffFuse AffFuse::create(ParamBuilder& pb, const std::string& name, std::size_t width) {
  return {pb.dense(name + ".gate", width, width), pb.dense(name + ".out", width, width)};
}

Tensor AffFuse::gate_values(const Tensor& f1, const Tensor& f2) const {
  if (f1.shape() != f2.shape()) {
    throw std::invalid_argument("aff_fuse: shapes " + ad::shape_str(f1.shape()) + " and " +
                                ad::shape_str(f2.shape()) + " differ");
  }
  return ad::sigmoid(gate(ad::maxpool(ad::add(f1, f2), 0)));
}

Tensor AffFuse::operator()(const Tensor& f1, const Tensor& f2) const {
  const Tensor m = gate_values(f1, f2);
  const Tensor one_minus = ad::sub(Tensor::full(m.shape(), 1.0), m);
  return ad::relu(out(ad::add(ad::mul(f1, m), ad::mul(f2, one_minus))));
}

Qstn Qstn::create(ParamBuilder& pb, const std::string& name, std::size_t width) {
  Qstn q;
  q.l1 = pb.dense(name + ".l1", 3, width);
  q.l2 = pb.dense(name + ".l2", width, 2 * width);
  q.l3 = pb.dense(name + ".l3", 2 * width, width);
  q.l4 = pb.zero_dense(name + ".l4", width, 4);
  return q;
}

Tensor Qstn::operator()(const Tensor& points) const {
  const auto& pv = points.values();
  const bool all_zero = std::all_of(pv.begin(), pv.end(), [](double v) { return v == 0.0; });
  if (all_zero) {
    warn_identity_fallback("all-zero input");
    return Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  }
  const Tensor g = ad::maxpool(ad::relu(l2(ad::relu(l1(points)))), 0);
  const Tensor q = ad::add(l4(ad::relu(l3(g))), Tensor::from_values({4}, {1.0, 0.0, 0.0, 0.0}));
  const auto& qv = q.values();
  const double norm = std::sqrt(qv[0] * qv[0] + qv[1] * qv[1] + qv[2] * qv[2] + qv[3] * qv[3]);
  if (!(norm >= 1e-12)) {
    warn_identity_fallback("vanishing quaternion");
    return Tensor::from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  }
  return ad::quat_to_rotation(q);
}

HgifStage HgifStage::create(ParamBuilder& pb, const std::string& name, std::size_t width,
                            std::size_t pos_width, bool odd, double rho, std::size_t scale) {
  HgifStage s;
  s.odd = odd;
  s.rho = rho;
  s.scale = scale;
  s.phi5 = pb.dense(name + ".phi5", width, width);
  s.phi6 = pb.dense(name + ".phi6", width, width);
  if (odd) {
    s.phi8 = pb.dense(name + ".phi8", 3, pos_width);
    s.phi7 = pb.dense(name + ".phi7", 6 + pos_width, width);
  } else {
    s.phi7 = pb.dense(name + ".phi7", 6 + width, width);
  }
  s.phi4_local = pb.dense(name + ".phi4_local", width, width);
  s.phi4_global = pb.dense(name + ".phi4_global", 2 * width, width, false);
  return s;
}

HgifState HgifStage::operator()(const HgifState& in) const {
  const std::size_t n = in.features.dim(0);
  if (in.points.dim(0) != n || in.coords.size() != n) {
    throw std::invalid_argument("hgif_stage: features, points and coordinates disagree in count");
  }
  const std::size_t kept = downsample_count(n, rho);
  if (kept < 2) {
    throw std::invalid_argument("hgif_stage: rho = " + std::to_string(rho) + " keeps " +
                                std::to_string(kept) + " of " + std::to_string(n) + " points");
  }
  const Tensor g_global = ad::relu(phi6(ad::maxpool(ad::relu(phi5(in.features)), 0)));
  const Tensor g_prev = in.prev_global.defined() ? in.prev_global : g_global;

  HgifState out;
  const Tensor f_keep = kept == n ? in.features : take_rows(in.features, kept);
  out.points = kept == n ? in.points : take_rows(in.points, kept);
  out.coords.assign(in.coords.begin(), in.coords.begin() + static_cast<std::ptrdiff_t>(kept));

  const NeighborGraph graph = knn_graph(out.coords, scale);
  const std::size_t k = graph.k;
  const Tensor pi = ad::reshape(out.points, {kept, 1, 3});
  const Tensor pj = ad::gather(out.points, graph.indices, {kept, k}, 0);
  const Tensor diff = ad::sub(pi, pj);
  const Tensor pi_edges = ad::add(pi, Tensor::zeros({kept, k, 3}));
  Tensor third;
  if (odd) {
    third = ad::relu(phi8(diff));
  } else {
    const std::size_t c = f_keep.dim(1);
    third = ad::sub(ad::reshape(f_keep, {kept, 1, c}), ad::gather(f_keep, graph.indices, {kept, k}, 0));
  }
  Tensor local = ad::linear_relu_max(ad::concat({pi_edges, diff, third}, 2), phi7.weight, phi7.bias);
  if (in.local.defined()) {
    local = ad::add(local, kept == n ? in.local : take_rows(in.local, kept));
  }
  const Tensor mixed =
      ad::relu(ad::add(phi4_local(local), phi4_global(ad::concat({g_global, g_prev}, 0))));
  out.features = ad::add(mixed, f_keep);
  out.local = local;
  out.prev_global = g_global;
  out.globals = in.globals;
  out.globals.push_back(g_global);
  return out;
}

NormalHead NormalHead::create(ParamBuilder& pb, const std::string& name, std::size_t width,
                              std::size_t feature_dim, std::size_t neighbors) {
  NormalHead h;
  h.neighbors = neighbors;
  h.pff = LfeBlock::create(pb, name + ".pff", 3, width);
  h.fuse = SkipBlock::create(pb, name + ".fuse", 2 * width, width);
  h.score = pb.dense(name + ".score", width, 1);
  h.phi10 = pb.dense(name + ".phi10", width, feature_dim);
  h.projection = pb.matrix(name + ".projection", feature_dim, 3);
  return h;
}

Tensor NormalHead::project(const Tensor& f_n) const {
  const Tensor raw = ad::reshape(ad::linear(ad::reshape(f_n, {1, f_n.numel()}), projection), {3});
  const Tensor len = ad::clamp(ad::l2norm(raw, 0), 1e-12, std::numeric_limits<double>::max());
  return ad::div(raw, len);
}

NormalHeadOutput NormalHead::operator()(const Tensor& features, const Tensor& points,
                                        std::span<const Vec3> coords) const {
  const std::size_t m = features.dim(0);
  if (m < neighbors) {
    throw std::invalid_argument("normal_head: " + std::to_string(m) +
                                " points are fewer than the " + std::to_string(neighbors) +
                                " position-fusion neighbors");
  }
  if (points.dim(0) != m || coords.size() != m) {
    throw std::invalid_argument("normal_head: features, points and coordinates disagree in count");
  }
  const NeighborGraph graph = knn_graph(coords, neighbors);
  const Tensor fused = fuse(ad::concat({features, pff(points, graph)}, 1));
  const Tensor s = ad::reshape(score(fused), {m});
  NormalHeadOutput out;
  out.w_hat = ad::sigmoid(s);
  out.pool_weights = ad::scale(ad::softmax(s, 0), static_cast<double>(m));
  const Tensor weighted = ad::mul(fused, ad::reshape(out.pool_weights, {m, 1}));
  out.f_n = ad::maxpool(ad::relu(phi10(weighted)), 0);
  out.n_hat = project(out.f_n);
  return out;
}

SignHead SignHead::create(ParamBuilder& pb, const std::string& name, std::size_t width,
                          std::size_t feature_dim, std::size_t patch_stages,
                          std::size_t cloud_stages) {
  SignHead h;
  h.phi12 = pb.dense(name + ".phi12", cloud_stages * width, width);
  h.phi13 = pb.dense(name + ".phi13", patch_stages * width, width);
  h.plus_hidden = pb.dense(name + ".plus.hidden", feature_dim + 2 * width, width);
  h.plus_out = pb.dense(name + ".plus.out", width, 1);
  h.minus_hidden = pb.dense(name + ".minus.hidden", feature_dim + 2 * width, width);
  h.minus_out = pb.dense(name + ".minus.out", width, 1);
  return h;
}

SignLogits SignHead::operator()(const Tensor& f_n, int sgn_mst, const std::vector<Tensor>& g_patch,
                                const std::vector<Tensor>& g_cloud, bool with_negative) const {
  if (g_patch.empty() || g_cloud.empty()) {
    throw std::invalid_argument("sign_head: missing global features of the " +
                                std::string(g_patch.empty() ? "patch" : "cloud") + " branch");
  }
  if (sgn_mst != 1 && sgn_mst != -1) {
    throw std::invalid_argument("sign_head: sign context must be +1 or -1");
  }
  const Tensor f_p = ad::relu(phi13(ad::concat(g_patch, 0)));
  const Tensor f_d = ad::relu(phi12(ad::concat(g_cloud, 0)));
  const Tensor f_plus = ad::scale(f_n, static_cast<double>(sgn_mst));
  SignLogits out;
  out.s_plus =
      ad::reshape(plus_out(ad::relu(plus_hidden(ad::concat({f_plus, f_d, f_p}, 0)))), {});
  if (with_negative) {
    const Tensor f_minus = ad::scale(f_plus, -1.0);
    out.s_minus =
        ad::reshape(minus_out(ad::relu(minus_hidden(ad::concat({f_minus, f_d, f_p}, 0)))), {});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  ParamBuilder pb(params_, config_.seed);
  const std::size_t w = config_.width;
  qstn_ = Qstn::create(pb, "qstn", w);
  for (std::size_t s = 0; s < config_.lfe_scales.size(); ++s) {
    std::vector<LfeBlock> chain;
    for (std::size_t d = 0; d < config_.lfe_depth; ++d) {
      chain.push_back(LfeBlock::create(
          pb, "mlfa_p.s" + std::to_string(s) + ".lfe" + std::to_string(d), d == 0 ? 3 : w, w));
    }
    lfe_patch_.push_back(std::move(chain));
  }
  aff_ = AffFuse::create(pb, "mlfa_p.aff", w);
  for (std::size_t d = 0; d < config_.lfe_depth; ++d) {
    lfe_cloud_.push_back(
        LfeBlock::create(pb, "mlfa_d.lfe" + std::to_string(d), d == 0 ? 3 : w, w));
  }
  for (std::size_t h = 0; h < config_.rho_p.size(); ++h) {
    hgif_patch_.push_back(HgifStage::create(pb, "hgif_p." + std::to_string(h), w,
                                            config_.pos_width, h % 2 == 0, config_.rho_p[h],
                                            config_.hgif_scales[h]));
  }
  for (std::size_t h = 0; h < config_.rho_d.size(); ++h) {
    hgif_cloud_.push_back(HgifStage::create(pb, "hgif_d." + std::to_string(h), w,
                                            config_.pos_width, h % 2 == 0, config_.rho_d[h],
                                            config_.hgif_scales_d[h]));
  }
  normal_head_ =
      NormalHead::create(pb, "normal_head", w, config_.feature_dim, config_.pff_neighbors);
  sign_head_ = SignHead::create(pb, "sign_head", w, config_.feature_dim, config_.rho_p.size(),
                                config_.rho_d.size());
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Tensor Model::mlfa_patch(const Tensor& points, std::span<const Vec3> coords) const {
  std::vector<Tensor> per_scale;
  for (std::size_t s = 0; s < lfe_patch_.size(); ++s) {
    const NeighborGraph graph = knn_graph(coords, config_.lfe_scales[s]);
    Tensor f = points;
    for (const auto& blk : lfe_patch_[s]) f = blk(f, graph);
    per_scale.push_back(f);
  }
  return aff_(per_scale[0], per_scale[1]);
}

Tensor Model::mlfa_cloud(const Tensor& points, std::span<const Vec3> coords) const {
  const NeighborGraph graph = knn_graph(coords, config_.lfe_scale_d);
  Tensor f = points;
  for (const auto& blk : lfe_cloud_) f = blk(f, graph);
  return f;
}

ForwardOutput Model::forward(const ForwardInput& input, const ForwardOptions& options) const {
  if (input.patch.size() != config_.n_p || input.cloud.size() != config_.n_d) {
    throw std::invalid_argument("forward: expected " + std::to_string(config_.n_p) +
                                " patch and " + std::to_string(config_.n_d) +
                                " cloud points, got " + std::to_string(input.patch.size()) +
                                " and " + std::to_string(input.cloud.size()));
  }
  ForwardOutput out;
  const Tensor x = points_tensor(input.patch);
  const Tensor y = points_tensor(input.cloud);
  out.r_qstn = qstn_(x);
  const Tensor xr = ad::linear(x, out.r_qstn);
  const Tensor yr = ad::linear(y, out.r_qstn);

  HgifState patch{mlfa_patch(xr, input.patch), xr, input.patch, {}, {}, {}};
  for (const auto& stage : hgif_patch_) patch = stage(patch);
  HgifState cloud{mlfa_cloud(yr, input.cloud), yr, input.cloud, {}, {}, {}};
  for (const auto& stage : hgif_cloud_) cloud = stage(cloud);

  const NormalHeadOutput head = normal_head_(patch.features, patch.points, patch.coords);
  out.n_hat_u = head.n_hat;
  out.w_hat = head.w_hat;
  out.f_n = head.f_n;
  out.head_points = patch.points.detach();
  out.g_patch = patch.globals;
  out.g_cloud = cloud.globals;

  if (options.use_mst_init) {
    // n_init as a row vector in the head frame: n_init^T R.
    const Vec3 init_head = to_mat3(out.r_qstn).transpose() * input.n_init;
    out.sgn_mst = to_vec3(out.n_hat_u).dot(init_head) >= 0.0 ? 1 : -1;
  } else {
    out.sgn_mst = 1;
  }
  SignLogits logits = sign_head_(out.f_n, out.sgn_mst, out.g_patch, out.g_cloud,
                                 options.with_negative);
  out.s_plus = logits.s_plus;
  out.s_minus = logits.s_minus;
  return out;
}

Tensor points_tensor(std::span<const Vec3> points) {
  std::vector<double> v;
  v.reserve(points.size() * 3);
  for (const auto& p : points) {
    v.push_back(p.x());
    v.push_back(p.y());
    v.push_back(p.z());
  }
  return Tensor::from_values({points.size(), 3}, std::move(v));
}

Vec3 to_vec3(const Tensor& t) {
  if (t.numel() != 3) {
    throw std::invalid_argument("to_vec3: tensor of shape " + ad::shape_str(t.shape()));
  }
  const auto& v = t.values();
  return {v[0], v[1], v[2]};
}

Mat3 to_mat3(const Tensor& t) {
  if (t.numel() != 9) {
    throw std::invalid_argument("to_mat3: tensor of shape " + ad::shape_str(t.shape()));
  }
  const auto& v = t.values();
  Mat3 m;
  m << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
  return m;
}

}  // namespace orinorm
