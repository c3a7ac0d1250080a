#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "orinorm/geom.hpp"
#include "orinorm/optim.hpp"
#include "orinorm/tensor.hpp"

namespace orinorm {

/// Architecture sizes. Defaults are the desk-scale configuration.
struct ModelConfig {
  std::size_t n_p = 256;  // patch points
  std::size_t n_d = 512;  // cloud subsample points
  std::vector<double> rho_p{2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0};
  std::vector<double> rho_d{0.5, 0.5, 1.0};
  std::vector<std::size_t> lfe_scales{16, 32};  // patch branch, fused pairwise
  std::size_t lfe_scale_d = 8;
  std::vector<std::size_t> hgif_scales{32, 32, 16, 16};
  std::vector<std::size_t> hgif_scales_d{16, 16, 16};
  std::size_t pff_neighbors = 16;
  std::size_t lfe_depth = 1;  // chained LFE blocks per scale
  std::size_t width = 64;
  std::size_t feature_dim = 128;  // dim(F_n)
  std::size_t pos_width = 32;     // coordinate embedding in odd stages
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on any violated constraint.
  void validate() const;

  /// Point counts after each downsampling stage: ceil(rho * N).
  std::vector<std::size_t> stage_counts_p() const;
  std::vector<std::size_t> stage_counts_d() const;
  /// Final patch cardinality M.
  std::size_t head_points() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// A 32-point configuration small enough for exhaustive gradient checks.
  static ModelConfig toy();
};

std::size_t downsample_count(std::size_t n, double rho);

/// k nearest neighbors (self included) of every point within the set,
/// row-major count x k. k is clamped to the set size.
struct NeighborGraph {
  std::size_t count = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;
};

NeighborGraph knn_graph(std::span<const Vec3> points, std::size_t k);

/// x W + b.
struct Dense {
  ad::Tensor weight;
  ad::Tensor bias;  // undefined for bias-free layers

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::linear(x, weight, bias); }
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

/// Creates parameters with uniform(-1/sqrt(in), 1/sqrt(in)) init and
/// registers them under dotted names.
class ParamBuilder {
 public:
  ParamBuilder(ParamList& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  Dense dense(const std::string& name, std::size_t in, std::size_t out, bool bias = true);
  Dense zero_dense(const std::string& name, std::size_t in, std::size_t out, bool bias = true);
  ad::Tensor matrix(const std::string& name, std::size_t rows, std::size_t cols);

 private:
  ad::Tensor make(const std::string& name, ad::Shape shape, double bound);

  ParamList& params_;
  std::mt19937_64 rng_;
};

/// Skip-connection block: relu(B relu(A x) + S x).
struct SkipBlock {
  Dense a;
  Dense b;
  Dense s;

  static SkipBlock create(ParamBuilder& pb, const std::string& name, std::size_t in, std::size_t out);
  ad::Tensor operator()(const ad::Tensor& x) const;
};

/// Edge-feature block. psi = relu(psi_layer(f)); for every point i and
/// neighbor j the skip block sees concat(psi_i, psi_j, psi_i - psi_j); the
/// result is max-pooled over neighbors.
///
/// The first linear layers of the skip block act on that concatenation and
/// are stored split into a self part and a neighbor part (a linear map of
/// the concatenation is exactly psi_i A_self + psi_j A_nbr), which avoids
/// materializing per-edge copies of psi.
struct LfeBlock {
  Dense psi;
  Dense a_self;
  Dense a_nbr;
  Dense b;
  Dense s_self;
  Dense s_nbr;

  static LfeBlock create(ParamBuilder& pb, const std::string& name, std::size_t in, std::size_t out);
  /// features [N, C_in] -> [N, C_out]. Throws on a graph of the wrong size.
  ad::Tensor operator()(const ad::Tensor& features, const NeighborGraph& graph) const;
};

/// Gated fusion of two per-point feature sets:
/// M = sigmoid(gate(maxpool_points(f1 + f2))), out = relu(out(f1 M + f2 (1 - M))).
struct AffFuse {
  Dense gate;
  Dense out;

  static AffFuse create(ParamBuilder& pb, const std::string& name, std::size_t width);
  ad::Tensor operator()(const ad::Tensor& f1, const ad::Tensor& f2) const;
  ad::Tensor gate_values(const ad::Tensor& f1, const ad::Tensor& f2) const;
};

/// Predicts a rotation from a point set: shared per-point MLP, max pool, MLP
/// to a quaternion offset from (1, 0, 0, 0). The last layer starts at zero.
struct Qstn {
  Dense l1;
  Dense l2;
  Dense l3;
  Dense l4;

  static Qstn create(ParamBuilder& pb, const std::string& name, std::size_t width);
  /// points [N, 3] -> [3, 3]. Falls back to the identity (with a warning on
  /// stderr) for an all-zero input or a vanishing quaternion.
  ad::Tensor operator()(const ad::Tensor& points) const;
};

/// Per-stage state of the hierarchical fusion chain.
struct HgifState {
  ad::Tensor features;  // [N, C]
  ad::Tensor points;    // [N, 3], rotated frame
  std::vector<Vec3> coords;  // neighbor search coordinates, same order as points
  ad::Tensor local;          // g of the previous stage, undefined at the start
  ad::Tensor prev_global;    // G of the previous stage, undefined at the start
  std::vector<ad::Tensor> globals;  // G of every completed stage
};

/// One downsampling stage. G = relu(phi6(maxpool relu(phi5 f))); the
/// nearest ceil(rho N) points survive; local structure g is max-pooled over
/// `scale` neighbors within the survivors from
/// odd stages:  concat(p_i, p_i - p_j, relu(phi8(p_i - p_j)))
/// even stages: concat(p_i, p_i - p_j, f_i - f_j)
/// through phi7, plus the previous stage's g. Then
/// f' = relu(phi4(G, G_prev, g)) + f restricted to the survivors.
struct HgifStage {
  bool odd = true;
  double rho = 1.0;
  std::size_t scale = 16;
  Dense phi5;
  Dense phi6;
  Dense phi7;
  Dense phi8;  // odd stages only
  Dense phi4_local;
  Dense phi4_global;  // acts on concat(G, G_prev), no bias

  static HgifStage create(ParamBuilder& pb, const std::string& name, std::size_t width,
                          std::size_t pos_width, bool odd, double rho, std::size_t scale);
  HgifState operator()(const HgifState& in) const;
};

struct NormalHeadOutput {
  ad::Tensor n_hat;     // [3], unit
  ad::Tensor w_hat;     // [M] in (0, 1), supervised by the weight loss
  ad::Tensor pool_weights;  // [M], M * softmax over points
  ad::Tensor f_n;       // [feature_dim]
};

/// Position feature fusion (an LFE block over coordinates merged into the
/// features by a skip block), per-point weighting, max-pooled normal feature
/// and the bias-free projection to a unit normal.
struct NormalHead {
  std::size_t neighbors = 16;
  LfeBlock pff;
  SkipBlock fuse;
  Dense score;
  Dense phi10;
  ad::Tensor projection;  // [feature_dim, 3], no bias

  static NormalHead create(ParamBuilder& pb, const std::string& name, std::size_t width,
                           std::size_t feature_dim, std::size_t neighbors);
  NormalHeadOutput operator()(const ad::Tensor& features, const ad::Tensor& points,
                              std::span<const Vec3> coords) const;
  /// normalize(F_n W).
  ad::Tensor project(const ad::Tensor& f_n) const;
};

struct SignLogits {
  ad::Tensor s_plus;
  ad::Tensor s_minus;  // undefined when the negative branch is skipped
};

/// Two-way sign decision on the normal feature. F_P and F_D summarize the
/// per-stage global features of each branch; the positive head sees
/// sgn * F_n and the negative head its negation.
struct SignHead {
  Dense phi12;  // cloud branch globals
  Dense phi13;  // patch branch globals
  Dense plus_hidden;
  Dense plus_out;
  Dense minus_hidden;
  Dense minus_out;

  static SignHead create(ParamBuilder& pb, const std::string& name, std::size_t width,
                         std::size_t feature_dim, std::size_t patch_stages,
                         std::size_t cloud_stages);
  SignLogits operator()(const ad::Tensor& f_n, int sgn_mst, const std::vector<ad::Tensor>& g_patch,
                        const std::vector<ad::Tensor>& g_cloud, bool with_negative = true) const;
};

/// Network inputs, already in the patch's normalized PCA frame. Patch points
/// are sorted by distance to the query (query first); cloud points likewise.
struct ForwardInput {
  std::vector<Vec3> patch;
  std::vector<Vec3> cloud;
  Vec3 n_init = Vec3::UnitZ();
};

struct ForwardOptions {
  bool use_mst_init = true;   // otherwise the sign context is fixed at +1
  bool with_negative = true;  // evaluate the negated-feature head
};

struct ForwardOutput {
  ad::Tensor n_hat_u;      // [3], rotated patch frame
  ad::Tensor r_qstn;       // [3, 3]; head frame = PCA frame * r_qstn
  ad::Tensor w_hat;        // [M]
  ad::Tensor head_points;  // [M, 3] in the head frame, detached
  ad::Tensor f_n;
  ad::Tensor s_plus;
  ad::Tensor s_minus;
  std::vector<ad::Tensor> g_patch;
  std::vector<ad::Tensor> g_cloud;
  int sgn_mst = 1;
};

/// Complete refinement network. Copies share parameters.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParamList& params() { return params_; }
  const ParamList& params() const { return params_; }
  std::size_t parameter_count() const;

  ForwardOutput forward(const ForwardInput& input, const ForwardOptions& options = {}) const;

  const Qstn& qstn() const { return qstn_; }
  const NormalHead& normal_head() const { return normal_head_; }
  const SignHead& sign_head() const { return sign_head_; }

 private:
  ad::Tensor mlfa_patch(const ad::Tensor& points, std::span<const Vec3> coords) const;
  ad::Tensor mlfa_cloud(const ad::Tensor& points, std::span<const Vec3> coords) const;

  ModelConfig config_;
  ParamList params_;
  Qstn qstn_;
  std::vector<std::vector<LfeBlock>> lfe_patch_;  // [scale][depth]
  AffFuse aff_;
  std::vector<LfeBlock> lfe_cloud_;
  std::vector<HgifStage> hgif_patch_;
  std::vector<HgifStage> hgif_cloud_;
  NormalHead normal_head_;
  SignHead sign_head_;
};

ad::Tensor points_tensor(std::span<const Vec3> points);
Vec3 to_vec3(const ad::Tensor& t);
Mat3 to_mat3(const ad::Tensor& t);

}  // namespace orinorm
