#pragma once

#include <array>
#include <string>

#include "orinorm/geom.hpp"
#include "orinorm/net.hpp"
#include "orinorm/tensor.hpp"

namespace orinorm {

struct LossConfig {
  std::array<double, 5> lambda{0.1, 0.5, 1.0, 0.1, 0.1};
  bool use_cnd_gt = true;  // supervise with the clean twin's normal, not the stale annotation
  bool use_l2 = true;
  bool use_l5 = true;

  /// Throws std::invalid_argument on a negative weight.
  void validate() const;
};

/// ||n_gt x n_hat|| for unit 3-vectors. Throws std::invalid_argument when
/// either input is off unit length by more than 1e-6.
ad::Tensor l1_sine(const ad::Tensor& n_gt, const ad::Tensor& n_hat);

/// ||(n_gt R) x z|| with n_gt as a row vector and z = (0, 0, 1).
ad::Tensor l2_z(const ad::Tensor& n_gt, const ad::Tensor& r_qstn);

struct WeightTargets {
  std::vector<double> w;
  double delta = 0.0;
};

/// w_i = exp(-(p_i . n)^2 / delta^2), delta = max(0.05^2, 0.3 sum_i (p_i . n)^2 / M).
WeightTargets weight_targets(const ad::Tensor& points, const Vec3& n_gt);

/// Mean squared difference between w_hat and the weight targets.
ad::Tensor l3_weights(const ad::Tensor& points, const Vec3& n_gt, const ad::Tensor& w_hat);

/// Binary cross entropy of both sign heads against [sgn_mst * sgn_gt = 1]
/// and its complement. Probabilities are clamped to [1e-7, 1 - 1e-7]. An
/// undefined s_minus drops the negative term.
ad::Tensor l4_sign_bce(const ad::Tensor& s_plus, const ad::Tensor& s_minus, int sgn_mst,
                       int sgn_gt);

/// exp(-(sigmoid(s_plus) - sigmoid(s_minus))^2).
ad::Tensor l5_contrastive(const ad::Tensor& s_plus, const ad::Tensor& s_minus);

/// Individual terms; undefined entries are disabled.
struct LossParts {
  std::array<ad::Tensor, 5> l;

  std::array<double, 5> values() const;  // 0 for disabled terms
};

/// Weighted sum of the defined parts. Throws NumericError naming the first
/// non-finite part.
ad::Tensor total_loss(const LossParts& parts, const LossConfig& config);

/// All enabled terms for one forward pass. `n_gt_pca` is the supervising
/// normal in the patch's PCA frame.
LossParts compute_losses(const ForwardOutput& out, const Vec3& n_gt_pca, const LossConfig& config);

}  // namespace orinorm
