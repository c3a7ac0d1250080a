#include "orinorm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "orinorm/error.hpp"

namespace orinorm {

using ad::Tensor;

namespace {

constexpr double kProbFloor = 1e-7;

void require_unit(const Tensor& t, const char* what) {
  if (t.numel() != 3) {
    throw std::invalid_argument(std::string(what) + " must hold 3 values, got shape " +
                                ad::shape_str(t.shape()));
  }
  const double len = to_vec3(t).norm();
  if (!(std::abs(len - 1.0) <= 1e-6)) {
    throw std::invalid_argument(std::string(what) + " is not a unit vector (length " +
                                std::to_string(len) + ")");
  }
}

Tensor clamped_prob(const Tensor& logit) {
  return ad::clamp(ad::sigmoid(logit), kProbFloor, 1.0 - kProbFloor);
}

// -log(p) for target 1, -log(1 - p) for target 0.
Tensor bce(const Tensor& logit, bool target) {
  const Tensor p = clamped_prob(logit);
  const Tensor q = target ? p : ad::sub(Tensor::scalar(1.0), p);
  return ad::scale(ad::log(q), -1.0);
}

}  // namespace

void LossConfig::validate() const {
  for (double l : lambda) {
    if (!(l >= 0.0)) {
      throw std::invalid_argument("loss weights must be nonnegative");
    }
  }
}

Tensor l1_sine(const Tensor& n_gt, const Tensor& n_hat) {
  require_unit(n_gt, "l1_sine: ground-truth normal");
  require_unit(n_hat, "l1_sine: predicted normal");
  return ad::l2norm(ad::cross3(ad::reshape(n_gt, {3}), ad::reshape(n_hat, {3})), 0);
}

Tensor l2_z(const Tensor& n_gt, const Tensor& r_qstn) {
  const Tensor rotated = ad::reshape(ad::linear(ad::reshape(n_gt, {1, 3}), r_qstn), {3});
  return ad::l2norm(ad::cross3(rotated, Tensor::from_values({3}, {0.0, 0.0, 1.0})), 0);
}

WeightTargets weight_targets(const Tensor& points, const Vec3& n_gt) {
  if (points.rank() != 2 || points.dim(1) != 3 || points.dim(0) == 0) {
    throw std::invalid_argument("weight targets need a non-empty [M, 3] point set, got " +
                                ad::shape_str(points.shape()));
  }
  const std::size_t m = points.dim(0);
  const auto& pv = points.values();
  std::vector<double> sq(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = pv[3 * i] * n_gt.x() + pv[3 * i + 1] * n_gt.y() + pv[3 * i + 2] * n_gt.z();
    sq[i] = d * d;
    total += sq[i];
  }
  WeightTargets t;
  t.delta = std::max(0.0025, 0.3 * total / static_cast<double>(m));
  t.w.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    t.w[i] = std::exp(-sq[i] / (t.delta * t.delta));
  }
  return t;
}

Tensor l3_weights(const Tensor& points, const Vec3& n_gt, const Tensor& w_hat) {
  const WeightTargets t = weight_targets(points, n_gt);
  if (w_hat.numel() != t.w.size()) {
    throw std::invalid_argument("l3_weights: " + std::to_string(w_hat.numel()) +
                                " predicted weights for " + std::to_string(t.w.size()) + " points");
  }
  const Tensor target = Tensor::from_values(w_hat.shape(), t.w);
  return ad::mean(ad::square(ad::sub(w_hat, target)));
}

Tensor l4_sign_bce(const Tensor& s_plus, const Tensor& s_minus, int sgn_mst, int sgn_gt) {
  const bool consistent = sgn_mst * sgn_gt == 1;
  Tensor loss = bce(s_plus, consistent);
  if (s_minus.defined()) {
    loss = ad::add(loss, bce(s_minus, !consistent));
  }
  return loss;
}

Tensor l5_contrastive(const Tensor& s_plus, const Tensor& s_minus) {
  const Tensor d = ad::sub(ad::sigmoid(s_plus), ad::sigmoid(s_minus));
  return ad::exp(ad::scale(ad::square(d), -1.0));
}

std::array<double, 5> LossParts::values() const {
  std::array<double, 5> v{};
  for (std::size_t i = 0; i < 5; ++i) {
    v[i] = l[i].defined() ? l[i].item() : 0.0;
  }
  return v;
}

Tensor total_loss(const LossParts& parts, const LossConfig& config) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    if (!parts.l[i].defined()) continue;
    const double v = parts.l[i].item();
    if (!std::isfinite(v)) {
      throw NumericError("loss term L" + std::to_string(i + 1) + " is not finite (" +
                         std::to_string(v) + ")");
    }
    total = ad::add(total, ad::scale(parts.l[i], config.lambda[i]));
  }
  return total;
}

LossParts compute_losses(const ForwardOutput& out, const Vec3& n_gt_pca, const LossConfig& config) {
  const Tensor gt = Tensor::from_values({3}, {n_gt_pca.x(), n_gt_pca.y(), n_gt_pca.z()});
  // Supervising normal in the head frame; depends on the predicted rotation.
  const Tensor gt_head = ad::reshape(ad::linear(ad::reshape(gt, {1, 3}), out.r_qstn), {3});
  const Vec3 gt_head_v = to_vec3(gt_head);
  const int sgn_gt = gt_head_v.dot(to_vec3(out.n_hat_u)) >= 0.0 ? 1 : -1;

  LossParts parts;
  parts.l[0] = l1_sine(gt_head, out.n_hat_u);
  if (config.use_l2) {
    parts.l[1] = l2_z(gt, out.r_qstn);
  }
  parts.l[2] = l3_weights(out.head_points, gt_head_v, out.w_hat);
  parts.l[3] = l4_sign_bce(out.s_plus, out.s_minus, out.sgn_mst, sgn_gt);
  if (config.use_l5 && out.s_minus.defined()) {
    parts.l[4] = l5_contrastive(out.s_plus, out.s_minus);
  }
  return parts;
}

}  // namespace orinorm
