#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "orinorm/tensor.hpp"

namespace orinorm {

struct NamedParam {
  std::string name;
  ad::Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

struct AdamWConfig {
  double lr0 = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t total_steps = 1;
};

struct OptimizerState {
  AdamWConfig config;
  std::size_t step = 0;  // completed updates
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// lr0 * 0.5 * (1 + cos(pi t / T)); zero once t >= T.
double cosine_lr(double lr0, std::size_t t, std::size_t total_steps);

OptimizerState make_optimizer(const ParamList& params, const AdamWConfig& config);

/// One decoupled-weight-decay Adam update using the gradients stored on the
/// parameters, at the learning rate of the current step.
void adamw_step(OptimizerState& state, ParamList& params);

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before scaling.
double clip_grad_norm(ParamList& params, double max_norm);

void zero_grads(ParamList& params);

}  // namespace orinorm
