#include "orinorm/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace orinorm {

double cosine_lr(double lr0, std::size_t t, std::size_t total_steps) {
  if (total_steps == 0 || t >= total_steps) {
    return 0.0;
  }
  const double ratio = static_cast<double>(t) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * ratio));
}

OptimizerState make_optimizer(const ParamList& params, const AdamWConfig& config) {
  OptimizerState state;
  state.config = config;
  for (const auto& p : params) {
    state.m.emplace_back(p.tensor.numel(), 0.0);
    state.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return state;
}

void adamw_step(OptimizerState& state, ParamList& params) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer holds " + std::to_string(state.m.size()) +
                                " moment arrays for " + std::to_string(params.size()) +
                                " parameters");
  }
  const auto& c = state.config;
  const double lr = cosine_lr(c.lr0, state.step, c.total_steps);
  const double t = static_cast<double>(state.step + 1);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& values = params[k].tensor.mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != values.size() || v.size() != values.size()) {
      throw std::invalid_argument("adamw_step: moment shape mismatch for " + params[k].name);
    }
    const std::vector<double> g = params[k].tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      values[i] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * values[i]);
    }
  }
  ++state.step;
}

double clip_grad_norm(ParamList& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.mutable_grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace orinorm
