#include "tcrlm/optim.hpp"

#include <cmath>

namespace tcrlm::num {

AdamState AdamState::init(std::span<const Tensor> params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor& p : params) {
    s.m.emplace_back(std::size_t(p.size()), 0.0);
    s.v.emplace_back(std::size_t(p.size()), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state,
               const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    fail("ShapeMismatch", "adam_step: state holds " +
                              std::to_string(state.m.size()) +
                              " slots for " + std::to_string(params.size()) +
                              " params");
  }
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].values_mut();
    auto grads = params[pi].grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    if (m.size() != vals.size()) {
      fail("ShapeMismatch", "adam_step: state slot " + std::to_string(pi) +
                                " size " + std::to_string(m.size()) +
                                " vs param size " + std::to_string(vals.size()));
    }
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double g = grads[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      vals[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double grad_global_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double norm = grad_global_norm(params);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (Tensor& p : params) {
      for (double& g : p.grad_mut()) g *= s;
    }
  }
  return norm;
}

void zero_grads(std::span<Tensor> params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace tcrlm::num
