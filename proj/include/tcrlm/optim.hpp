#pragma once

#include <span>
#include <vector>

#include "tcrlm/tensor.hpp"

namespace tcrlm::num {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment accumulators, one slot per parameter tensor.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;

  static AdamState init(std::span<const Tensor> params);
};

// Standard Adam with bias correction, reading each parameter's accumulated
// grad. Deterministic: plain index-order loops.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg);

double grad_global_norm(std::span<const Tensor> params);

// Scales all grads by max_norm/norm when norm exceeds max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

void zero_grads(std::span<Tensor> params);

}  // namespace tcrlm::num
