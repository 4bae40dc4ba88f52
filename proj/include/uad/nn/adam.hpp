#pragma once

#include <cstdint>
#include <vector>

#include "uad/nn/tensor.hpp"

namespace uad::nn {

/// Adam with decoupled weight decay. `first`/`second` hold one moment buffer per
/// parameter, in the order the parameters are passed to adam_step.
struct AdamState {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// false: classic L2 term added to the gradient instead.
  bool decoupled = true;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> first;
  std::vector<std::vector<float>> second;
};

/// p <- p - lr*wd*p (decoupled mode), then the bias-corrected adaptive step. Parameters whose
/// gradient is empty are treated as having a zero gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state);

}  // namespace uad::nn
