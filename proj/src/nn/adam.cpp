#include "uad/nn/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace uad::nn {

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState& state) {
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.numel(), 0.f);
      state.second.emplace_back(p.numel(), 0.f);
    }
  }
  if (state.first.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state tracks " + std::to_string(state.first.size()) +
                                " parameters, got " + std::to_string(params.size()));
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double decay = 1.0 - state.lr * state.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].values();
    const auto grad = params[k].grad();
    auto& m = state.first[k];
    auto& v = state.second[k];
    if (m.size() != values.size()) throw std::invalid_argument("adam_step: moment/parameter size mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      if (!state.decoupled) g += state.weight_decay * static_cast<double>(values[i]);
      m[i] = static_cast<float>(state.beta1 * m[i] + (1.0 - state.beta1) * g);
      v[i] = static_cast<float>(state.beta2 * v[i] + (1.0 - state.beta2) * g * g);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double p = static_cast<double>(values[i]);
      if (state.decoupled && state.weight_decay != 0.0) p *= decay;
      p -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
      values[i] = static_cast<T>(p);
    }
  }
}

template void adam_step(std::vector<Tensor<float>>&, AdamState&);
template void adam_step(std::vector<Tensor<double>>&, AdamState&);

}  // namespace uad::nn
