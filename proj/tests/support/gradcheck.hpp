#pragma once

// Central finite-difference gradient checks in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "uad/nn/loss.hpp"
#include "uad/nn/ops.hpp"
#include "uad/rng.hpp"

namespace uad::testing {

using DTensor = nn::Tensor<double>;

struct GradCase {
  std::string name;
  std::vector<nn::Shape> shapes;
  std::function<DTensor(const std::vector<DTensor>&)> fn;
  /// Input sampler; defaults to N(0,1).
  std::function<double(Rng&)> sample;
};

struct GradResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// entries whose true derivative is exactly zero from dividing by nothing.
inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Reduces fn's output to a scalar with fixed random weights, then compares the
/// tape gradient of every input element against a central difference.
inline GradResult check_gradient(const GradCase& c, std::uint64_t seed, double h = 1e-4) {
  Rng rng(seed);
  auto sample = c.sample ? c.sample : [](Rng& r) { return r.normal(); };
  std::vector<DTensor> inputs;
  for (const auto& s : c.shapes) {
    std::vector<double> v(nn::numel(s));
    for (double& x : v) x = sample(rng);
    inputs.push_back(DTensor::parameter(s, std::move(v)));
  }

  DTensor probe;
  {
    nn::NoGradGuard ng;
    probe = c.fn(inputs);
  }
  std::vector<double> w(probe.numel());
  for (double& x : w) x = rng.uniform(-1.0, 1.0);
  const DTensor weights(probe.shape(), w);
  auto objective = [&](const std::vector<DTensor>& xs) { return nn::sum(nn::mul(c.fn(xs), weights)); };

  objective(inputs).backward();
  GradResult out;
  nn::NoGradGuard ng;
  for (auto& in : inputs) {
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    auto vals = in.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = objective(inputs).item();
      vals[i] = keep - h;
      const double down = objective(inputs).item();
      vals[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      out.max_rel_error = std::max(out.max_rel_error, relative_error(a, numeric));
      ++out.checked;
    }
  }
  return out;
}

/// Samples bounded away from zero (for divisors and kinks).
inline double away_from_zero(Rng& r) {
  const double m = r.uniform(0.3, 1.5);
  return r.uniform() < 0.5 ? -m : m;
}

inline std::vector<GradCase> primitive_cases() {
  using S = nn::Shape;
  namespace o = nn;
  std::vector<GradCase> cs;
  cs.push_back({"add", {S{3, 4}, S{3, 4}}, [](auto& x) { return o::add(x[0], x[1]); }, {}});
  cs.push_back({"sub", {S{3, 4}, S{3, 4}}, [](auto& x) { return o::sub(x[0], x[1]); }, {}});
  cs.push_back({"mul", {S{3, 4}, S{3, 4}}, [](auto& x) { return o::mul(x[0], x[1]); }, {}});
  cs.push_back({"div", {S{3, 4}, S{3, 4}}, [](auto& x) { return o::div(x[0], x[1]); }, away_from_zero});
  cs.push_back({"scale", {S{5}}, [](auto& x) { return o::scale(x[0], 1.7); }, {}});
  cs.push_back({"add_scalar", {S{5}}, [](auto& x) { return o::add_scalar(x[0], -0.3); }, {}});
  cs.push_back({"add_broadcast", {S{2, 3, 4}, S{3, 4}}, [](auto& x) { return o::add_broadcast(x[0], x[1]); }, {}});
  cs.push_back({"sum", {S{2, 3}}, [](auto& x) { return o::sum(x[0]); }, {}});
  cs.push_back({"mean", {S{2, 3}}, [](auto& x) { return o::mean(x[0]); }, {}});
  cs.push_back({"mean_axis", {S{2, 3, 4}}, [](auto& x) { return o::mean_axis(x[0], 1); }, {}});
  cs.push_back({"matmul", {S{3, 4}, S{4, 5}}, [](auto& x) { return o::matmul(x[0], x[1]); }, {}});
  cs.push_back({"linear", {S{2, 3, 4}, S{4, 5}, S{5}}, [](auto& x) { return o::linear(x[0], x[1], x[2]); }, {}});
  cs.push_back({"linear_nobias", {S{3, 4}, S{4, 2}}, [](auto& x) { return o::linear(x[0], x[1], DTensor()); }, {}});
  cs.push_back({"bmm", {S{2, 3, 4}, S{2, 4, 5}}, [](auto& x) { return o::bmm(x[0], x[1]); }, {}});
  cs.push_back({"bmm_transposed", {S{2, 3, 4}, S{2, 5, 4}}, [](auto& x) { return o::bmm(x[0], x[1], true); }, {}});
  cs.push_back({"layer_norm", {S{2, 3, 6}, S{6}, S{6}}, [](auto& x) { return o::layer_norm(x[0], x[1], x[2]); }, {}});
  cs.push_back({"softmax", {S{2, 3, 5}}, [](auto& x) { return o::softmax(x[0]); }, {}});
  cs.push_back({"gelu", {S{3, 7}}, [](auto& x) { return o::gelu(x[0]); }, {}});
  cs.push_back({"relu", {S{3, 7}}, [](auto& x) { return o::relu(x[0]); }, away_from_zero});
  cs.push_back({"reshape", {S{2, 3, 4}}, [](auto& x) { return o::reshape(x[0], S{4, 6}); }, {}});
  cs.push_back({"permute", {S{2, 3, 4}}, [](auto& x) { return o::permute(x[0], {2, 0, 1}); }, {}});
  cs.push_back({"concat", {S{2, 3, 4}, S{2, 2, 4}},
                [](auto& x) { return o::concat(std::vector<DTensor>{x[0], x[1]}, 1); }, {}});
  cs.push_back({"conv2d_3x3", {S{2, 3, 5, 5}, S{4, 3, 3, 3}, S{4}},
                [](auto& x) { return o::conv2d(x[0], x[1], x[2]); }, {}});
  cs.push_back({"conv2d_1x1_nobias", {S{1, 2, 4, 3}, S{3, 2, 1, 1}},
                [](auto& x) { return o::conv2d(x[0], x[1], DTensor()); }, {}});
  cs.push_back({"upsample_nearest2x", {S{1, 2, 3, 3}}, [](auto& x) { return o::upsample_nearest2x(x[0]); }, {}});
  cs.push_back({"crop_center", {S{1, 2, 6, 5}}, [](auto& x) { return o::crop_center(x[0], 4, 3); }, {}});
  cs.push_back({"patchify", {S{2, 2, 6, 6}}, [](auto& x) { return o::patchify(x[0], 3); }, {}});
  cs.push_back({"separable_filter_valid", {S{2, 7, 8}},
                [](auto& x) { return o::separable_filter_valid(x[0], std::vector<double>{0.25, 0.5, 0.25}); }, {}});
  cs.push_back({"multi_head_attention",
                {S{2, 4, 8}, S{8, 8}, S{8}, S{8, 8}, S{8}, S{8, 8}, S{8}, S{8, 8}, S{8}},
                [](auto& x) {
                  const nn::AttentionWeights<double> w{x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]};
                  return o::multi_head_attention(x[0], x[0], x[0], w, 2);
                },
                [](Rng& r) { return 0.5 * r.normal(); }});
  cs.push_back({"mse_loss", {S{2, 3, 4}, S{2, 3, 4}}, [](auto& x) { return o::mse_loss(x[0], x[1]); }, {}});
  cs.push_back({"ssim", {S{2, 13, 13}, S{2, 13, 13}}, [](auto& x) { return o::ssim(x[0], x[1], 4.0); }, {}});
  cs.push_back({"ssim_loss_4d", {S{1, 2, 12, 14}, S{1, 2, 12, 14}},
                [](auto& x) { return o::ssim_loss(x[0], x[1], 2.0); }, {}});
  return cs;
}

}  // namespace uad::testing
