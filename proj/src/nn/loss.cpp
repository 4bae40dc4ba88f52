#include "uad/nn/loss.hpp"

#include <cmath>
#include <stdexcept>

#include "uad/nn/ops.hpp"

namespace uad::nn {

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mse_loss: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const auto av = a.values(), bv = b.values();
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  const T n = static_cast<T>(av.size());
  return Tensor<T>::from_op({}, {acc / n}, "mse_loss", {a, b}, [n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const T s = T(2) * self.grad[0] / n;
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += s * (av[i] - bv[i]);
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < av.size(); ++i) g[i] -= s * (av[i] - bv[i]);
    }
  });
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    total += (k[i] = std::exp(-d * d / (2.0 * sigma * sigma)));
  }
  for (double& v : k) v /= total;
  return k;
}

template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, T data_range, const SsimOptions& opt) {
  if (!(data_range > T(0))) throw std::invalid_argument("ssim: data_range must be positive");
  if (a.shape() != b.shape())
    throw std::invalid_argument("ssim: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  if (a.rank() < 2) throw std::invalid_argument("ssim: needs at least 2D input, got " + shape_str(a.shape()));
  const std::size_t H = a.shape()[a.rank() - 2], W = a.shape()[a.rank() - 1];
  const Shape planes{a.numel() / (H * W), H, W};
  const auto x = reshape(a, planes);
  const auto y = reshape(b, planes);

  std::vector<T> taps;
  for (double v : gaussian_window(opt.window, opt.sigma)) taps.push_back(static_cast<T>(v));
  const T c1 = static_cast<T>(std::pow(opt.k1 * static_cast<double>(data_range), 2));
  const T c2 = static_cast<T>(std::pow(opt.k2 * static_cast<double>(data_range), 2));
  auto blur = [&](const Tensor<T>& t) { return separable_filter_valid(t, taps); };

  const auto mu_x = blur(x);
  const auto mu_y = blur(y);
  const auto mu_xx = mul(mu_x, mu_x);
  const auto mu_yy = mul(mu_y, mu_y);
  const auto mu_xy = mul(mu_x, mu_y);
  const auto var_x = sub(blur(mul(x, x)), mu_xx);
  const auto var_y = sub(blur(mul(y, y)), mu_yy);
  const auto cov = sub(blur(mul(x, y)), mu_xy);

  const auto num = mul(add_scalar(scale(mu_xy, T(2)), c1), add_scalar(scale(cov, T(2)), c2));
  const auto den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(var_x, var_y), c2));
  return mean(div(num, den));
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& a, const Tensor<T>& b, T data_range, const SsimOptions& opt) {
  return add_scalar(scale(ssim(a, b, data_range, opt), T(-1)), T(1));
}

template Tensor<float> mse_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> mse_loss(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> ssim(const Tensor<float>&, const Tensor<float>&, float, const SsimOptions&);
template Tensor<double> ssim(const Tensor<double>&, const Tensor<double>&, double, const SsimOptions&);
template Tensor<float> ssim_loss(const Tensor<float>&, const Tensor<float>&, float, const SsimOptions&);
template Tensor<double> ssim_loss(const Tensor<double>&, const Tensor<double>&, double, const SsimOptions&);

}  // namespace uad::nn
