#pragma once

#include <vector>

#include "uad/nn/tensor.hpp"

namespace uad::nn {

/// Mean over all elements of (a - b)^2.
template <typename T> Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b);

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
std::vector<double> gaussian_window(std::size_t size, double sigma);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over all valid window positions of every 2D plane. Inputs are
/// [N,H,W] or [B,C,H,W]; each (b,c) plane is scored independently and the
/// result is the mean over planes. Throws std::invalid_argument on
/// data_range <= 0.
template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, T data_range, const SsimOptions& opt = {});

/// 1 - ssim(a, b).
template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& a, const Tensor<T>& b, T data_range, const SsimOptions& opt = {});

}  // namespace uad::nn
