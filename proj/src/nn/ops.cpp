#include "uad/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Core>

namespace uad::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& why) {
  throw std::invalid_argument(std::string(op) + ": shape " + shape_str(a) + " " + why);
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

template <typename T>
Node<T>& input(Node<T>& self, std::size_t i) {
  return *self.inputs[i];
}

// Gradient buffer of input i, or nullptr if it does not need one.
template <typename T>
T* grad_of(Node<T>& self, std::size_t i) {
  Node<T>& n = *self.inputs[i];
  return n.requires_grad ? n.ensure_grad().data() : nullptr;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("add", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = grad_of(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("sub", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "sub", {a, b}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("mul", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {a, b}, [](Node<T>& self) {
    const auto& av = input(self, 0).value;
    const auto& bv = input(self, 1).value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("div", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "div", {a, b}, [](Node<T>& self) {
    const auto& bv = input(self, 1).value;
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / bv[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bv[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return Tensor<T>::from_op(a.shape(), std::move(out), "scale", {a}, [s](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  return Tensor<T>::from_op(a.shape(), std::move(out), "add_scalar", {a}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin()))
    shape_error("add_broadcast", xs, ys);
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / std::max<std::size_t>(inner, 1);
  std::vector<T> out(x.numel());
  const auto xv = x.values(), yv = y.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] + yv[i];
  return Tensor<T>::from_op(xs, std::move(out), "add_broadcast", {x, y}, [outer, inner](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = grad_of(self, 1))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
  });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  return Tensor<T>::from_op({}, {s}, "sum", {a}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0)) {
      const std::size_t n = input(self, 0).value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  const T n = static_cast<T>(a.numel());
  return Tensor<T>::from_op({}, {s / n}, "mean", {a}, [n](Node<T>& self) {
    if (T* g = grad_of(self, 0)) {
      const T d = self.grad[0] / n;
      const std::size_t count = input(self, 0).value.size();
      for (std::size_t i = 0; i < count; ++i) g[i] += d;
    }
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  const auto& s = a.shape();
  if (axis >= s.size()) shape_error("mean_axis", s, "has no axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T(0));
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * n + k) * inner + i];
  for (T& v : out) v /= static_cast<T>(n);
  return Tensor<T>::from_op(os, std::move(out), "mean_axis", {a}, [outer, inner, n](Node<T>& self) {
    if (T* g = grad_of(self, 0)) {
      const T inv = T(1) / static_cast<T>(n);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
    }
  });
}

// ------------------------------------------------------------ matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(a.values().data(), m, k) * CMapMat<T>(b.values().data(), k, n);
  return Tensor<T>::from_op({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& self) {
    CMapMat<T> g(self.grad.data(), m, n);
    if (T* ga = grad_of(self, 0))
      MapMat<T>(ga, m, k).noalias() += g * CMapMat<T>(input(self, 1).value.data(), k, n).transpose();
    if (T* gb = grad_of(self, 1))
      MapMat<T>(gb, k, n).noalias() += CMapMat<T>(input(self, 0).value.data(), m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) shape_error("linear", x.shape(), w.shape());
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim)) shape_error("linear", w.shape(), b.shape());
  const std::size_t rows = x.numel() / in;
  Shape os = x.shape();
  os.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  MapMat<T> y(out.data(), rows, out_dim);
  y.noalias() = CMapMat<T>(x.values().data(), rows, in) * CMapMat<T>(w.values().data(), in, out_dim);
  if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), out_dim);
  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return Tensor<T>::from_op(std::move(os), std::move(out), "linear", std::move(inputs),
                            [rows, in, out_dim](Node<T>& self) {
    CMapMat<T> g(self.grad.data(), rows, out_dim);
    if (T* gx = grad_of(self, 0))
      MapMat<T>(gx, rows, in).noalias() += g * CMapMat<T>(input(self, 1).value.data(), in, out_dim).transpose();
    if (T* gw = grad_of(self, 1))
      MapMat<T>(gw, in, out_dim).noalias() += CMapMat<T>(input(self, 0).value.data(), rows, in).transpose() * g;
    if (self.inputs.size() > 2)
      if (T* gb = grad_of(self, 2))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < out_dim; ++c) gb[c] += self.grad[r * out_dim + c];
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) shape_error("bmm", a.shape(), b.shape());
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) shape_error("bmm", a.shape(), b.shape());
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    CMapMat<T> am(a.values().data() + i * m * k, m, k);
    MapMat<T> y(out.data() + i * m * n, m, n);
    if (transpose_b)
      y.noalias() = am * CMapMat<T>(b.values().data() + i * n * k, n, k).transpose();
    else
      y.noalias() = am * CMapMat<T>(b.values().data() + i * k * n, k, n);
  }
  return Tensor<T>::from_op({batch, m, n}, std::move(out), "bmm", {a, b},
                            [batch, m, k, n, transpose_b](Node<T>& self) {
    T* ga = grad_of(self, 0);
    T* gb = grad_of(self, 1);
    const T* av = input(self, 0).value.data();
    const T* bv = input(self, 1).value.data();
    for (std::size_t i = 0; i < batch; ++i) {
      CMapMat<T> g(self.grad.data() + i * m * n, m, n);
      CMapMat<T> am(av + i * m * k, m, k);
      if (transpose_b) {
        CMapMat<T> bm(bv + i * n * k, n, k);
        if (ga) MapMat<T>(ga + i * m * k, m, k).noalias() += g * bm;
        if (gb) MapMat<T>(gb + i * n * k, n, k).noalias() += g.transpose() * am;
      } else {
        CMapMat<T> bm(bv + i * k * n, k, n);
        if (ga) MapMat<T>(ga + i * m * k, m, k).noalias() += g * bm.transpose();
        if (gb) MapMat<T>(gb + i * k * n, k, n).noalias() += am.transpose() * g;
      }
    }
  });
}

// -------------------------------------------------------- normalization, act.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) shape_error("layer_norm", x.shape(), "has no feature axis");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d}) shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{d}) shape_error("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * is;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = gv[i] * h + bv[i];
    }
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                            [rows, d, xhat, inv_std](Node<T>& self) {
    const auto& gv = input(self, 1).value;
    T* gx = grad_of(self, 0);
    T* gg = grad_of(self, 1);
    T* gb = grad_of(self, 2);
    std::vector<T> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * d;
      const T* h = xhat->data() + r * d;
      T mean_dh = 0, mean_dh_h = 0;
      for (std::size_t i = 0; i < d; ++i) {
        if (gg) gg[i] += g[i] * h[i];
        if (gb) gb[i] += g[i];
        dxhat[i] = g[i] * gv[i];
        mean_dh += dxhat[i];
        mean_dh_h += dxhat[i] * h[i];
      }
      if (!gx) continue;
      mean_dh /= static_cast<T>(d);
      mean_dh_h /= static_cast<T>(d);
      for (std::size_t i = 0; i < d; ++i)
        gx[r * d + i] += (*inv_std)[r] * (dxhat[i] - mean_dh - h[i] * mean_dh_h);
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) shape_error("softmax", x.shape(), "has no feature axis");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T* o = out.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (o[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < d; ++i) o[i] /= s;
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), "softmax", {x}, [rows, d](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[i] * (g[i] - dot);
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  return Tensor<T>::from_op(x.shape(), std::move(out), "gelu", {x}, [inv_sqrt2](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    const auto& xv = input(self, 0).value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      gx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return Tensor<T>::from_op(x.shape(), std::move(out), "relu", {x}, [](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xv = input(self, 0).value;
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T(0)) gx[i] += self.grad[i];
  });
}

// --------------------------------------------------------------- layout ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  std::vector<T> out(x.values().begin(), x.values().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), "reshape", {x}, [](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) shape_error("permute", s, "does not match permutation rank");
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) shape_error("permute", s, "got an invalid permutation");
    used[p] = true;
  }
  Shape os(r);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  for (std::size_t i = 0; i < r; ++i) os[i] = s[perm[i]];
  // Source offset of every destination element, walked in destination order.
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < x.numel(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    (*src)[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*src)[o]];
  return Tensor<T>::from_op(std::move(os), std::move(out), "permute", {x}, [src](Node<T>& self) {
    if (T* g = grad_of(self, 0))
      for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*src)[o]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) shape_error("concat", s0, "has no axis " + std::to_string(axis));
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> extents;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != s0.size()) shape_error("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) shape_error("concat", s0, s);
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto v = xs[k].values();
    const std::size_t chunk = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * chunk, chunk, out.data() + o * total * inner + offset * inner);
    offset += extents[k];
  }
  return Tensor<T>::from_op(std::move(os), std::move(out), "concat", xs,
                            [outer, inner, total, extents](Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::size_t chunk = extents[k] * inner;
      if (T* g = grad_of(self, k))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += self.grad[o * total * inner + offset * inner + i];
      offset += extents[k];
    }
  });
}

// ------------------------------------------------------------------ imaging

namespace {

// col[(c*k + ky)*k + kx, y*W + x] = x[c, y + ky - r, x + kx - r] (zero outside).
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* col) {
  const long r = static_cast<long>(k / 2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * H * W;
        const long dy = static_cast<long>(ky) - r, dx = static_cast<long>(kx) - r;
        for (long y = 0; y < static_cast<long>(H); ++y) {
          const long sy = y + dy;
          T* row = dst + y * static_cast<long>(W);
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill_n(row, W, T(0));
            continue;
          }
          const T* src = img + (c * H + static_cast<std::size_t>(sy)) * W;
          for (long x = 0; x < static_cast<long>(W); ++x) {
            const long sx = x + dx;
            row[x] = (sx < 0 || sx >= static_cast<long>(W)) ? T(0) : src[sx];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* img) {
  const long r = static_cast<long>(k / 2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * H * W;
        const long dy = static_cast<long>(ky) - r, dx = static_cast<long>(kx) - r;
        for (long y = 0; y < static_cast<long>(H); ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          T* dst = img + (c * H + static_cast<std::size_t>(sy)) * W;
          const T* row = src + y * static_cast<long>(W);
          for (long x = 0; x < static_cast<long>(W); ++x) {
            const long sx = x + dx;
            if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += row[x];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0)
    shape_error("conv2d", x.shape(), w.shape());
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2), K = C * k * k, P = H * W;
  if (b.defined() && b.shape() != Shape{O}) shape_error("conv2d", w.shape(), b.shape());
  std::vector<T> out(B * O * P);
  std::vector<T> col(K * P);
  CMapMat<T> wm(w.values().data(), O, K);
  for (std::size_t n = 0; n < B; ++n) {
    im2col(x.values().data() + n * C * P, C, H, W, k, col.data());
    MapMat<T> y(out.data() + n * O * P, O, P);
    y.noalias() = wm * CMapMat<T>(col.data(), K, P);
    if (b.defined())
      y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.values().data(), O);
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return Tensor<T>::from_op({B, O, H, W}, std::move(out), "conv2d", std::move(inputs),
                            [B, C, H, W, O, k, K, P](Node<T>& self) {
    T* gx = grad_of(self, 0);
    T* gw = grad_of(self, 1);
    T* gb = self.inputs.size() > 2 ? grad_of(self, 2) : nullptr;
    const T* xv = input(self, 0).value.data();
    CMapMat<T> wm(input(self, 1).value.data(), O, K);
    std::vector<T> col(K * P);
    for (std::size_t n = 0; n < B; ++n) {
      CMapMat<T> g(self.grad.data() + n * O * P, O, P);
      if (gw) {
        im2col(xv + n * C * P, C, H, W, k, col.data());
        MapMat<T>(gw, O, K).noalias() += g * CMapMat<T>(col.data(), K, P).transpose();
      }
      // Plain loop: Eigen's vectorized reductions vary with buffer alignment.
      if (gb)
        for (std::size_t o = 0; o < O; ++o) {
          const T* row = self.grad.data() + n * O * P + o * P;
          T acc = 0;
          for (std::size_t i = 0; i < P; ++i) acc += row[i];
          gb[o] += acc;
        }
      if (gx) {
        MapMat<T>(col.data(), K, P).noalias() = wm.transpose() * g;
        col2im_add(col.data(), C, H, W, k, gx + n * C * P);
      }
    }
  });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() != 4) shape_error("upsample_nearest2x", x.shape(), "is not [B,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> out(planes * 4 * H * W);
  const auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y) {
      const T* src = xv.data() + (p * H + y / 2) * W;
      T* dst = out.data() + (p * 2 * H + y) * 2 * W;
      for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
    }
  return Tensor<T>::from_op({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), "upsample_nearest2x", {x},
                            [planes, H, W](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < 2 * H; ++y) {
        const T* g = self.grad.data() + (p * 2 * H + y) * 2 * W;
        T* dst = gx + (p * H + y / 2) * W;
        for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += g[xx];
      }
  });
}

template <typename T>
Tensor<T> crop_center(const Tensor<T>& x, std::size_t h, std::size_t w) {
  if (x.rank() != 4 || h > x.dim(2) || w > x.dim(3))
    shape_error("crop_center", x.shape(), "cannot be cropped to " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t top = (H - h) / 2, left = (W - w) / 2;
  std::vector<T> out(planes * h * w);
  const auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(xv.data() + (p * H + top + y) * W + left, w, out.data() + (p * h + y) * w);
  return Tensor<T>::from_op({x.dim(0), x.dim(1), h, w}, std::move(out), "crop_center", {x},
                            [planes, H, W, h, w, top, left](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y) {
        const T* g = self.grad.data() + (p * h + y) * w;
        T* dst = gx + (p * H + top + y) * W + left;
        for (std::size_t xx = 0; xx < w; ++xx) dst[xx] += g[xx];
      }
  });
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
  if (x.rank() != 4 || patch == 0 || x.dim(2) % patch || x.dim(3) % patch)
    shape_error("patchify", x.shape(), "is not divisible into " + std::to_string(patch) + "-pixel patches");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t gh = H / patch, gw = W / patch, F = C * patch * patch;
  auto blocks = permute(reshape(x, {B, C, gh, patch, gw, patch}), {0, 2, 4, 1, 3, 5});
  return reshape(blocks, {B, gh * gw, F});
}

template <typename T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, const std::vector<T>& kernel) {
  const std::size_t K = kernel.size();
  if (x.rank() != 3 || K == 0 || x.dim(1) < K || x.dim(2) < K)
    shape_error("separable_filter_valid", x.shape(), "is smaller than the " + std::to_string(K) + "-tap window");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t oh = H - K + 1, ow = W - K + 1;
  std::vector<T> tmp(N * H * ow);
  std::vector<T> out(N * oh * ow);
  const auto xv = x.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t y = 0; y < H; ++y) {
      const T* src = xv.data() + (n * H + y) * W;
      T* dst = tmp.data() + (n * H + y) * ow;
      for (std::size_t xx = 0; xx < ow; ++xx) {
        T acc = 0;
        for (std::size_t t = 0; t < K; ++t) acc += kernel[t] * src[xx + t];
        dst[xx] = acc;
      }
    }
    for (std::size_t y = 0; y < oh; ++y) {
      T* dst = out.data() + (n * oh + y) * ow;
      std::fill_n(dst, ow, T(0));
      for (std::size_t t = 0; t < K; ++t) {
        const T* src = tmp.data() + (n * H + y + t) * ow;
        for (std::size_t xx = 0; xx < ow; ++xx) dst[xx] += kernel[t] * src[xx];
      }
    }
  }
  return Tensor<T>::from_op({N, oh, ow}, std::move(out), "separable_filter_valid", {x},
                            [N, H, W, K, oh, ow, kernel](Node<T>& self) {
    T* gx = grad_of(self, 0);
    if (!gx) return;
    std::vector<T> gtmp(H * ow);
    for (std::size_t n = 0; n < N; ++n) {
      std::fill(gtmp.begin(), gtmp.end(), T(0));
      for (std::size_t y = 0; y < oh; ++y) {
        const T* g = self.grad.data() + (n * oh + y) * ow;
        for (std::size_t t = 0; t < K; ++t) {
          T* dst = gtmp.data() + (y + t) * ow;
          for (std::size_t xx = 0; xx < ow; ++xx) dst[xx] += kernel[t] * g[xx];
        }
      }
      for (std::size_t y = 0; y < H; ++y) {
        const T* g = gtmp.data() + y * ow;
        T* dst = gx + (n * H + y) * W;
        for (std::size_t xx = 0; xx < ow; ++xx)
          for (std::size_t t = 0; t < K; ++t) dst[xx + t] += kernel[t] * g[xx];
      }
    }
  });
}

// ----------------------------------------------------------------- attention

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                               const AttentionWeights<T>& w, std::size_t heads) {
  if (q_in.rank() != 3 || k_in.rank() != 3 || v_in.rank() != 3 || k_in.shape() != v_in.shape() ||
      q_in.dim(0) != k_in.dim(0) || q_in.dim(2) != k_in.dim(2))
    shape_error("multi_head_attention", q_in.shape(), k_in.shape());
  const std::size_t B = q_in.dim(0), Nq = q_in.dim(1), Nk = k_in.dim(1), d = q_in.dim(2);
  if (heads == 0 || d % heads) shape_error("multi_head_attention", q_in.shape(), "is not divisible into heads");
  const std::size_t dh = d / heads;
  auto split = [&](const Tensor<T>& t, std::size_t n) {
    return reshape(permute(reshape(t, {B, n, heads, dh}), {0, 2, 1, 3}), {B * heads, n, dh});
  };
  auto q = split(linear(q_in, w.wq, w.bq), Nq);
  auto k = split(linear(k_in, w.wk, w.bk), Nk);
  auto v = split(linear(v_in, w.wv, w.bv), Nk);
  auto scores = scale(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(dh)));
  auto ctx = bmm(softmax(scores), v);
  auto merged = reshape(permute(reshape(ctx, {B, heads, Nq, dh}), {0, 2, 1, 3}), {B, Nq, d});
  return linear(merged, w.wo, w.bo);
}

#define UAD_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> mean(const Tensor<T>&);                                                        \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                                 \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);           \
  template Tensor<T> softmax(const Tensor<T>&);                                                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                    \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                          \
  template Tensor<T> crop_center(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> separable_filter_valid(const Tensor<T>&, const std::vector<T>&);               \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                          const AttentionWeights<T>&, std::size_t);

UAD_INSTANTIATE_OPS(float)
UAD_INSTANTIATE_OPS(double)

}  // namespace uad::nn
