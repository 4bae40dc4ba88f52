#include <cmath>

#include <doctest.h>

#include "support/gradcheck.hpp"
#include "uad/nn/ops.hpp"

using namespace uad;
using namespace uad::nn;
using testing::check_gradient;
using testing::primitive_cases;

TEST_CASE("every primitive matches central differences") {
  for (const auto& c : primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = check_gradient(c, 1000 + seed);
      INFO(c.name << " seed " << seed);
      CHECK(r.checked > 0);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("gradients accumulate across uses of one tensor") {
  auto x = Tensor<double>::parameter({3}, {1.0, -2.0, 0.5});
  sum(add(mul(x, x), x)).backward();
  const std::vector<double> g(x.grad().begin(), x.grad().end());
  CHECK(g == std::vector<double>{3.0, -3.0, 2.0});
}

TEST_CASE("no-grad mode records nothing") {
  auto x = Tensor<float>::parameter({2}, {1.f, 2.f});
  Tensor<float> y;
  {
    NoGradGuard ng;
    CHECK_FALSE(grad_enabled());
    y = mul(x, x);
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("backward requires a scalar") {
  auto x = Tensor<double>::parameter({2}, {1.0, 2.0});
  CHECK_THROWS_AS(scale(x, 2.0).backward(), std::invalid_argument);
}

TEST_CASE("matmul and conv2d agree with hand-computed values") {
  const Tensor<double> a({2, 2}, {1, 2, 3, 4});
  const Tensor<double> b({2, 2}, {5, 6, 7, 8});
  const auto c = matmul(a, b);
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{19, 22, 43, 50});

  // 1-channel 3x3 box filter with zero padding on a 3x3 ramp.
  const Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor<double> w({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  const auto y = conv2d(x, w, Tensor<double>());
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.values()[4] == 45);
  CHECK(y.values()[0] == 1 + 2 + 4 + 5);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  const Tensor<double> x({2, 3}, {1000, 1001, 1002, -5, 0, 5});
  const auto y = softmax(x);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::isfinite(y.values()[r * 3 + c]));
      s += y.values()[r * 3 + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("patchify orders patches row-major and flattens channel-major") {
  std::vector<double> v(1 * 2 * 4 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const auto p = patchify(Tensor<double>({1, 2, 4, 4}, v), 2);
  CHECK(p.shape() == Shape{1, 4, 8});
  // Second patch (top-right), first element: channel 0, y 0, x 2.
  CHECK(p.values()[8] == 2);
  // First patch, element 4: channel 1, y 0, x 0.
  CHECK(p.values()[4] == 16);
}

TEST_CASE("shape errors are reported") {
  const Tensor<double> a({2, 3});
  const Tensor<double> b({4, 5});
  CHECK_THROWS(matmul(a, b));
  CHECK_THROWS(add(a, b));
}
