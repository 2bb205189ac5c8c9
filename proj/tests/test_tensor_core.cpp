#include <doctest.h>

#include <random>

#include "ddcnet/layers.hpp"
#include "oracles.hpp"

using namespace ddc;

TEST_CASE("tensor shape invariants") {
  Tensor4<float> t(2, 3, 4, 5);
  CHECK(t.size() == 2u * 3 * 4 * 5);
  CHECK_THROWS_AS(Tensor4<float>(0, 1, 1, 1), ShapeError);
  CHECK_THROWS_AS(Tensor4<float>(Shape4{1, 2, 2, 1}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS_AS(t.at(2, 0, 0, 0), std::out_of_range);
  CHECK_THROWS_AS(t.at(0, 0, 4, 0), std::out_of_range);
  t(1, 2, 3, 4) = 7.f;
  CHECK(t.vec().back() == 7.f);
}

TEST_CASE("kernel invariants") {
  CHECK_THROWS_AS(ConvKernel<float>(2, 3, 1, 1), ShapeError);
  CHECK_THROWS_AS(ConvKernel<float>(3, 3, 1, 1, 0, 1), ShapeError);
  CHECK_THROWS_AS(ConvKernel<float>(3, 3, 1, 1, 1, 0), ShapeError);
  CHECK_NOTHROW(ConvKernel<float>(1, 1, 1, 1));
}

TEST_CASE("conv scalar affine") {
  Tensor4<double> x(1, 1, 1, 1, 2.0);
  ConvKernel<double> k(1, 1, 1, 1);
  k.weights[0] = 3.0;
  k.bias[0] = 1.0;
  const auto y = conv2d_forward(x, k);
  CHECK(y(0, 0, 0, 0) == 7.0);

  const auto g = conv2d_backward(Tensor4<double>(1, 1, 1, 1, 1.0), x, k);
  CHECK(g.input(0, 0, 0, 0) == 3.0);
  CHECK(g.weights[0] == 2.0);
  CHECK(g.bias[0] == 1.0);
}

TEST_CASE("dilated impulse response") {
  Tensor4<double> x(1, 7, 7, 1);
  x(0, 3, 3, 0) = 1.0;
  ConvKernel<double> k(3, 3, 1, 1, 2, 1);
  std::fill(k.weights.begin(), k.weights.end(), 1.0);
  const auto y = conv2d_forward(x, k);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) {
      const bool hit = (i == 1 || i == 3 || i == 5) && (j == 1 || j == 3 || j == 5);
      CHECK(y(0, i, j, 0) == (hit ? 1.0 : 0.0));
    }
}

TEST_CASE("conv matches brute force") {
  std::mt19937_64 rng(11);
  SUBCASE("spec example 2x6x6x3 -> 4") {
    const auto x = oracle::random_tensor<double>(rng, 2, 6, 6, 3);
    const auto k = oracle::random_kernel<double>(rng, 3, 3, 4, 1, 1);
    const auto a = conv2d_forward(x, k), b = oracle::conv_bruteforce(x, k);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.vec()[i] == doctest::Approx(b.vec()[i]).epsilon(1e-6));
  }
  SUBCASE("dilation, stride and odd sizes") {
    for (int d : {1, 2, 3})
      for (int s : {1, 2, 3})
        for (int ks : {1, 3, 5}) {
          const auto x = oracle::random_tensor<double>(rng, 2, 8, 7, 4);
          const auto k = oracle::random_kernel<double>(rng, ks, 4, 3, d, s);
          const auto a = conv2d_forward(x, k), b = oracle::conv_bruteforce(x, k);
          REQUIRE(a.shape() == b.shape());
          double worst = 0;
          for (std::size_t i = 0; i < a.size(); ++i)
            worst = std::max(worst, std::fabs(a.vec()[i] - b.vec()[i]));
          CHECK(worst < 1e-6);
        }
  }
}

TEST_CASE("conv errors") {
  ConvKernel<float> k(3, 3, 2, 1);
  CHECK_THROWS_AS(conv2d_forward(Tensor4<float>(1, 4, 4, 3), k), ShapeError);
  Tensor4<float> x(1, 4, 4, 2);
  CHECK_THROWS_AS(conv2d_backward(Tensor4<float>(1, 3, 4, 1), x, k), ShapeError);
}

TEST_CASE("stride-1 same padding preserves h and w") {
  for (int ks : {1, 3, 5, 7})
    for (int d : {1, 2, 5, 13}) {
      ConvKernel<float> k(ks, ks, 1, 1, d, 1);
      const auto y = conv2d_forward(Tensor4<float>(1, 9, 6, 1, 1.f), k);
      CHECK(y.h() == 9);
      CHECK(y.w() == 6);
    }
}

TEST_CASE("conv backward zero grad gives zero gradients") {
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor<double>(rng, 1, 5, 5, 2);
  const auto k = oracle::random_kernel<double>(rng, 3, 2, 3, 2, 1);
  const auto g = conv2d_backward(Tensor4<double>(1, 5, 5, 3), x, k);
  for (double v : g.input.vec()) CHECK(v == 0.0);
  for (double v : g.weights) CHECK(v == 0.0);
  for (double v : g.bias) CHECK(v == 0.0);
}

TEST_CASE("conv adjoint identity") {
  std::mt19937_64 rng(5);
  for (int s : {1, 2})
    for (int d : {1, 3}) {
      const auto x = oracle::random_tensor<double>(rng, 2, 8, 7, 3);
      auto k = oracle::random_kernel<double>(rng, 3, 3, 4, d, s);
      std::fill(k.bias.begin(), k.bias.end(), 0.0);
      const auto y = conv2d_forward(x, k);
      const auto g = oracle::random_tensor<double>(rng, y.n(), y.h(), y.w(), y.c());
      const auto gi = conv2d_backward_input(g, x.shape(), k);
      const double lhs = oracle::dot(y.vec(), g.vec());
      const double rhs = oracle::dot(x.vec(), gi.vec());
      CHECK(std::fabs(lhs - rhs) < 1e-6 * std::max(1.0, std::fabs(lhs)));
    }
}

TEST_CASE("conv gradients match finite differences") {
  std::mt19937_64 rng(9);
  for (int s : {1, 2}) {
    auto x = oracle::random_tensor<double>(rng, 2, 6, 5, 2);
    auto k = oracle::random_kernel<double>(rng, 3, 2, 3, 2, s);
    const auto y0 = conv2d_forward(x, k);
    const auto g = oracle::random_tensor<double>(rng, y0.n(), y0.h(), y0.w(), y0.c());
    auto loss = [&] { return oracle::dot(conv2d_forward(x, k).vec(), g.vec()); };
    const auto an = conv2d_backward(g, x, k);
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      worst = std::max(worst, oracle::rel_err(an.input.vec()[i], oracle::central_diff(x.vec(), i, loss)));
    for (std::size_t i = 0; i < k.weights.size(); ++i)
      worst = std::max(worst, oracle::rel_err(an.weights[i], oracle::central_diff(k.weights, i, loss)));
    for (std::size_t i = 0; i < k.bias.size(); ++i)
      worst = std::max(worst, oracle::rel_err(an.bias[i], oracle::central_diff(k.bias, i, loss)));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("conv gradients at 32-bit") {
  std::mt19937_64 rng(21);
  auto xd = oracle::random_tensor<double>(rng, 1, 5, 5, 2);
  auto kd = oracle::random_kernel<double>(rng, 3, 2, 2, 1, 1);
  const auto gd = oracle::random_tensor<double>(rng, 1, 5, 5, 2);
  const auto ref = conv2d_backward(gd, xd, kd);
  ConvKernel<float> kf(3, 3, 2, 2);
  std::transform(kd.weights.begin(), kd.weights.end(), kf.weights.begin(), [](double v) { return float(v); });
  std::transform(kd.bias.begin(), kd.bias.end(), kf.bias.begin(), [](double v) { return float(v); });
  const auto f = conv2d_backward(gd.cast<float>(), xd.cast<float>(), kf);
  for (std::size_t i = 0; i < ref.weights.size(); ++i)
    CHECK(oracle::rel_err(f.weights[i], ref.weights[i], 1e-3) < 1e-3);
  for (std::size_t i = 0; i < ref.input.size(); ++i)
    CHECK(oracle::rel_err(f.input.vec()[i], ref.input.vec()[i], 1e-3) < 1e-3);
}

TEST_CASE("relu") {
  Tensor4<float> x(Shape4{1, 1, 1, 3}, std::vector<float>{-1.f, 0.f, 2.f});
  const auto y = relu_forward(x);
  CHECK(y.vec() == std::vector<float>{0.f, 0.f, 2.f});
  Tensor4<float> x2(Shape4{1, 1, 1, 2}, std::vector<float>{-1.f, 2.f});
  const auto g = relu_backward(Tensor4<float>(1, 1, 1, 2, 5.f), x2);
  CHECK(g.vec() == std::vector<float>{0.f, 5.f});
  CHECK(relu_backward(Tensor4<float>(1, 1, 1, 3, 1.f), x).vec()[1] == 0.f);

  std::mt19937_64 rng(3);
  const auto r = oracle::random_tensor<float>(rng, 2, 4, 4, 3);
  CHECK(relu_forward(relu_forward(r)).vec() == relu_forward(r).vec());
}

TEST_CASE("relu gradient matches finite differences") {
  std::mt19937_64 rng(4);
  auto x = oracle::random_tensor<double>(rng, 1, 4, 4, 2);
  const auto g = oracle::random_tensor<double>(rng, 1, 4, 4, 2);
  const auto an = relu_backward(g, x);
  auto loss = [&] { return oracle::dot(relu_forward(x).vec(), g.vec()); };
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(oracle::rel_err(an.vec()[i], oracle::central_diff(x.vec(), i, loss)) < 1e-6);
}

TEST_CASE("upsample nearest") {
  Tensor4<float> x(Shape4{1, 2, 2, 1}, std::vector<float>{1, 2, 3, 4});
  const auto y = upsample_nearest(x, 2);
  REQUIRE(y.shape() == Shape4{1, 4, 4, 1});
  const float want[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(y(0, i, j, 0) == want[i][j]);
  CHECK(upsample_nearest(x, 1).vec() == x.vec());
  const auto g = upsample_nearest_backward(Tensor4<float>(1, 4, 4, 1, 1.f), 2);
  REQUIRE(g.shape() == Shape4{1, 2, 2, 1});
  for (float v : g.vec()) CHECK(v == 4.f);
  CHECK_THROWS_AS(upsample_nearest(x, 0), DomainError);
}

TEST_CASE("upsample gradient matches finite differences") {
  std::mt19937_64 rng(6);
  auto x = oracle::random_tensor<double>(rng, 2, 3, 2, 2);
  const auto g = oracle::random_tensor<double>(rng, 2, 9, 6, 2);
  const auto an = upsample_nearest_backward(g, 3);
  auto loss = [&] { return oracle::dot(upsample_nearest(x, 3).vec(), g.vec()); };
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(oracle::rel_err(an.vec()[i], oracle::central_diff(x.vec(), i, loss)) < 1e-6);
}

TEST_CASE("concat and split") {
  const auto y = concat_channels(Tensor4<float>(1, 4, 4, 64, 1.f), Tensor4<float>(1, 4, 4, 64, 2.f));
  CHECK(y.c() == 128);
  CHECK(y(0, 1, 1, 63) == 1.f);
  CHECK(y(0, 1, 1, 64) == 2.f);

  std::mt19937_64 rng(7);
  const auto a = oracle::random_tensor<float>(rng, 2, 3, 3, 2);
  const auto b = oracle::random_tensor<float>(rng, 2, 3, 3, 5);
  const auto [a2, b2] = split_channels(concat_channels(a, b), 2);
  CHECK(a2.vec() == a.vec());
  CHECK(b2.vec() == b.vec());

  CHECK_THROWS_AS(concat_channels(Tensor4<float>(1, 4, 4, 1), Tensor4<float>(1, 4, 5, 1)), ShapeError);
  CHECK_THROWS_AS(concat_channels(Tensor4<float>(2, 4, 4, 1), Tensor4<float>(1, 4, 4, 1)), ShapeError);
}

TEST_CASE("conv forward is bitwise deterministic") {
  std::mt19937_64 rng(8);
  const auto x = oracle::random_tensor<float>(rng, 2, 16, 16, 8);
  const auto k = oracle::random_kernel<float>(rng, 3, 8, 8, 2, 1);
  const auto a = conv2d_forward(x, k), b = conv2d_forward(x, k);
  CHECK(a.vec() == b.vec());
  const auto ga = conv2d_backward(a, x, k), gb = conv2d_backward(a, x, k);
  CHECK(ga.weights == gb.weights);
  CHECK(ga.input.vec() == gb.input.vec());
}
