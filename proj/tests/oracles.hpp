#pragma once

// Independent reference implementations used as test oracles. These are
// written directly from the definitions with plain loops and share no
// code with the library kernels.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ddcnet/layers.hpp"
#include "ddcnet/tensor.hpp"

namespace oracle {

using ddc::ConvKernel;
using ddc::Tensor4;

template <typename T>
Tensor4<T> random_tensor(std::mt19937_64& rng, int n, int h, int w, int c, double lo = -1.0,
                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor4<T> t(n, h, w, c);
  for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
ConvKernel<T> random_kernel(std::mt19937_64& rng, int k, int cin, int cout, int d, int s) {
  ConvKernel<T> ker(k, k, cin, cout, d, s);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : ker.weights) v = static_cast<T>(u(rng));
  for (auto& v : ker.bias) v = static_cast<T>(u(rng));
  return ker;
}

/// Six nested loops straight from the same-padding definition.
template <typename T>
Tensor4<T> conv_bruteforce(const Tensor4<T>& x, const ConvKernel<T>& k) {
  const int oh = (x.h() + k.sy - 1) / k.sy, ow = (x.w() + k.sx - 1) / k.sx;
  Tensor4<T> out(x.n(), oh, ow, k.c_out);
  for (int b = 0; b < x.n(); ++b)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        for (int o = 0; o < k.c_out; ++o) {
          double acc = k.bias[o];
          for (int p = 0; p < k.kh; ++p)
            for (int q = 0; q < k.kw; ++q)
              for (int c = 0; c < k.c_in; ++c) {
                const int y = i * k.sy + (p - k.kh / 2) * k.dy;
                const int z = j * k.sx + (q - k.kw / 2) * k.dx;
                if (y < 0 || y >= x.h() || z < 0 || z >= x.w()) continue;
                acc += static_cast<double>(x(b, y, z, c)) * k.w(p, q, c, o);
              }
          out(b, i, j, o) = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
double dot(const std::vector<T>& a, const std::vector<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Central difference of a scalar function of one entry of `v`.
inline double central_diff(std::vector<double>& v, std::size_t idx,
                           const std::function<double()>& f, double eps = 1e-5) {
  const double keep = v[idx];
  v[idx] = keep + eps;
  const double fp = f();
  v[idx] = keep - eps;
  const double fm = f();
  v[idx] = keep;
  return (fp - fm) / (2 * eps);
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// dominating through cancellation noise.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

}  // namespace oracle
