#pragma once

#include <utility>
#include <vector>

#include "ddcnet/tensor.hpp"

namespace ddc {

/// Weights are laid out (kh, kw, c_in, c_out) with c_out fastest.
template <typename T>
struct ConvKernel {
  int kh = 3;
  int kw = 3;
  int c_in = 1;
  int c_out = 1;
  int dy = 1;
  int dx = 1;
  int sy = 1;
  int sx = 1;
  std::vector<T> weights;
  std::vector<T> bias;

  ConvKernel() = default;
  ConvKernel(int kh, int kw, int c_in, int c_out, int dilation = 1,
             int stride = 1);

  std::size_t weight_count() const {
    return static_cast<std::size_t>(kh) * kw * c_in * c_out;
  }
  std::size_t param_count() const { return weight_count() + c_out; }

  T& w(int p, int q, int k, int o) {
    return weights[((static_cast<std::size_t>(p) * kw + q) * c_in + k) * c_out + o];
  }
  const T& w(int p, int q, int k, int o) const {
    return weights[((static_cast<std::size_t>(p) * kw + q) * c_in + k) * c_out + o];
  }

  /// Throws ShapeError unless kernel sizes are odd, dilation/stride >= 1
  /// and array lengths agree with the declared dims.
  void validate() const;
};

/// Output spatial size of a same-padded strided conv: ceil(n / s).
inline int strided_extent(int n, int s) { return (n + s - 1) / s; }

template <typename T>
Shape4 conv2d_output_shape(const Shape4& in, const ConvKernel<T>& k);

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const ConvKernel<T>& kernel);

template <typename T>
struct ConvGrads {
  Tensor4<T> input;
  std::vector<T> weights;
  std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& grad_out, const Tensor4<T>& input,
                             const ConvKernel<T>& kernel);

/// Input gradient only; skips the weight/bias reductions.
template <typename T>
Tensor4<T> conv2d_backward_input(const Tensor4<T>& grad_out,
                                 const Shape4& input_shape,
                                 const ConvKernel<T>& kernel);

/// Accumulates weight and bias gradients into `gw` and `gb`.
template <typename T>
void conv2d_backward_params(const Tensor4<T>& grad_out, const Tensor4<T>& input,
                            const ConvKernel<T>& kernel, std::vector<T>& gw,
                            std::vector<T>& gb);

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x);

/// Gradient passes where x > 0; the subgradient at 0 is 0.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x);

template <typename T>
Tensor4<T> upsample_nearest(const Tensor4<T>& x, int factor);

template <typename T>
Tensor4<T> upsample_nearest_backward(const Tensor4<T>& grad_out, int factor);

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b);

/// Inverse of concat_channels: first `a_channels` go to the first result.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>& x,
                                                 int a_channels);

}  // namespace ddc
