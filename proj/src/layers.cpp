#include "ddcnet/layers.hpp"

#include <string>

namespace ddc {

template <typename T>
ConvKernel<T>::ConvKernel(int kh_, int kw_, int c_in_, int c_out_, int dilation,
                          int stride)
    : kh(kh_), kw(kw_), c_in(c_in_), c_out(c_out_), dy(dilation), dx(dilation),
      sy(stride), sx(stride) {
  if (kh < 1 || kw < 1 || c_in < 1 || c_out < 1)
    throw ShapeError("conv kernel dimensions must be >= 1");
  weights.assign(weight_count(), T(0));
  bias.assign(static_cast<std::size_t>(c_out), T(0));
  validate();
}

template <typename T>
void ConvKernel<T>::validate() const {
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("conv kernel sizes must be odd, got " + std::to_string(kh) +
                     "x" + std::to_string(kw));
  if (dy < 1 || dx < 1) throw ShapeError("dilation must be >= 1");
  if (sy < 1 || sx < 1) throw ShapeError("stride must be >= 1");
  if (weights.size() != weight_count())
    throw ShapeError("weight array length does not match kernel dims");
  if (bias.size() != static_cast<std::size_t>(c_out))
    throw ShapeError("bias length does not match c_out");
}

template <typename T>
Shape4 conv2d_output_shape(const Shape4& in, const ConvKernel<T>& k) {
  if (in.c != k.c_in)
    throw ShapeError("conv input has " + std::to_string(in.c) +
                     " channels, kernel expects " + std::to_string(k.c_in));
  Shape4 out{in.n, strided_extent(in.h, k.sy), strided_extent(in.w, k.sx),
             k.c_out};
  if (out.h < 1 || out.w < 1) throw ShapeError("conv output would be empty");
  return out;
}

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const ConvKernel<T>& k) {
  k.validate();
  const Shape4 os = conv2d_output_shape(input.shape(), k);
  Tensor4<T> out(os);
  const int H = input.h(), W = input.w();
  const int cy = k.kh / 2, cx = k.kw / 2;
  const int cin = k.c_in, cout = k.c_out;
  const T* wt = k.weights.data();
  const int rows = os.n * os.h;

#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int b = r / os.h, i = r % os.h;
    for (int j = 0; j < os.w; ++j) {
      T* acc = out.pixel(b, i, j);
      for (int o = 0; o < cout; ++o) acc[o] = k.bias[o];
      for (int p = 0; p < k.kh; ++p) {
        const int y = i * k.sy + (p - cy) * k.dy;
        if (y < 0 || y >= H) continue;
        for (int q = 0; q < k.kw; ++q) {
          const int x = j * k.sx + (q - cx) * k.dx;
          if (x < 0 || x >= W) continue;
          const T* xin = input.pixel(b, y, x);
          const T* wtap = wt + (static_cast<std::size_t>(p) * k.kw + q) * cin * cout;
          for (int c = 0; c < cin; ++c) {
            const T xv = xin[c];
            const T* wrow = wtap + static_cast<std::size_t>(c) * cout;
            for (int o = 0; o < cout; ++o) acc[o] += xv * wrow[o];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor4<T> conv2d_backward_input(const Tensor4<T>& grad_out,
                                 const Shape4& input_shape,
                                 const ConvKernel<T>& k) {
  k.validate();
  const Shape4 os = conv2d_output_shape(input_shape, k);
  if (grad_out.shape() != os)
    throw ShapeError("conv grad_out shape " + grad_out.shape().str() +
                     " does not match forward output " + os.str());
  Tensor4<T> gin(input_shape);
  const int cy = k.kh / 2, cx = k.kw / 2;
  const int cin = k.c_in, cout = k.c_out;

  // (kh, kw, c_out, c_in) so the inner loop runs over contiguous c_in.
  std::vector<T> wt(k.weight_count());
  for (int p = 0; p < k.kh; ++p)
    for (int q = 0; q < k.kw; ++q)
      for (int c = 0; c < cin; ++c)
        for (int o = 0; o < cout; ++o)
          wt[((static_cast<std::size_t>(p) * k.kw + q) * cout + o) * cin + c] =
              k.w(p, q, c, o);

  const int rows = input_shape.n * input_shape.h;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int b = r / input_shape.h, y = r % input_shape.h;
    for (int x = 0; x < input_shape.w; ++x) {
      T* acc = gin.pixel(b, y, x);
      for (int p = 0; p < k.kh; ++p) {
        const int iy = y - (p - cy) * k.dy;
        if (iy < 0 || iy % k.sy != 0) continue;
        const int i = iy / k.sy;
        if (i >= os.h) continue;
        for (int q = 0; q < k.kw; ++q) {
          const int jx = x - (q - cx) * k.dx;
          if (jx < 0 || jx % k.sx != 0) continue;
          const int j = jx / k.sx;
          if (j >= os.w) continue;
          const T* g = grad_out.pixel(b, i, j);
          const T* wtap = wt.data() + (static_cast<std::size_t>(p) * k.kw + q) * cout * cin;
          for (int o = 0; o < cout; ++o) {
            const T gv = g[o];
            if (gv == T(0)) continue;
            const T* wrow = wtap + static_cast<std::size_t>(o) * cin;
            for (int c = 0; c < cin; ++c) acc[c] += gv * wrow[c];
          }
        }
      }
    }
  }
  return gin;
}

template <typename T>
void conv2d_backward_params(const Tensor4<T>& grad_out, const Tensor4<T>& input,
                            const ConvKernel<T>& k, std::vector<T>& gw,
                            std::vector<T>& gb) {
  k.validate();
  const Shape4 os = conv2d_output_shape(input.shape(), k);
  if (grad_out.shape() != os)
    throw ShapeError("conv grad_out shape " + grad_out.shape().str() +
                     " does not match forward output " + os.str());
  if (gw.size() != k.weight_count()) gw.assign(k.weight_count(), T(0));
  if (gb.size() != static_cast<std::size_t>(k.c_out)) gb.assign(k.c_out, T(0));
  const int H = input.h(), W = input.w();
  const int cy = k.kh / 2, cx = k.kw / 2;
  const int cin = k.c_in, cout = k.c_out;
  const int taps = k.kh * k.kw;

  // One tap per task; every dW entry is owned by exactly one task.
#pragma omp parallel for schedule(static)
  for (int t = 0; t < taps; ++t) {
    const int p = t / k.kw, q = t % k.kw;
    T* dtap = gw.data() + static_cast<std::size_t>(t) * cin * cout;
    for (int b = 0; b < os.n; ++b)
      for (int i = 0; i < os.h; ++i) {
        const int y = i * k.sy + (p - cy) * k.dy;
        if (y < 0 || y >= H) continue;
        for (int j = 0; j < os.w; ++j) {
          const int x = j * k.sx + (q - cx) * k.dx;
          if (x < 0 || x >= W) continue;
          const T* xin = input.pixel(b, y, x);
          const T* g = grad_out.pixel(b, i, j);
          for (int c = 0; c < cin; ++c) {
            const T xv = xin[c];
            if (xv == T(0)) continue;
            T* drow = dtap + static_cast<std::size_t>(c) * cout;
            for (int o = 0; o < cout; ++o) drow[o] += xv * g[o];
          }
        }
      }
  }
  for (int b = 0; b < os.n; ++b)
    for (int i = 0; i < os.h; ++i)
      for (int j = 0; j < os.w; ++j) {
        const T* g = grad_out.pixel(b, i, j);
        for (int o = 0; o < cout; ++o) gb[o] += g[o];
      }
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& grad_out, const Tensor4<T>& input,
                             const ConvKernel<T>& kernel) {
  ConvGrads<T> g;
  g.input = conv2d_backward_input(grad_out, input.shape(), kernel);
  g.weights.assign(kernel.weight_count(), T(0));
  g.bias.assign(kernel.c_out, T(0));
  conv2d_backward_params(grad_out, input, kernel, g.weights, g.bias);
  return g;
}

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_out, const Tensor4<T>& x) {
  if (grad_out.shape() != x.shape())
    throw ShapeError("relu_backward shape mismatch");
  Tensor4<T> out(x.shape());
  auto g = grad_out.data();
  auto xs = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] = xs[i] > T(0) ? g[i] : T(0);
  return out;
}

template <typename T>
Tensor4<T> upsample_nearest(const Tensor4<T>& x, int factor) {
  if (factor < 1) throw DomainError("upsample factor must be >= 1");
  if (factor == 1) return x;
  const Shape4 s = x.shape();
  Tensor4<T> out(s.n, s.h * factor, s.w * factor, s.c);
  for (int b = 0; b < s.n; ++b)
    for (int i = 0; i < out.h(); ++i)
      for (int j = 0; j < out.w(); ++j) {
        const T* src = x.pixel(b, i / factor, j / factor);
        std::copy(src, src + s.c, out.pixel(b, i, j));
      }
  return out;
}

template <typename T>
Tensor4<T> upsample_nearest_backward(const Tensor4<T>& grad_out, int factor) {
  if (factor < 1) throw DomainError("upsample factor must be >= 1");
  if (factor == 1) return grad_out;
  const Shape4 s = grad_out.shape();
  if (s.h % factor != 0 || s.w % factor != 0)
    throw ShapeError("upsample gradient dims not divisible by factor");
  Tensor4<T> out(s.n, s.h / factor, s.w / factor, s.c);
  for (int b = 0; b < s.n; ++b)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const T* src = grad_out.pixel(b, i, j);
        T* dst = out.pixel(b, i / factor, j / factor);
        for (int c = 0; c < s.c; ++c) dst[c] += src[c];
      }
  return out;
}

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels spatial mismatch: " + a.shape().str() +
                     " vs " + b.shape().str());
  Tensor4<T> out(a.n(), a.h(), a.w(), a.c() + b.c());
  for (int n = 0; n < a.n(); ++n)
    for (int i = 0; i < a.h(); ++i)
      for (int j = 0; j < a.w(); ++j) {
        T* dst = out.pixel(n, i, j);
        const T* pa = a.pixel(n, i, j);
        const T* pb = b.pixel(n, i, j);
        std::copy(pa, pa + a.c(), dst);
        std::copy(pb, pb + b.c(), dst + a.c());
      }
  return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>& x,
                                                 int a_channels) {
  if (a_channels < 1 || a_channels >= x.c())
    throw ShapeError("split_channels: invalid split point");
  const int bc = x.c() - a_channels;
  Tensor4<T> a(x.n(), x.h(), x.w(), a_channels);
  Tensor4<T> b(x.n(), x.h(), x.w(), bc);
  for (int n = 0; n < x.n(); ++n)
    for (int i = 0; i < x.h(); ++i)
      for (int j = 0; j < x.w(); ++j) {
        const T* src = x.pixel(n, i, j);
        std::copy(src, src + a_channels, a.pixel(n, i, j));
        std::copy(src + a_channels, src + x.c(), b.pixel(n, i, j));
      }
  return {std::move(a), std::move(b)};
}

#define DDC_INSTANTIATE_LAYERS(T)                                                \
  template struct ConvKernel<T>;                                                 \
  template Shape4 conv2d_output_shape(const Shape4&, const ConvKernel<T>&);      \
  template Tensor4<T> conv2d_forward(const Tensor4<T>&, const ConvKernel<T>&);   \
  template ConvGrads<T> conv2d_backward(const Tensor4<T>&, const Tensor4<T>&,    \
                                        const ConvKernel<T>&);                   \
  template Tensor4<T> conv2d_backward_input(const Tensor4<T>&, const Shape4&,    \
                                            const ConvKernel<T>&);               \
  template void conv2d_backward_params(const Tensor4<T>&, const Tensor4<T>&,     \
                                       const ConvKernel<T>&, std::vector<T>&,    \
                                       std::vector<T>&);                         \
  template Tensor4<T> relu_forward(const Tensor4<T>&);                           \
  template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);       \
  template Tensor4<T> upsample_nearest(const Tensor4<T>&, int);                  \
  template Tensor4<T> upsample_nearest_backward(const Tensor4<T>&, int);         \
  template Tensor4<T> concat_channels(const Tensor4<T>&, const Tensor4<T>&);     \
  template std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>&, int);

DDC_INSTANTIATE_LAYERS(float)
DDC_INSTANTIATE_LAYERS(double)

}  // namespace ddc
