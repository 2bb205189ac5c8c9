#include "ddcnet/flow.hpp"

#include <cctype>
#include <cmath>
#include <numbers>

#include "ddcnet/io.hpp"

namespace ddc {

FlowField::FlowField(int h_, int w_, float u0, float v0) : h(h_), w(w_) {
  if (h < 1 || w < 1) throw FlowError("flow field dims must be positive");
  u.assign(size(), u0);
  v.assign(size(), v0);
  valid.assign(size(), 1);
}

std::size_t FlowField::valid_count() const {
  std::size_t n = 0;
  for (auto m : valid) n += m != 0;
  return n;
}

void FlowField::check() const {
  if (h < 1 || w < 1) throw FlowError("flow field dims must be positive");
  if (u.size() != size() || v.size() != size() || valid.size() != size())
    throw FlowError("flow field arrays do not match " + std::to_string(h) + "x" +
                    std::to_string(w));
}

namespace {

void check_pair(const FlowField& a, const FlowField& b) {
  a.check();
  b.check();
  if (a.h != b.h || a.w != b.w)
    throw FlowError("flow fields differ in size: " + std::to_string(a.h) + "x" +
                    std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                    std::to_string(b.w));
}

}  // namespace

ErrorMap endpoint_error_map(const FlowField& est, const FlowField& gt) {
  check_pair(est, gt);
  ErrorMap m;
  m.h = est.h;
  m.w = est.w;
  m.ee.assign(est.size(), 0.0);
  m.valid.assign(est.size(), 0);
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (!est.valid[i] || !gt.valid[i]) continue;
    const double du = static_cast<double>(est.u[i]) - gt.u[i];
    const double dv = static_cast<double>(est.v[i]) - gt.v[i];
    m.ee[i] = std::sqrt(du * du + dv * dv);
    m.valid[i] = 1;
  }
  return m;
}

double aee(const FlowField& est, const FlowField& gt) {
  const auto m = endpoint_error_map(est, gt);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.ee.size(); ++i) {
    if (!m.valid[i]) continue;
    sum += m.ee[i];
    ++n;
  }
  if (n == 0) throw FlowError("no valid pixels to average");
  return sum / static_cast<double>(n);
}

double fl_all(const FlowField& est, const FlowField& gt) {
  const auto m = endpoint_error_map(est, gt);
  std::size_t n = 0, outliers = 0;
  for (std::size_t i = 0; i < m.ee.size(); ++i) {
    if (!m.valid[i]) continue;
    ++n;
    const double gu = gt.u[i], gv = gt.v[i];
    const double mag = std::sqrt(gu * gu + gv * gv);
    if (m.ee[i] >= 3.0 && m.ee[i] >= 0.05 * mag) ++outliers;
  }
  if (n == 0) throw FlowError("no valid pixels to evaluate");
  return static_cast<double>(outliers) / static_cast<double>(n);
}

std::vector<std::uint8_t> write_flo(const FlowField& f) {
  f.check();
  std::vector<std::uint8_t> out;
  out.reserve(12 + 8 * f.size());
  put_f32(out, kFloSentinel);
  put_i32(out, f.w);
  put_i32(out, f.h);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f.valid[i]) {
      put_f32(out, f.u[i]);
      put_f32(out, f.v[i]);
    } else {
      // Keep caller-supplied unknown markers bit-for-bit.
      const bool marked = std::fabs(f.u[i]) > kUnknownFlowThreshold ||
                          std::fabs(f.v[i]) > kUnknownFlowThreshold;
      put_f32(out, marked ? f.u[i] : kUnknownFlow);
      put_f32(out, marked ? f.v[i] : kUnknownFlow);
    }
  }
  return out;
}

FlowField read_flo(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12)
    throw FlowError("flo stream truncated in header at offset " + std::to_string(bytes.size()));
  const float tag = get_f32(bytes.data());
  if (tag != kFloSentinel) throw FlowError("flo sentinel mismatch at offset 0");
  const std::int32_t w = get_i32(bytes.data() + 4);
  const std::int32_t h = get_i32(bytes.data() + 8);
  if (w < 1) throw FlowError("flo width must be positive (offset 4)");
  if (h < 1) throw FlowError("flo height must be positive (offset 8)");
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - 12 < 8 * n)
    throw FlowError("flo stream truncated at offset " + std::to_string(bytes.size()) +
                    ", expected " + std::to_string(12 + 8 * n) + " bytes");
  if (bytes.size() != 12 + 8 * n)
    throw FlowError("flo stream has trailing bytes at offset " + std::to_string(12 + 8 * n));
  FlowField f(h, w);
  const std::uint8_t* p = bytes.data() + 12;
  for (std::size_t i = 0; i < n; ++i, p += 8) {
    f.u[i] = get_f32(p);
    f.v[i] = get_f32(p + 4);
    const bool unknown = std::isnan(f.u[i]) || std::isnan(f.v[i]) ||
                         std::fabs(f.u[i]) > kUnknownFlowThreshold ||
                         std::fabs(f.v[i]) > kUnknownFlowThreshold;
    f.valid[i] = unknown ? 0 : 1;
  }
  return f;
}

void save_flo(const std::string& path, const FlowField& f) {
  const auto bytes = write_flo(f);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                           bytes.size()));
}

FlowField load_flo(const std::string& path) { return read_flo(read_file_bytes(path)); }

const std::vector<std::array<int, 3>>& color_wheel() {
  static const std::vector<std::array<int, 3>> wheel = [] {
    constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    std::vector<std::array<int, 3>> w;
    for (int i = 0; i < RY; ++i) w.push_back({255, 255 * i / RY, 0});
    for (int i = 0; i < YG; ++i) w.push_back({255 - 255 * i / YG, 255, 0});
    for (int i = 0; i < GC; ++i) w.push_back({0, 255, 255 * i / GC});
    for (int i = 0; i < CB; ++i) w.push_back({0, 255 - 255 * i / CB, 255});
    for (int i = 0; i < BM; ++i) w.push_back({255 * i / BM, 0, 255});
    for (int i = 0; i < MR; ++i) w.push_back({255, 0, 255 - 255 * i / MR});
    return w;
  }();
  return wheel;
}

std::array<std::uint8_t, 3> flow_color(float fx, float fy) {
  const auto& wheel = color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  const float rad = std::sqrt(fx * fx + fy * fy);
  const float a = std::atan2(-fy, -fx) / std::numbers::pi_v<float>;
  const float fk = (a + 1.0f) / 2.0f * static_cast<float>(ncols - 1);
  const int k0 = static_cast<int>(fk);
  const int k1 = (k0 + 1) % ncols;
  const float f = fk - static_cast<float>(k0);
  std::array<std::uint8_t, 3> pix{};
  for (int b = 0; b < 3; ++b) {
    const float col0 = static_cast<float>(wheel[k0][b]) / 255.0f;
    const float col1 = static_cast<float>(wheel[k1][b]) / 255.0f;
    float col = (1 - f) * col0 + f * col1;
    if (rad <= 1)
      col = 1 - rad * (1 - col);
    else
      col *= 0.75f;
    pix[b] = static_cast<std::uint8_t>(255.0f * col);
  }
  return pix;
}

RgbImage flow_to_color(const FlowField& f, std::optional<float> max_magnitude) {
  f.check();
  float maxrad = 0.f;
  if (max_magnitude) {
    maxrad = *max_magnitude;
  } else {
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f.valid[i]) maxrad = std::max(maxrad, std::sqrt(f.u[i] * f.u[i] + f.v[i] * f.v[i]));
  }
  if (!(maxrad > 0.f)) maxrad = 1.f;
  RgbImage img;
  img.h = f.h;
  img.w = f.w;
  img.rgb.assign(3 * f.size(), 0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f.valid[i]) continue;
    const auto c = flow_color(f.u[i] / maxrad, f.v[i] / maxrad);
    std::copy(c.begin(), c.end(), img.rgb.begin() + 3 * i);
  }
  return img;
}

std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_ws();
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
      if (v > (1L << 24)) throw FlowError("ppm header value too large");
    }
    if (!any) throw FlowError("ppm header malformed at offset " + std::to_string(pos));
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw FlowError("not a binary PPM (P6) stream");
  pos = 2;
  RgbImage img;
  img.w = read_int();
  img.h = read_int();
  const int maxval = read_int();
  if (img.w < 1 || img.h < 1 || maxval != 255)
    throw FlowError("unsupported PPM dims or maxval");
  ++pos;  // single whitespace before raster
  const std::size_t n = 3 * static_cast<std::size_t>(img.w) * img.h;
  if (bytes.size() < pos + n) throw FlowError("ppm raster truncated");
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

Tensor4<float> image_to_tensor(const RgbImage& img) {
  Tensor4<float> t(1, img.h, img.w, 3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) t.vec()[i] = img.rgb[i] / 255.0f;
  return t;
}

template <typename T>
FlowField flow_from_tensor(const Tensor4<T>& t, int b) {
  if (t.c() != 2) throw ShapeError("flow tensor must have 2 channels");
  FlowField f(t.h(), t.w());
  for (int i = 0; i < t.h(); ++i)
    for (int j = 0; j < t.w(); ++j) {
      f.u[f.index(i, j)] = static_cast<float>(t(b, i, j, 0));
      f.v[f.index(i, j)] = static_cast<float>(t(b, i, j, 1));
    }
  return f;
}

template FlowField flow_from_tensor(const Tensor4<float>&, int);
template FlowField flow_from_tensor(const Tensor4<double>&, int);

}  // namespace ddc
