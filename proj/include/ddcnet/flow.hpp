#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddcnet/tensor.hpp"

namespace ddc {

/// Magnitude above which a `.flo` component marks the pixel unknown.
inline constexpr float kUnknownFlowThreshold = 1e9f;
/// Value written for pixels whose mask is false.
inline constexpr float kUnknownFlow = 1e10f;

/// Per-pixel displacement, u to the right and v downward, in pixels.
struct FlowField {
  int h = 0;
  int w = 0;
  std::vector<float> u;
  std::vector<float> v;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int h, int w, float u0 = 0.f, float v0 = 0.f);

  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * w + j; }
  std::size_t size() const { return static_cast<std::size_t>(h) * w; }
  std::size_t valid_count() const;
  void check() const;
};

/// Per-pixel endpoint error. Pixels invalid in either input are marked
/// invalid here and hold 0.
struct ErrorMap {
  int h = 0;
  int w = 0;
  std::vector<double> ee;
  std::vector<std::uint8_t> valid;
};

class FlowError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

ErrorMap endpoint_error_map(const FlowField& est, const FlowField& gt);
/// Mean endpoint error over pixels valid in both fields.
double aee(const FlowField& est, const FlowField& gt);
/// Fraction of valid pixels with EE >= 3 px and EE >= 5% of |gt|.
double fl_all(const FlowField& est, const FlowField& gt);

/// Middlebury `.flo`: f32 202021.25, i32 width, i32 height, then
/// interleaved (u, v) f32 rows, little-endian.
inline constexpr float kFloSentinel = 202021.25f;
std::vector<std::uint8_t> write_flo(const FlowField& f);
FlowField read_flo(const std::vector<std::uint8_t>& bytes);
void save_flo(const std::string& path, const FlowField& f);
FlowField load_flo(const std::string& path);

struct RgbImage {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::array<std::uint8_t, 3> at(int i, int j) const {
    const auto o = 3 * (static_cast<std::size_t>(i) * w + j);
    return {rgb[o], rgb[o + 1], rgb[o + 2]};
  }
};

/// The 55-entry Middlebury wheel (RY 15, YG 6, GC 4, CB 11, BM 13, MR 6).
const std::vector<std::array<int, 3>>& color_wheel();
/// Color of normalized flow (fx, fy) with |(fx, fy)| <= 1 inside the wheel.
std::array<std::uint8_t, 3> flow_color(float fx, float fy);
/// Renders a field; magnitudes are normalized by `max_magnitude` or, if
/// absent, by the largest valid magnitude. Invalid pixels are black.
RgbImage flow_to_color(const FlowField& f, std::optional<float> max_magnitude = {});

std::string encode_ppm(const RgbImage& img);
/// Binary P6 with maxval 255. Throws FlowError on malformed input.
RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes);
/// (1, h, w, 3) tensor scaled to [0, 1].
Tensor4<float> image_to_tensor(const RgbImage& img);

/// Batch item `b` of an (n, h, w, 2) tensor as a fully valid field.
template <typename T>
FlowField flow_from_tensor(const Tensor4<T>& t, int b = 0);

}  // namespace ddc
