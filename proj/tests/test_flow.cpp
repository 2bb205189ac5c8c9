#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "ddcnet/flow.hpp"

using namespace ddc;

namespace {

FlowField random_field(std::mt19937_64& rng, int h, int w, double invalid_frac = 0.2) {
  std::uniform_real_distribution<float> u(-20.f, 20.f);
  std::bernoulli_distribution inv(invalid_frac);
  FlowField f(h, w);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = u(rng);
    f.v[i] = u(rng);
    f.valid[i] = !inv(rng);
  }
  return f;
}

// Little-endian byte composition, independent of the library's packers.
void le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
void lef(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  le32(out, v);
}

}  // namespace

TEST_CASE("endpoint error basics") {
  FlowField est(2, 2), gt(2, 2, 3.f, 4.f);
  const auto m = endpoint_error_map(est, gt);
  for (double e : m.ee) CHECK(e == 5.0);
  CHECK(aee(est, gt) == 5.0);
  CHECK(aee(gt, gt) == 0.0);
  CHECK_THROWS_AS(endpoint_error_map(FlowField(2, 3), gt), FlowError);
}

TEST_CASE("aee examples") {
  FlowField gt(1, 4), est(1, 4);
  est.u = {0.f, 0.f, 4.f, 4.f};
  CHECK(aee(est, gt) == 2.0);
  FlowField uni(3, 3, 2.f, 0.f);
  CHECK(aee(uni, FlowField(3, 3)) == 2.0);
  FlowField none(1, 2);
  none.valid = {0, 0};
  CHECK_THROWS_AS(aee(none, FlowField(1, 2)), FlowError);
  CHECK_THROWS_AS(fl_all(none, FlowField(1, 2)), FlowError);
}

TEST_CASE("fl_all thresholds") {
  FlowField gt(1, 1, 10.f, 0.f), est(1, 1, 13.f, 0.f);
  CHECK(fl_all(est, gt) == 1.0);  // 3 >= 3 and 3 >= 0.5
  FlowField gt2(1, 1, 100.f, 0.f), est2(1, 1, 103.f, 0.f);
  CHECK(fl_all(est2, gt2) == 0.0);  // 3 < 5
}

TEST_CASE("metrics match per-pixel brute force on masked fields") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto est = random_field(rng, 7, 9), gt = random_field(rng, 7, 9);
    const auto m = endpoint_error_map(est, gt);
    double sum = 0;
    int n = 0, out = 0;
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 9; ++j) {
        const auto k = static_cast<std::size_t>(i * 9 + j);
        const bool ok = est.valid[k] && gt.valid[k];
        CHECK(bool(m.valid[k]) == ok);
        if (!ok) continue;
        const double du = double(est.u[k]) - gt.u[k], dv = double(est.v[k]) - gt.v[k];
        const double ee = std::sqrt(du * du + dv * dv);
        CHECK(m.ee[k] == ee);
        sum += ee;
        ++n;
        out += ee >= 3.0 && ee >= 0.05 * std::hypot(double(gt.u[k]), double(gt.v[k]));
      }
    CHECK(aee(est, gt) == doctest::Approx(sum / n).epsilon(1e-14));
    CHECK(fl_all(est, gt) == double(out) / n);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_field(rng, 5, 5, 0.0), b = random_field(rng, 5, 5, 0.0);
    CHECK(aee(a, a) == 0.0);
    CHECK(fl_all(a, a) == 0.0);
    CHECK(aee(a, b) == doctest::Approx(aee(b, a)).epsilon(1e-14));
    FlowField a2 = a, b2 = b;
    for (auto* f : {&a2, &b2})
      for (std::size_t i = 0; i < f->size(); ++i) {
        f->u[i] *= 4.f;
        f->v[i] *= 4.f;
      }
    CHECK(aee(a2, b2) == doctest::Approx(4 * aee(a, b)).epsilon(1e-6));
  }
}

TEST_CASE("flo round trip is bitwise") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto f = random_field(rng, 1 + trial % 7, 1 + trial % 5);
    // Some invalid pixels carry explicit markers, others default ones.
    for (std::size_t i = 0; i < f.size(); i += 3)
      if (!f.valid[i]) f.u[i] = f.v[i] = 1.5e9f;
    const auto bytes = write_flo(f);
    CHECK(bytes.size() == 12 + 8 * f.size());
    const auto g = read_flo(bytes);
    CHECK(write_flo(g) == bytes);
    CHECK(g.valid == f.valid);
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f.valid[i]) {
        CHECK(std::memcmp(&g.u[i], &f.u[i], 4) == 0);
        CHECK(std::memcmp(&g.v[i], &f.v[i], 4) == 0);
      }
  }
}

TEST_CASE("hand-built flo stream") {
  std::vector<std::uint8_t> b;
  lef(b, 202021.25f);
  le32(b, 2);  // width
  le32(b, 1);  // height
  lef(b, 1.5f);
  lef(b, -2.0f);
  lef(b, 1e10f);
  lef(b, 0.f);
  const auto f = read_flo(b);
  CHECK(f.w == 2);
  CHECK(f.h == 1);
  CHECK(f.u[0] == 1.5f);
  CHECK(f.v[0] == -2.0f);
  CHECK(f.valid[0] == 1);
  CHECK(f.valid[1] == 0);

  auto bad = b;
  bad[0] ^= 1;
  CHECK_THROWS_AS(read_flo(bad), FlowError);
  auto trunc = b;
  trunc.pop_back();
  CHECK_THROWS_AS(read_flo(trunc), FlowError);
  auto zero = b;
  zero[4] = 0;
  CHECK_THROWS_AS(read_flo(zero), FlowError);
  CHECK_THROWS_AS(read_flo(std::vector<std::uint8_t>(5)), FlowError);
  try {
    read_flo(trunc);
  } catch (const FlowError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
}

TEST_CASE("color wheel") {
  const auto& w = color_wheel();
  CHECK(w.size() == 55);
  CHECK(w[0] == std::array<int, 3>{255, 0, 0});
  CHECK(w[15] == std::array<int, 3>{255, 255, 0});
  CHECK(w[21] == std::array<int, 3>{0, 255, 0});

  FlowField zero(3, 3);
  for (auto c : flow_to_color(zero).rgb) CHECK(c == 255);

  // (m, 0) at maximum magnitude: atan2(-0.0, -1) = -pi, so fk = 0 and the
  // pixel is the first wheel entry at full saturation.
  FlowField right(1, 1, 2.f, 0.f);
  CHECK(flow_to_color(right).at(0, 0) == std::array<std::uint8_t, 3>{255, 0, 0});

  FlowField inv(1, 1, 1.f, 1.f);
  inv.valid[0] = 0;
  CHECK(flow_to_color(inv).at(0, 0) == std::array<std::uint8_t, 3>{0, 0, 0});
}

TEST_CASE("opposite vectors land on diametric wheel positions") {
  for (double deg = 5; deg < 360; deg += 23) {
    const double a = deg * M_PI / 180;
    const auto c1 = flow_color(static_cast<float>(0.5 * std::cos(a)), static_cast<float>(0.5 * std::sin(a)));
    const auto c2 = flow_color(static_cast<float>(-0.5 * std::cos(a)), static_cast<float>(-0.5 * std::sin(a)));
    CHECK(c1 != c2);
  }
  // The hue index of v and -v differs by half the wheel.
  auto fk = [](double x, double y) { return (std::atan2(-y, -x) / M_PI + 1) / 2 * 54; };
  CHECK(std::fabs(std::fabs(fk(0.3, 0.4) - fk(-0.3, -0.4)) - 27) < 1e-9);
}

TEST_CASE("ppm encode and decode") {
  RgbImage img;
  img.h = 2;
  img.w = 3;
  for (int i = 0; i < 18; ++i) img.rgb.push_back(static_cast<std::uint8_t>(i * 13));
  const auto s = encode_ppm(img);
  const auto back = decode_ppm(std::vector<std::uint8_t>(s.begin(), s.end()));
  CHECK(back.w == 3);
  CHECK(back.h == 2);
  CHECK(back.rgb == img.rgb);
  const std::string commented = "P6\n# x\n3 2\n255\n" + s.substr(s.size() - 18);
  CHECK(decode_ppm(std::vector<std::uint8_t>(commented.begin(), commented.end())).rgb == img.rgb);
  const std::string bad = "P3\n1 1\n255\n";
  CHECK_THROWS_AS(decode_ppm(std::vector<std::uint8_t>(bad.begin(), bad.end())), FlowError);
  const auto t = image_to_tensor(img);
  CHECK(t.shape() == Shape4{1, 2, 3, 3});
  CHECK(t(0, 1, 2, 2) == doctest::Approx(17 * 13 / 255.0));
}
