#include "ddcnet/erf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ddc {

std::string ErfStats::record() const {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "fwhm_row=%.6f fwhm_col=%.6f peak=%.9g gridding_score=%.6f", fwhm_row,
                fwhm_col, peak, gridding_score);
  return buf;
}

ErfStats ErfStats::parse_record(const std::string& line) {
  ErfStats s;
  std::istringstream is(line);
  std::string tok;
  int seen = 0;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ErfError("bad ErfStats token '" + tok + "'");
    const std::string key = tok.substr(0, eq);
    const double v = std::stod(tok.substr(eq + 1));
    if (key == "fwhm_row") s.fwhm_row = v;
    else if (key == "fwhm_col") s.fwhm_col = v;
    else if (key == "peak") s.peak = v;
    else if (key == "gridding_score") s.gridding_score = v;
    else throw ErfError("unknown ErfStats key '" + key + "'");
    ++seen;
  }
  if (seen != 4) throw ErfError("ErfStats record needs 4 fields");
  return s;
}

template <typename T>
ParamStore<T> constant_init(const NetworkSpec& net, double value) {
  if (!(value > 0.0))
    throw DomainError("constant init value must be > 0 (a non-positive constant "
                      "zeroes the ERF through ReLU)");
  auto ps = zero_params<T>(net);
  for (auto& k : ps.kernels) std::fill(k.weights.begin(), k.weights.end(), static_cast<T>(value));
  return ps;
}

template <typename T>
ParamStore<T> constant_init_fan_in(const NetworkSpec& net) {
  auto ps = zero_params<T>(net);
  for (auto& k : ps.kernels) {
    const double v = 1.0 / (static_cast<double>(k.kh) * k.kw * k.c_in);
    std::fill(k.weights.begin(), k.weights.end(), static_cast<T>(v));
  }
  return ps;
}

template <typename T>
ErfMap compute_erf(const NetworkSpec& net, const ParamStore<T>& params, int h, int w,
                   const std::optional<std::pair<Tensor4<T>, Tensor4<T>>>& probe,
                   const ErfOptions& opts) {
  if (opts.output_channel < 0 || opts.output_channel >= net.output_channels())
    throw DomainError("output channel out of range");
  if (opts.input_channel >= net.frame_channels)
    throw DomainError("input channel out of range");

  Tensor4<T> f1, f2;
  if (probe) {
    f1 = probe->first;
    f2 = probe->second;
    h = f1.h();
    w = f1.w();
  } else {
    f1 = Tensor4<T>(1, h, w, net.frame_channels, T(1));
    f2 = f1;
  }
  auto fwd = forward(net, params, f1, f2, CacheMode::masks);

  ErfMap erf;
  erf.h = h;
  erf.w = w;
  erf.center_i = h / 2;
  erf.center_j = w / 2;
  erf.output_channel = opts.output_channel;

  // Batch items are independent, so one seed per item yields per-item gradients.
  Tensor4<T> seed(fwd.flow.shape());
  for (int b = 0; b < seed.n(); ++b) seed(b, erf.center_i, erf.center_j, opts.output_channel) = T(1);
  auto grads = backward(net, params, fwd.cache, seed, /*want_params=*/false);

  erf.grid.assign(static_cast<std::size_t>(h) * w, 0.0);
  const int nb = grads.frame1.n();
  for (int b = 0; b < nb; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const T* g = grads.frame1.pixel(b, i, j);
        double s = 0.0;
        if (opts.input_channel >= 0) {
          s = std::abs(static_cast<double>(g[opts.input_channel]));
        } else {
          for (int c = 0; c < net.frame_channels; ++c) s += std::abs(static_cast<double>(g[c]));
        }
        erf.grid[static_cast<std::size_t>(i) * w + j] += s;
      }
  if (nb > 1)
    for (auto& v : erf.grid) v /= nb;

  const double peak = *std::max_element(erf.grid.begin(), erf.grid.end());
  erf.raw_peak = peak;
  if (peak > 0.0) {
    for (auto& v : erf.grid) v /= peak;
  } else {
    erf.degenerate = true;
  }
  return erf;
}

double profile_fwhm(const std::vector<double>& row) {
  if (row.empty()) throw ErfError("empty profile");
  const double peak = *std::max_element(row.begin(), row.end());
  if (!(peak > 0.0)) throw ErfError("profile peak must be > 0");
  const double half = 0.5 * peak;
  const int n = static_cast<int>(row.size());
  int lo = 0;
  while (lo < n && row[lo] < half) ++lo;
  int hi = n - 1;
  while (hi >= 0 && row[hi] < half) --hi;
  if (lo == 0 || hi == n - 1)
    throw ErfError("ERF stays above half maximum at the probe border; use a larger input size");
  const double xl = (lo - 1) + (half - row[lo - 1]) / (row[lo] - row[lo - 1]);
  const double xr = hi + (row[hi] - half) / (row[hi] - row[hi + 1]);
  return xr - xl;
}

double gridding_score(const ErfMap& erf, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw DomainError("eps must lie in (0, 1)");
  const double peak = *std::max_element(erf.grid.begin(), erf.grid.end());
  if (!(peak > 0.0)) throw ErfError("ERF is empty; no half-max region");
  int r0 = erf.h, r1 = -1, c0 = erf.w, c1 = -1;
  for (int i = 0; i < erf.h; ++i)
    for (int j = 0; j < erf.w; ++j)
      if (erf.at(i, j) >= 0.5 * peak) {
        r0 = std::min(r0, i);
        r1 = std::max(r1, i);
        c0 = std::min(c0, j);
        c1 = std::max(c1, j);
      }
  if (r1 < 0) throw ErfError("empty half-max bounding box");
  std::size_t holes = 0, cells = 0;
  for (int i = r0; i <= r1; ++i)
    for (int j = c0; j <= c1; ++j) {
      ++cells;
      holes += erf.at(i, j) < eps * peak;
    }
  return static_cast<double>(holes) / static_cast<double>(cells);
}

ErfStats measure_fwhm(const ErfMap& erf) {
  if (erf.degenerate) throw ErfError("ERF is degenerate (all-zero gradient)");
  std::vector<double> row(erf.w), col(erf.h);
  for (int j = 0; j < erf.w; ++j) row[j] = erf.at(erf.center_i, j);
  for (int i = 0; i < erf.h; ++i) col[i] = erf.at(i, erf.center_j);
  ErfStats s;
  s.fwhm_row = profile_fwhm(row);
  s.fwhm_col = profile_fwhm(col);
  s.peak = erf.raw_peak;
  s.gridding_score = gridding_score(erf, 1e-3);
  return s;
}

std::size_t SupportMap::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1));
}

int SupportMap::bbox_width() const {
  int lo = w, hi = -1;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (at(i, j)) {
        lo = std::min(lo, j);
        hi = std::max(hi, j);
      }
  return hi < 0 ? 0 : hi - lo + 1;
}

int SupportMap::bbox_height() const {
  int lo = h, hi = -1;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      if (at(i, j)) {
        lo = std::min(lo, i);
        hi = std::max(hi, i);
      }
  return hi < 0 ? 0 : hi - lo + 1;
}

SupportMap support_oracle(const NetworkSpec& net, int h, int w) {
  net.validate();
  // Spatial dims entering each layer.
  std::vector<std::pair<int, int>> dims;
  int ch = h, cw = w;
  for (const auto& l : net.layers) {
    dims.emplace_back(ch, cw);
    if (l.kind == LayerKind::conv) {
      ch = strided_extent(ch, l.sy);
      cw = strided_extent(cw, l.sx);
    } else if (l.kind == LayerKind::upsample) {
      ch *= l.factor;
      cw *= l.factor;
    }
  }
  std::vector<std::uint8_t> cur(static_cast<std::size_t>(ch) * cw, 0);
  cur[static_cast<std::size_t>(h / 2) * cw + w / 2] = 1;
  for (std::size_t ii = net.layers.size(); ii-- > 0;) {
    const auto& l = net.layers[ii];
    const auto [ih, iw] = dims[ii];
    if (l.kind == LayerKind::concat) continue;
    std::vector<std::uint8_t> prev(static_cast<std::size_t>(ih) * iw, 0);
    for (int i = 0; i < ch; ++i)
      for (int j = 0; j < cw; ++j) {
        if (!cur[static_cast<std::size_t>(i) * cw + j]) continue;
        if (l.kind == LayerKind::upsample) {
          prev[static_cast<std::size_t>(i / l.factor) * iw + j / l.factor] = 1;
          continue;
        }
        for (int p = 0; p < l.kh; ++p) {
          const int y = i * l.sy + (p - l.kh / 2) * l.dy;
          if (y < 0 || y >= ih) continue;
          for (int q = 0; q < l.kw; ++q) {
            const int x = j * l.sx + (q - l.kw / 2) * l.dx;
            if (x < 0 || x >= iw) continue;
            prev[static_cast<std::size_t>(y) * iw + x] = 1;
          }
        }
      }
    cur = std::move(prev);
    ch = ih;
    cw = iw;
  }
  SupportMap m;
  m.h = h;
  m.w = w;
  m.cells = std::move(cur);
  return m;
}

int probe_size_for(const NetworkSpec& net, int margin) {
  const auto rf = theoretical_rf(net);
  const int div = net.required_divisor();
  int n = static_cast<int>(rf) + margin;
  if (div == 1) return n % 2 == 1 ? n : n + 1;
  return ((n + div - 1) / div) * div;
}

std::string encode_pgm16(const ErfMap& erf) {
  std::string out = "P5\n" + std::to_string(erf.w) + " " + std::to_string(erf.h) + "\n65535\n";
  out.reserve(out.size() + 2 * erf.grid.size());
  for (double v : erf.grid) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    out.push_back(static_cast<char>((q >> 8) & 0xff));  // PGM samples are big-endian
    out.push_back(static_cast<char>(q & 0xff));
  }
  return out;
}

std::string encode_erf_csv(const ErfMap& erf) {
  std::string out;
  char buf[32];
  for (int i = 0; i < erf.h; ++i) {
    for (int j = 0; j < erf.w; ++j) {
      std::snprintf(buf, sizeof buf, j ? ",%.9g" : "%.9g", erf.at(i, j));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::string encode_central_row_csv(const ErfMap& erf) {
  std::string out = "offset,value\n";
  char buf[64];
  for (int j = 0; j < erf.w; ++j) {
    std::snprintf(buf, sizeof buf, "%d,%.9g\n", j - erf.center_j, erf.at(erf.center_i, j));
    out += buf;
  }
  return out;
}

#define DDC_INSTANTIATE_ERF(T)                                                        \
  template ParamStore<T> constant_init<T>(const NetworkSpec&, double);                \
  template ParamStore<T> constant_init_fan_in<T>(const NetworkSpec&);                 \
  template ErfMap compute_erf(const NetworkSpec&, const ParamStore<T>&, int, int,     \
                              const std::optional<std::pair<Tensor4<T>, Tensor4<T>>>&, \
                              const ErfOptions&);

DDC_INSTANTIATE_ERF(float)
DDC_INSTANTIATE_ERF(double)

}  // namespace ddc
