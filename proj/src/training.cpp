#include "ddcnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ddcnet/checkpoint.hpp"

namespace ddc {

void TrainConfig::check() const {
  if (batch_size < 1) throw TrainingError("batch_size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw TrainingError("lr must be finite and >= 0");
  if (!(l2 >= 0.0)) throw TrainingError("l2 must be >= 0");
  if (max_steps < 0) throw TrainingError("max_steps must be >= 0");
  if (lr_window < 1) throw TrainingError("lr_window must be >= 1");
  if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw TrainingError("lr_factor must lie in (0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw TrainingError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw TrainingError("epsilon must be > 0");
  if (checkpoint_every < 0 || eval_every < 0 || eval_samples < 0)
    throw TrainingError("checkpoint/eval intervals must be >= 0");
}

void TrainConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    try {
      if (k == "batch_size") batch_size = std::stoi(v);
      else if (k == "lr") lr = std::stod(v);
      else if (k == "l2") l2 = std::stod(v);
      else if (k == "seed") seed = std::stoull(v);
      else if (k == "max_steps") max_steps = std::stoi(v);
      else if (k == "lr_window") lr_window = std::stoi(v);
      else if (k == "lr_threshold") lr_threshold = std::stod(v);
      else if (k == "lr_factor") lr_factor = std::stod(v);
      else if (k == "beta1") beta1 = std::stod(v);
      else if (k == "beta2") beta2 = std::stod(v);
      else if (k == "epsilon") epsilon = std::stod(v);
      else if (k == "checkpoint_every") checkpoint_every = std::stoi(v);
      else if (k == "checkpoint_dir") checkpoint_dir = v;
      else if (k == "eval_every") eval_every = std::stoi(v);
      else if (k == "eval_samples") eval_samples = std::stoi(v);
      else if (k == "frozen_layers") {
        frozen_layers.clear();
        std::istringstream is(v);
        std::string item;
        while (std::getline(is, item, ','))
          if (!item.empty()) frozen_layers.insert(std::stoi(item));
      } else {
        throw TrainingError("unknown training key '" + k + "'");
      }
    } catch (const std::logic_error&) {
      throw TrainingError("bad value for '" + k + "': '" + v + "'");
    }
  }
}

AugmentConfig AugmentConfig::identity() {
  AugmentConfig c;
  c.rotation_deg = 0.0;
  c.scale_min = c.scale_max = 1.0;
  c.translation_px = 0.0;
  c.brightness = c.contrast = c.saturation = c.hue = 0.0;
  return c;
}

void AugmentConfig::check() const {
  for (double v : {rotation_deg, scale_min, scale_max, translation_px, brightness, contrast,
                   saturation, hue})
    if (!std::isfinite(v)) throw TrainingError("augmentation ranges must be finite");
  if (!(scale_min > 0.0) || scale_max < scale_min)
    throw TrainingError("augmentation scale range must be positive and ordered");
  if (rotation_deg < 0 || translation_px < 0 || brightness < 0 || contrast < 0 ||
      saturation < 0 || hue < 0)
    throw TrainingError("augmentation ranges must be nonnegative");
}

AdamState AdamState::zeros_like(const ParamStore<float>& params) {
  AdamState s;
  for (const auto& k : params.kernels) {
    s.m_w.emplace_back(k.weights.size(), 0.f);
    s.v_w.emplace_back(k.weights.size(), 0.f);
    s.m_b.emplace_back(k.bias.size(), 0.f);
    s.v_b.emplace_back(k.bias.size(), 0.f);
  }
  return s;
}

ParamStore<float> he_init(const NetworkSpec& net, Rng& rng) {
  auto ps = zero_params<float>(net);
  for (auto& k : ps.kernels) {
    const double fan_in = static_cast<double>(k.kh) * k.kw * k.c_in;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& w : k.weights) w = static_cast<float>(dist(rng));
  }
  return ps;
}

namespace {

void adam_update(std::vector<float>& theta, const std::vector<float>& grad,
                 std::vector<float>& m, std::vector<float>& v, const TrainConfig& c,
                 double lr, double bc1, double bc2) {
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + c.l2 * theta[i];
    const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    const double step = lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon);
    theta[i] = static_cast<float>(theta[i] - step);
  }
}

bool all_finite(const std::vector<float>& v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

void adam_step(ParamStore<float>& params, const ParamGradients<float>& grads,
               AdamState& state, const TrainConfig& config, double lr) {
  if (grads.kernels.size() != params.kernels.size() ||
      state.m_w.size() != params.kernels.size())
    throw ShapeError("adam_step: parameter, gradient and state layouts differ");
  for (std::size_t li = 0; li < params.kernels.size(); ++li) {
    if (grads.kernels[li].weights.size() != params.kernels[li].weights.size() ||
        grads.kernels[li].bias.size() != params.kernels[li].bias.size())
      throw ShapeError("adam_step: gradient shape mismatch at layer " + std::to_string(li + 1));
    if (config.frozen_layers.count(static_cast<int>(li) + 1)) continue;
    if (!all_finite(grads.kernels[li].weights) || !all_finite(grads.kernels[li].bias))
      throw TrainingError("non-finite gradient in layer " + std::to_string(li + 1));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t li = 0; li < params.kernels.size(); ++li) {
    if (config.frozen_layers.count(static_cast<int>(li) + 1)) continue;
    auto& k = params.kernels[li];
    adam_update(k.weights, grads.kernels[li].weights, state.m_w[li], state.v_w[li], config, lr,
                bc1, bc2);
    adam_update(k.bias, grads.kernels[li].bias, state.m_b[li], state.v_b[li], config, lr, bc1,
                bc2);
  }
}

template <typename T>
LossResult<T> aee_loss(const Tensor4<T>& est, const std::vector<FlowField>& gt) {
  if (est.c() != 2) throw ShapeError("flow estimate must have 2 channels");
  if (static_cast<int>(gt.size()) != est.n())
    throw ShapeError("ground-truth count does not match estimate batch");
  std::size_t valid = 0;
  for (const auto& g : gt) {
    g.check();
    if (g.h != est.h() || g.w != est.w())
      throw ShapeError("ground truth dims do not match the estimate");
    valid += g.valid_count();
  }
  if (valid == 0) throw FlowError("no valid pixels in the loss");
  LossResult<T> r;
  r.grad = Tensor4<T>(est.shape());
  const double inv = 1.0 / static_cast<double>(valid);
  double sum = 0.0;
  for (int b = 0; b < est.n(); ++b) {
    const auto& g = gt[b];
    for (int i = 0; i < est.h(); ++i)
      for (int j = 0; j < est.w(); ++j) {
        const auto idx = g.index(i, j);
        if (!g.valid[idx]) continue;
        const double du = static_cast<double>(est(b, i, j, 0)) - g.u[idx];
        const double dv = static_cast<double>(est(b, i, j, 1)) - g.v[idx];
        const double ee = std::sqrt(du * du + dv * dv);
        sum += ee;
        if (ee > 0.0) {
          r.grad(b, i, j, 0) = static_cast<T>(du / ee * inv);
          r.grad(b, i, j, 1) = static_cast<T>(dv / ee * inv);
        }
      }
  }
  r.loss = sum * inv;
  return r;
}

template LossResult<float> aee_loss(const Tensor4<float>&, const std::vector<FlowField>&);
template LossResult<double> aee_loss(const Tensor4<double>&, const std::vector<FlowField>&);

namespace {

double draw(Rng& rng, double lo, double hi) {
  if (!(hi > lo)) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int draw_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::vector<float> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[i + r] = static_cast<float>(v);
    s += v;
  }
  for (auto& v : k) v = static_cast<float>(v / s);
  return k;
}

}  // namespace

Tensor4<float> random_texture(Rng& rng, int h, int w, double sigma) {
  Tensor4<float> t(1, h, w, 3);
  std::uniform_real_distribution<float> u01(0.f, 1.f);
  for (auto& v : t.vec()) v = u01(rng);
  if (sigma > 0.0) {
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    Tensor4<float> tmp(t.shape());
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int c = 0; c < 3; ++c) {
          float s = 0.f;
          for (int q = -r; q <= r; ++q) s += k[q + r] * t(0, i, std::clamp(j + q, 0, w - 1), c);
          tmp(0, i, j, c) = s;
        }
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int c = 0; c < 3; ++c) {
          float s = 0.f;
          for (int p = -r; p <= r; ++p) s += k[p + r] * tmp(0, std::clamp(i + p, 0, h - 1), j, c);
          t(0, i, j, c) = s;
        }
  }
  for (int c = 0; c < 3; ++c) {
    float lo = 1e30f, hi = -1e30f;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        lo = std::min(lo, t(0, i, j, c));
        hi = std::max(hi, t(0, i, j, c));
      }
    const float span = hi > lo ? hi - lo : 1.f;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) t(0, i, j, c) = (t(0, i, j, c) - lo) / span;
  }
  return t;
}

Sample synth_pair(Rng& rng, const SynthOptions& opts) {
  const int n = opts.size;
  if (n < 4) throw DomainError("synthetic frame size must be >= 4");
  if (opts.max_disp < 0 || 4 * opts.max_disp >= n)
    throw DomainError("max_disp must satisfy 0 <= max_disp < size / 4");
  Sample s;
  s.frame1 = random_texture(rng, n, n, opts.texture_sigma);
  s.frame2 = Tensor4<float>(1, n, n, 3);
  s.gt = FlowField(n, n);
  const int md = opts.max_disp;
  const int ub = draw_int(rng, -md, md), vb = draw_int(rng, -md, md);
  const bool two = opts.two_region_prob > 0.0 && draw(rng, 0.0, 1.0) < opts.two_region_prob;

  std::vector<std::uint8_t> fg(static_cast<std::size_t>(n) * n, 0);
  int uf = ub, vf = vb;
  if (two) {
    uf = draw_int(rng, -md, md);
    vf = draw_int(rng, -md, md);
    const int bh = draw_int(rng, n / 4, n / 2), bw = draw_int(rng, n / 4, n / 2);
    const int i0 = draw_int(rng, 0, n - bh), j0 = draw_int(rng, 0, n - bw);
    for (int i = i0; i < i0 + bh; ++i)
      for (int j = j0; j < j0 + bw; ++j) fg[static_cast<std::size_t>(i) * n + j] = 1;
  }
  auto inside = [n](int i, int j) { return i >= 0 && i < n && j >= 0 && j < n; };

  // Background, then the foreground pasted over it at its own displacement.
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int si = i - vb, sj = j - ub;
      if (!inside(si, sj)) continue;
      std::copy_n(s.frame1.pixel(0, si, sj), 3, s.frame2.pixel(0, i, j));
    }
  std::vector<std::uint8_t> covered(static_cast<std::size_t>(n) * n, 0);
  if (two) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (!fg[static_cast<std::size_t>(i) * n + j]) continue;
        const int di = i + vf, dj = j + uf;
        if (!inside(di, dj)) continue;
        std::copy_n(s.frame1.pixel(0, i, j), 3, s.frame2.pixel(0, di, dj));
        covered[static_cast<std::size_t>(di) * n + dj] = 1;
      }
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const auto idx = s.gt.index(i, j);
      const bool is_fg = fg[idx] != 0;
      const int u = is_fg ? uf : ub, v = is_fg ? vf : vb;
      s.gt.u[idx] = static_cast<float>(u);
      s.gt.v[idx] = static_cast<float>(v);
      const int di = i + v, dj = j + u;
      bool ok = inside(di, dj);
      if (ok && !is_fg && covered[static_cast<std::size_t>(di) * n + dj]) ok = false;
      s.gt.valid[idx] = ok ? 1 : 0;
    }
  return s;
}

namespace {

// Bilinear sample of channel data at (y, x); taps with zero weight are
// ignored so integer coordinates reproduce the source exactly.
bool bilinear(const Tensor4<float>& t, double y, double x, float* out) {
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  const int c = t.c();
  for (int k = 0; k < c; ++k) out[k] = 0.f;
  bool any = false;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double wgt = (a ? fy : 1.0 - fy) * (b ? fx : 1.0 - fx);
      if (wgt == 0.0) continue;
      const int yy = y0 + a, xx = x0 + b;
      if (yy < 0 || yy >= t.h() || xx < 0 || xx >= t.w()) continue;
      any = true;
      const float* p = t.pixel(0, yy, xx);
      for (int k = 0; k < c; ++k) out[k] += static_cast<float>(wgt * p[k]);
    }
  return any;
}

bool bilinear_flow(const FlowField& f, double y, double x, float& u, float& v) {
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  double su = 0.0, sv = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double wgt = (a ? fy : 1.0 - fy) * (b ? fx : 1.0 - fx);
      if (wgt == 0.0) continue;
      const int yy = y0 + a, xx = x0 + b;
      if (yy < 0 || yy >= f.h || xx < 0 || xx >= f.w) return false;
      const auto idx = f.index(yy, xx);
      if (!f.valid[idx]) return false;
      su += wgt * f.u[idx];
      sv += wgt * f.v[idx];
    }
  u = static_cast<float>(su);
  v = static_cast<float>(sv);
  return true;
}

void photometric(Tensor4<float>& t, double bright, double contrast, double sat, double hue,
                 double mean_luma) {
  const double ang = 2.0 * std::numbers::pi * hue;
  const double ch = std::cos(ang), sh = std::sin(ang);
  for (int i = 0; i < t.h(); ++i)
    for (int j = 0; j < t.w(); ++j) {
      float* p = t.pixel(0, i, j);
      const double r = p[0], g = p[1], b = p[2];
      const double Y = 0.299 * r + 0.587 * g + 0.114 * b;
      double I = 0.596 * r - 0.274 * g - 0.322 * b;
      double Q = 0.211 * r - 0.523 * g + 0.312 * b;
      const double I2 = sat * (ch * I - sh * Q);
      const double Q2 = sat * (sh * I + ch * Q);
      I = I2;
      Q = Q2;
      double rgb[3] = {Y + 0.956 * I + 0.621 * Q, Y - 0.272 * I - 0.647 * Q,
                       Y - 1.106 * I + 1.703 * Q};
      for (int k = 0; k < 3; ++k) {
        double v = (rgb[k] - mean_luma) * contrast + mean_luma + bright;
        p[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

}  // namespace

Sample apply_affine(const Sample& s, double angle_deg, double scale, double tx, double ty) {
  if (!(scale > 0.0)) throw DomainError("scale must be > 0");
  const int h = s.frame1.h(), w = s.frame1.w();
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), sn = std::sin(a);
  // A = scale * [[c, -sn], [sn, c]] acting on (x, y).
  const double a00 = scale * c, a01 = -scale * sn, a10 = scale * sn, a11 = scale * c;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  Sample out;
  out.frame1 = Tensor4<float>(1, h, w, s.frame1.c());
  out.frame2 = Tensor4<float>(1, h, w, s.frame2.c());
  out.gt = FlowField(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double dx = j - cx - tx, dy = i - cy - ty;
      // A^-1 = (1/scale) R(-a)
      const double sx = (c * dx + sn * dy) / scale + cx;
      const double sy = (-sn * dx + c * dy) / scale + cy;
      bilinear(s.frame1, sy, sx, out.frame1.pixel(0, i, j));
      bilinear(s.frame2, sy, sx, out.frame2.pixel(0, i, j));
      float u = 0.f, v = 0.f;
      const auto idx = out.gt.index(i, j);
      if (bilinear_flow(s.gt, sy, sx, u, v)) {
        out.gt.u[idx] = static_cast<float>(a00 * u + a01 * v);
        out.gt.v[idx] = static_cast<float>(a10 * u + a11 * v);
        out.gt.valid[idx] = 1;
      } else {
        out.gt.u[idx] = out.gt.v[idx] = 0.f;
        out.gt.valid[idx] = 0;
      }
    }
  return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  cfg.check();
  Sample out = s;
  if (cfg.geometric) {
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double ang = draw(rng, -cfg.rotation_deg, cfg.rotation_deg);
      const double sc = draw(rng, cfg.scale_min, cfg.scale_max);
      const double tx = draw(rng, -cfg.translation_px, cfg.translation_px);
      const double ty = draw(rng, -cfg.translation_px, cfg.translation_px);
      if (ang == 0.0 && sc == 1.0 && tx == 0.0 && ty == 0.0) break;
      auto cand = apply_affine(s, ang, sc, tx, ty);
      if (cand.gt.valid_count() > 0) {
        out = std::move(cand);
        break;
      }
    }
  }
  if (cfg.photometric) {
    const double b = draw(rng, -cfg.brightness, cfg.brightness);
    const double ct = 1.0 + draw(rng, -cfg.contrast, cfg.contrast);
    const double st = 1.0 + draw(rng, -cfg.saturation, cfg.saturation);
    const double hu = draw(rng, -cfg.hue, cfg.hue);
    if (b != 0.0 || ct != 1.0 || st != 1.0 || hu != 0.0) {
      double mean = 0.0;
      const auto& f1 = out.frame1;
      for (int i = 0; i < f1.h(); ++i)
        for (int j = 0; j < f1.w(); ++j) {
          const float* p = f1.pixel(0, i, j);
          mean += 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
      mean /= static_cast<double>(f1.h()) * f1.w();
      photometric(out.frame1, b, ct, st, hu, mean);
      photometric(out.frame2, b, ct, st, hu, mean);
    }
  }
  return out;
}

DatasetSource::DatasetSource(std::vector<Sample> samples) : samples_(std::move(samples)) {
  if (samples_.empty()) throw TrainingError("dataset is empty");
  order_.resize(samples_.size());
  std::iota(order_.begin(), order_.end(), 0);
  pos_ = order_.size();
}

Sample DatasetSource::next(Rng& rng) {
  if (pos_ >= order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }
  return samples_[order_[pos_++]];
}

std::string history_csv(const std::vector<HistoryEntry>& h) {
  std::string out = "step,loss,lr,eval_aee\n";
  char buf[128];
  for (const auto& e : h) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,", e.step, e.loss, e.lr);
    out += buf;
    if (e.eval_aee) {
      std::snprintf(buf, sizeof buf, "%.9g", *e.eval_aee);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::pair<Tensor4<float>, Tensor4<float>> stack_frames(const std::vector<Sample>& batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  const Shape4 s = batch.front().frame1.shape();
  Tensor4<float> f1(static_cast<int>(batch.size()), s.h, s.w, s.c);
  Tensor4<float> f2(f1.shape());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].frame1.shape() != s || batch[b].frame2.shape() != s)
      throw ShapeError("batch samples differ in shape");
    std::copy(batch[b].frame1.vec().begin(), batch[b].frame1.vec().end(),
              f1.vec().begin() + b * s.size());
    std::copy(batch[b].frame2.vec().begin(), batch[b].frame2.vec().end(),
              f2.vec().begin() + b * s.size());
  }
  return {std::move(f1), std::move(f2)};
}

double evaluate_aee(const NetworkSpec& net, const ParamStore<float>& params,
                    const std::vector<Sample>& eval_set) {
  if (eval_set.empty()) throw TrainingError("evaluation set is empty");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : eval_set) {
    auto fwd = forward(net, params, s.frame1, s.frame2);
    const auto est = flow_from_tensor(fwd.flow, 0);
    const auto m = endpoint_error_map(est, s.gt);
    for (std::size_t i = 0; i < m.ee.size(); ++i)
      if (m.valid[i]) {
        sum += m.ee[i];
        ++n;
      }
  }
  if (n == 0) throw TrainingError("evaluation set has no valid pixels");
  return sum / static_cast<double>(n);
}

TrainResult train(const NetworkSpec& net, const TrainConfig& config,
                  const std::optional<AugmentConfig>& aug, DataSource& data,
                  const std::vector<Sample>& eval_set, std::optional<ParamStore<float>> init) {
  config.check();
  if (aug) aug->check();
  net.validate();
  Rng rng(config.seed);
  TrainResult res;
  res.params = init ? std::move(*init) : he_init(net, rng);
  auto state = AdamState::zeros_like(res.params);
  double lr = config.lr;

  auto checkpoint = [&](const std::string& tag) {
    if (config.checkpoint_dir.empty()) return;
    const auto path =
        (std::filesystem::path(config.checkpoint_dir) / ("ckpt_" + tag + ".ddcp")).string();
    save_checkpoint(path, res.params);
  };

  double window_sum = 0.0, prev_window_mean = -1.0;
  int window_count = 0;
  for (int step = 1; step <= config.max_steps; ++step) {
    std::vector<Sample> batch;
    std::vector<FlowField> gts;
    for (int b = 0; b < config.batch_size; ++b) {
      Sample s = data.next(rng);
      if (aug) s = augment(s, *aug, rng);
      gts.push_back(s.gt);
      batch.push_back(std::move(s));
    }
    auto [f1, f2] = stack_frames(batch);
    auto fwd = forward(net, res.params, f1, f2, CacheMode::full);
    auto loss = aee_loss(fwd.flow, gts);
    if (!std::isfinite(loss.loss)) {
      checkpoint("abort_step" + std::to_string(step));
      throw TrainingError("non-finite loss at step " + std::to_string(step));
    }
    auto grads = backward(net, res.params, fwd.cache, loss.grad);
    adam_step(res.params, grads.params, state, config, lr);

    HistoryEntry e{step, loss.loss, lr, std::nullopt};
    if (config.eval_every > 0 && !eval_set.empty() &&
        (step % config.eval_every == 0 || step == config.max_steps))
      e.eval_aee = evaluate_aee(net, res.params, eval_set);
    res.history.push_back(e);

    window_sum += loss.loss;
    if (++window_count == config.lr_window) {
      const double mean = window_sum / window_count;
      if (prev_window_mean > 0.0 &&
          (prev_window_mean - mean) / prev_window_mean < config.lr_threshold)
        lr *= config.lr_factor;
      prev_window_mean = mean;
      window_sum = 0.0;
      window_count = 0;
    }
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0)
      checkpoint("step" + std::to_string(step));
  }
  if (!eval_set.empty()) res.final_eval_aee = evaluate_aee(net, res.params, eval_set);
  return res;
}

}  // namespace ddc
