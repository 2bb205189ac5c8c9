#include "ddcnet/network.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace ddc {

LayerSpec LayerSpec::conv(int filters, int kernel, int dilation, int stride,
                          Activation act) {
  LayerSpec l;
  l.kind = LayerKind::conv;
  l.filters = filters;
  l.kh = l.kw = kernel;
  l.dy = l.dx = dilation;
  l.sy = l.sx = stride;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::upsample(int factor) {
  LayerSpec l;
  l.kind = LayerKind::upsample;
  l.factor = factor;
  return l;
}

LayerSpec LayerSpec::concat() {
  LayerSpec l;
  l.kind = LayerKind::concat;
  return l;
}

std::size_t NetworkSpec::concat_index() const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::concat) return i;
  throw ShapeError("network has no concat entry");
}

std::vector<const LayerSpec*> NetworkSpec::conv_layers() const {
  std::vector<const LayerSpec*> out;
  for (const auto& l : layers)
    if (l.kind == LayerKind::conv) out.push_back(&l);
  return out;
}

int NetworkSpec::conv_count() const {
  return static_cast<int>(conv_layers().size());
}

std::vector<int> NetworkSpec::conv_input_channels() const {
  std::vector<int> out;
  int c = frame_channels;
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::conv:
        out.push_back(c);
        c = l.filters;
        break;
      case LayerKind::concat:
        c *= 2;
        break;
      case LayerKind::upsample:
        break;
    }
  }
  return out;
}

int NetworkSpec::required_divisor() const {
  int d = 1;
  for (const auto& l : layers)
    if (l.kind == LayerKind::conv) d *= l.sy;  // square strides only
  return d;
}

int NetworkSpec::output_channels() const {
  int c = frame_channels;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::conv) c = l.filters;
    if (l.kind == LayerKind::concat) c *= 2;
  }
  return c;
}

void NetworkSpec::validate() const {
  if (frame_channels < 1) throw ShapeError("frame_channels must be >= 1");
  int concats = 0;
  for (const auto& l : layers) concats += l.kind == LayerKind::concat;
  if (concats != 1)
    throw ShapeError("network must contain exactly one concat entry, found " +
                     std::to_string(concats));
  const std::size_t ci = concat_index();

  int last_conv = -1;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::conv) last_conv = static_cast<int>(i);
  if (last_conv < static_cast<int>(ci))
    throw ShapeError("network needs at least one conv layer after concat");

  int expected_id = 1;
  int jump = 1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i + 1) + ": ";
    if (l.kind == LayerKind::conv) {
      if (l.id != expected_id)
        throw ShapeError(where + "conv ids must be consecutive from 1");
      ++expected_id;
      if (l.filters < 1) throw ShapeError(where + "filters must be >= 1");
      if (l.kh < 1 || l.kw < 1 || l.kh % 2 == 0 || l.kw % 2 == 0)
        throw ShapeError(where + "kernel sizes must be odd");
      if (l.dy < 1 || l.dx < 1) throw ShapeError(where + "dilation must be >= 1");
      if (l.sy < 1 || l.sx < 1) throw ShapeError(where + "stride must be >= 1");
      if (l.sy != l.sx) throw ShapeError(where + "only square strides are supported");
      const bool in_branch = i < ci;
      if (in_branch && l.share_group.empty())
        throw ShapeError(where + "branch layers must carry a share group");
      if (!in_branch && !l.share_group.empty())
        throw ShapeError(where + "share groups are only valid before concat");
      const bool is_head = static_cast<int>(i) == last_conv;
      if (l.activation == Activation::linear && !is_head)
        throw ShapeError(where + "linear activation is only allowed on the output head");
      if (is_head && (l.filters != 2 || l.activation != Activation::linear))
        throw ShapeError(where + "output head must be a 2-filter linear conv");
      jump *= l.sy;
    } else if (l.kind == LayerKind::upsample) {
      if (l.factor < 1) throw ShapeError(where + "upsample factor must be >= 1");
      if (i < ci) throw ShapeError(where + "upsample is not allowed in the branch");
      if (jump % l.factor != 0)
        throw ShapeError(where + "upsample exceeds accumulated downsampling");
      jump /= l.factor;
    }
    if (static_cast<int>(i) > last_conv && l.kind == LayerKind::conv)
      throw ShapeError(where + "no conv may follow the output head");
  }
  if (jump != 1)
    throw ShapeError("network output resolution differs from input by factor " +
                     std::to_string(jump));
}

namespace {

void renumber(NetworkSpec& net) {
  int id = 1;
  for (auto& l : net.layers)
    if (l.kind == LayerKind::conv) l.id = id++;
    else l.id = 0;
}

}  // namespace

NetworkSpec build_ddcnet_b0() {
  NetworkSpec net;
  net.name = "ddcnet-b0";
  net.layers.push_back(LayerSpec::concat());
  for (int d = 1; d <= 25; ++d) net.layers.push_back(LayerSpec::conv(64, 3, d));
  for (int d : {12, 6, 3, 1}) net.layers.push_back(LayerSpec::conv(64, 3, d));
  net.layers.push_back(LayerSpec::conv(2, 1, 1, 1, Activation::linear));
  renumber(net);
  return net;
}

NetworkSpec build_ddcnet_b1() {
  NetworkSpec net;
  net.name = "ddcnet-b1";
  // Spatial feature extractor, shared between the frames.
  for (int d : {1, 2, 3}) {
    auto l = LayerSpec::conv(64, 3, d);
    l.share_group = "spatial";
    net.layers.push_back(l);
  }
  net.layers.push_back(LayerSpec::concat());
  // Flow feature extractor: 15 layers at 128 filters, 4:1 downsampling.
  for (int i = 0; i < 15; ++i) {
    const int d = i == 0 ? 1 : 2 * i;
    net.layers.push_back(LayerSpec::conv(128, 3, d, i < 2 ? 2 : 1));
  }
  net.layers.push_back(LayerSpec::upsample(2));
  // Feature refiner at half resolution.
  for (int d = 1; d <= 10; ++d) net.layers.push_back(LayerSpec::conv(64, 3, d));
  // Final estimator.
  net.layers.push_back(LayerSpec::conv(2, 1, 1, 1, Activation::linear));
  net.layers.push_back(LayerSpec::upsample(2));
  renumber(net);
  return net;
}

NetworkSpec build_dilation_schedule(const std::vector<int>& dilations, int filters,
                                    int frame_channels) {
  if (dilations.empty()) throw DomainError("dilation schedule must be non-empty");
  NetworkSpec net;
  net.frame_channels = frame_channels;
  net.layers.push_back(LayerSpec::concat());
  std::string name = "schedule";
  for (int d : dilations) {
    net.layers.push_back(LayerSpec::conv(filters, 3, d));
    name += (name.size() == 8 ? ":" : ",") + std::to_string(d);
  }
  net.layers.push_back(LayerSpec::conv(2, 1, 1, 1, Activation::linear));
  net.name = name;
  renumber(net);
  net.validate();
  return net;
}

NetworkSpec build_linear_schedule(int depth, int dilation_step, int filters,
                                  int frame_channels) {
  if (depth < 1) throw DomainError("depth must be >= 1");
  if (dilation_step < 0) throw DomainError("dilation step must be >= 0");
  std::vector<int> d;
  for (int l = 1; l <= depth; ++l) d.push_back(1 + (l - 1) * dilation_step);
  auto net = build_dilation_schedule(d, filters, frame_channels);
  net.name = "linear:" + std::to_string(depth) + ":" + std::to_string(dilation_step);
  return net;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

int to_int(const std::string& s, const std::string& what, int line = 0) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    throw ParseError("invalid integer for " + what + ": '" + s + "'", line);
  }
  if (pos != s.size()) throw ParseError("invalid integer for " + what + ": '" + s + "'", line);
  return v;
}

}  // namespace

NetworkSpec resolve_network(const std::string& name) {
  if (name == "b0") return build_ddcnet_b0();
  if (name == "b1") return build_ddcnet_b1();
  auto parts = split(name, ':');
  if (!parts.empty() && parts[0] == "linear") {
    if (parts.size() < 3 || parts.size() > 4)
      throw ParseError("expected linear:L:step[:filters], got '" + name + "'", 0);
    const int L = to_int(parts[1], "depth");
    const int step = to_int(parts[2], "step");
    const int f = parts.size() == 4 ? to_int(parts[3], "filters") : 64;
    return build_linear_schedule(L, step, f);
  }
  if (!parts.empty() && parts[0] == "dilations") {
    if (parts.size() < 2 || parts.size() > 3)
      throw ParseError("expected dilations:d1,d2,...[:filters], got '" + name + "'", 0);
    std::vector<int> d;
    for (const auto& s : split(parts[1], ',')) d.push_back(to_int(s, "dilation"));
    const int f = parts.size() == 3 ? to_int(parts[2], "filters") : 64;
    return build_dilation_schedule(d, f);
  }
  return load_spec_file(name);
}

std::int64_t param_count(const NetworkSpec& net) {
  const auto cin = net.conv_input_channels();
  std::int64_t total = 0;
  std::size_t k = 0;
  for (const auto* l : net.conv_layers()) {
    total += static_cast<std::int64_t>(l->kh) * l->kw * cin[k++] * l->filters + l->filters;
  }
  return total;
}

std::int64_t theoretical_rf(const NetworkSpec& net) {
  std::int64_t r = 1, jump = 1;
  for (const auto& l : net.layers) {
    if (l.kind == LayerKind::conv) {
      r += static_cast<std::int64_t>(l.kh - 1) * l.dy * jump;
      jump *= l.sy;
    } else if (l.kind == LayerKind::upsample) {
      jump /= l.factor;
    }
  }
  return r;
}

std::string format_spec(const NetworkSpec& net) {
  std::ostringstream os;
  os << "net name=" << (net.name.empty() ? "custom" : net.name)
     << " frame_channels=" << net.frame_channels << "\n";
  for (const auto& l : net.layers) {
    switch (l.kind) {
      case LayerKind::conv:
        os << "conv k=" << l.kh << " f=" << l.filters << " d=" << l.dy
           << " s=" << l.sy << " act=" << (l.activation == Activation::relu ? "relu" : "linear");
        if (!l.share_group.empty()) os << " share=" << l.share_group;
        os << "\n";
        break;
      case LayerKind::concat:
        os << "concat\n";
        break;
      case LayerKind::upsample:
        os << "upsample factor=" << l.factor << "\n";
        break;
    }
  }
  return os.str();
}

NetworkSpec parse_spec(const std::string& text) {
  NetworkSpec net;
  net.name = "custom";
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  bool seen_layer = false;
  while (std::getline(is, raw)) {
    ++lineno;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
    std::istringstream ls(raw);
    std::string kw;
    if (!(ls >> kw)) continue;
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ls >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0)
        throw ParseError("expected key=value, got '" + tok + "'", lineno);
      if (!kv.emplace(tok.substr(0, eq), tok.substr(eq + 1)).second)
        throw ParseError("duplicate key '" + tok.substr(0, eq) + "'", lineno);
    }
    auto take = [&](const std::string& key) -> std::optional<std::string> {
      auto it = kv.find(key);
      if (it == kv.end()) return std::nullopt;
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    if (kw == "net") {
      if (seen_layer) throw ParseError("'net' header must precede layers", lineno);
      if (auto v = take("name")) net.name = *v;
      if (auto v = take("frame_channels")) net.frame_channels = to_int(*v, "frame_channels", lineno);
    } else if (kw == "conv") {
      seen_layer = true;
      LayerSpec l;
      l.kind = LayerKind::conv;
      auto k = take("k");
      auto f = take("f");
      if (!k || !f) throw ParseError("conv requires k= and f=", lineno);
      l.kh = l.kw = to_int(*k, "k", lineno);
      l.filters = to_int(*f, "f", lineno);
      if (auto v = take("d")) l.dy = l.dx = to_int(*v, "d", lineno);
      if (auto v = take("s")) l.sy = l.sx = to_int(*v, "s", lineno);
      if (auto v = take("act")) {
        if (*v == "relu") l.activation = Activation::relu;
        else if (*v == "linear") l.activation = Activation::linear;
        else throw ParseError("unknown activation '" + *v + "'", lineno);
      }
      if (auto v = take("share")) l.share_group = *v;
      net.layers.push_back(l);
    } else if (kw == "concat") {
      seen_layer = true;
      net.layers.push_back(LayerSpec::concat());
    } else if (kw == "upsample") {
      seen_layer = true;
      auto f = take("factor");
      if (!f) throw ParseError("upsample requires factor=", lineno);
      net.layers.push_back(LayerSpec::upsample(to_int(*f, "factor", lineno)));
    } else {
      throw ParseError("unknown layer kind '" + kw + "'", lineno);
    }
    if (!kv.empty()) throw ParseError("unknown key '" + kv.begin()->first + "'", lineno);
    if (seen_layer) {
      const auto& l = net.layers.back();
      if (l.kind == LayerKind::conv &&
          (l.kh < 1 || l.kh % 2 == 0 || l.filters < 1 || l.dy < 1 || l.sy < 1))
        throw ParseError("conv needs odd k >= 1 and f, d, s >= 1", lineno);
      if (l.kind == LayerKind::upsample && l.factor < 1)
        throw ParseError("upsample factor must be >= 1", lineno);
    }
  }
  // A spec without a concat line feeds the concatenated frames to the trunk.
  bool has_concat = false;
  for (const auto& l : net.layers) has_concat |= l.kind == LayerKind::concat;
  if (!has_concat) net.layers.insert(net.layers.begin(), LayerSpec::concat());
  renumber(net);
  try {
    net.validate();
  } catch (const ShapeError& e) {
    throw ParseError(e.what(), 0);
  }
  return net;
}

NetworkSpec load_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open network spec '" + path + "'", 0);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

template <typename T>
std::int64_t ParamStore<T>::total_count() const {
  std::int64_t n = 0;
  for (const auto& k : kernels) n += static_cast<std::int64_t>(k.param_count());
  return n;
}

template <typename T>
template <typename U>
ParamStore<U> ParamStore<T>::cast() const {
  ParamStore<U> out;
  for (const auto& k : kernels) {
    ConvKernel<U> c;
    c.kh = k.kh; c.kw = k.kw; c.c_in = k.c_in; c.c_out = k.c_out;
    c.dy = k.dy; c.dx = k.dx; c.sy = k.sy; c.sx = k.sx;
    c.weights.assign(k.weights.begin(), k.weights.end());
    c.bias.assign(k.bias.begin(), k.bias.end());
    out.kernels.push_back(std::move(c));
  }
  return out;
}

template <typename T>
ParamStore<T> zero_params(const NetworkSpec& net) {
  net.validate();
  ParamStore<T> ps;
  const auto cin = net.conv_input_channels();
  std::size_t k = 0;
  for (const auto* l : net.conv_layers()) {
    ConvKernel<T> c(l->kh, l->kw, cin[k++], l->filters, 1, 1);
    c.dy = l->dy; c.dx = l->dx; c.sy = l->sy; c.sx = l->sx;
    ps.kernels.push_back(std::move(c));
  }
  return ps;
}

namespace {

template <typename T>
Tensor4<T> stack_batch(const Tensor4<T>& a, const Tensor4<T>& b) {
  Tensor4<T> out(a.n() + b.n(), a.h(), a.w(), a.c());
  std::copy(a.vec().begin(), a.vec().end(), out.vec().begin());
  std::copy(b.vec().begin(), b.vec().end(), out.vec().begin() + a.size());
  return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> unstack_batch(const Tensor4<T>& x) {
  const int half = x.n() / 2;
  Tensor4<T> a(half, x.h(), x.w(), x.c());
  Tensor4<T> b(half, x.h(), x.w(), x.c());
  std::copy(x.vec().begin(), x.vec().begin() + a.size(), a.vec().begin());
  std::copy(x.vec().begin() + a.size(), x.vec().end(), b.vec().begin());
  return {std::move(a), std::move(b)};
}

template <typename T>
void check_params(const NetworkSpec& net, const ParamStore<T>& params) {
  const auto convs = net.conv_layers();
  if (params.kernels.size() != convs.size())
    throw ShapeError("parameter store has " + std::to_string(params.kernels.size()) +
                     " layers, network has " + std::to_string(convs.size()));
  const auto cin = net.conv_input_channels();
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const auto& k = params.kernels[i];
    const auto& l = *convs[i];
    if (k.kh != l.kh || k.kw != l.kw || k.c_in != cin[i] || k.c_out != l.filters ||
        k.dy != l.dy || k.dx != l.dx || k.sy != l.sy || k.sx != l.sx)
      throw ShapeError("parameters for conv layer " + std::to_string(l.id) +
                       " do not match the network spec");
  }
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const NetworkSpec& net, const ParamStore<T>& params,
                         const Tensor4<T>& frame1, const Tensor4<T>& frame2,
                         CacheMode mode) {
  net.validate();
  check_params(net, params);
  if (frame1.shape() != frame2.shape())
    throw ShapeError("frames differ in shape: " + frame1.shape().str() + " vs " +
                     frame2.shape().str());
  if (frame1.c() != net.frame_channels)
    throw ShapeError("frames have " + std::to_string(frame1.c()) +
                     " channels, network expects " + std::to_string(net.frame_channels));
  const int div = net.required_divisor();
  if (frame1.h() % div != 0 || frame1.w() % div != 0)
    throw ShapeError("frame dims " + std::to_string(frame1.h()) + "x" +
                     std::to_string(frame1.w()) + " must be multiples of " +
                     std::to_string(div));

  ForwardResult<T> res;
  auto& cache = res.cache;
  cache.mode = mode;
  cache.frame_shape = frame1.shape();
  if (mode == CacheMode::full) cache.acts.resize(net.layers.size());
  if (mode == CacheMode::masks) cache.masks.resize(net.layers.size());
  cache.in_shapes.reserve(net.layers.size());

  Tensor4<T> x = stack_batch(frame1, frame2);
  if (mode == CacheMode::full) cache.input = x;
  int conv_idx = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    cache.in_shapes.push_back(x.shape());
    Tensor4<T> y;
    switch (l.kind) {
      case LayerKind::conv: {
        y = conv2d_forward(x, params.kernels[conv_idx++]);
        if (l.activation == Activation::relu) {
          for (auto& v : y.vec()) v = v > T(0) ? v : T(0);
          if (mode == CacheMode::masks) {
            auto& m = cache.masks[i];
            m.resize(y.size());
            for (std::size_t e = 0; e < y.size(); ++e) m[e] = y.vec()[e] > T(0);
          }
        }
        break;
      }
      case LayerKind::concat: {
        auto [a, b] = unstack_batch(x);
        y = concat_channels(a, b);
        break;
      }
      case LayerKind::upsample:
        y = upsample_nearest(x, l.factor);
        break;
    }
    if (mode == CacheMode::full) cache.acts[i] = y;
    x = std::move(y);
  }
  res.flow = std::move(x);
  return res;
}

template <typename T>
NetGradients<T> backward(const NetworkSpec& net, const ParamStore<T>& params,
                         const ActivationCache<T>& cache, const Tensor4<T>& grad_flow,
                         bool want_params) {
  if (cache.mode == CacheMode::none || cache.in_shapes.size() != net.layers.size())
    throw UsageError("backward requires a cache from forward with keep_cache");
  if (want_params && cache.mode != CacheMode::full)
    throw UsageError("parameter gradients require a full activation cache");
  check_params(net, params);
  const Shape4 fs = cache.frame_shape;
  const Shape4 expected{fs.n, fs.h, fs.w, net.output_channels()};
  if (grad_flow.shape() != expected)
    throw ShapeError("grad_flow shape " + grad_flow.shape().str() + " expected " +
                     expected.str());

  NetGradients<T> out;
  if (want_params) {
    out.params = params;
    for (auto& k : out.params.kernels) {
      std::fill(k.weights.begin(), k.weights.end(), T(0));
      std::fill(k.bias.begin(), k.bias.end(), T(0));
    }
  }

  Tensor4<T> g = grad_flow;
  int conv_idx = net.conv_count();
  for (std::size_t ii = net.layers.size(); ii-- > 0;) {
    const auto& l = net.layers[ii];
    const Shape4& in_shape = cache.in_shapes[ii];
    switch (l.kind) {
      case LayerKind::conv: {
        const auto& kernel = params.kernels[--conv_idx];
        if (l.activation == Activation::relu) {
          auto& gv = g.vec();
          if (cache.mode == CacheMode::full) {
            const auto& a = cache.acts[ii].vec();
            for (std::size_t e = 0; e < gv.size(); ++e)
              if (!(a[e] > T(0))) gv[e] = T(0);
          } else {
            const auto& m = cache.masks[ii];
            for (std::size_t e = 0; e < gv.size(); ++e)
              if (!m[e]) gv[e] = T(0);
          }
        }
        if (want_params) {
          const Tensor4<T>& input = ii == 0 ? cache.input : cache.acts[ii - 1];
          auto& gk = out.params.kernels[conv_idx];
          conv2d_backward_params(g, input, kernel, gk.weights, gk.bias);
        }
        g = conv2d_backward_input(g, in_shape, kernel);
        break;
      }
      case LayerKind::concat: {
        auto [ga, gb] = split_channels(g, in_shape.c);
        g = stack_batch(ga, gb);
        break;
      }
      case LayerKind::upsample:
        g = upsample_nearest_backward(g, l.factor);
        break;
    }
  }
  auto [g1, g2] = unstack_batch(g);
  out.frame1 = std::move(g1);
  out.frame2 = std::move(g2);
  return out;
}

#define DDC_INSTANTIATE_NET(T)                                                     \
  template struct ParamStore<T>;                                                   \
  template ParamStore<T> zero_params<T>(const NetworkSpec&);                       \
  template ForwardResult<T> forward(const NetworkSpec&, const ParamStore<T>&,      \
                                    const Tensor4<T>&, const Tensor4<T>&, CacheMode); \
  template NetGradients<T> backward(const NetworkSpec&, const ParamStore<T>&,      \
                                    const ActivationCache<T>&, const Tensor4<T>&, bool);

DDC_INSTANTIATE_NET(float)
DDC_INSTANTIATE_NET(double)
template ParamStore<double> ParamStore<float>::cast<double>() const;
template ParamStore<float> ParamStore<double>::cast<float>() const;
template ParamStore<float> ParamStore<float>::cast<float>() const;
template ParamStore<double> ParamStore<double>::cast<double>() const;

}  // namespace ddc
