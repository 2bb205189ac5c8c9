#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ddcnet/layers.hpp"
#include "ddcnet/tensor.hpp"

namespace ddc {

enum class LayerKind { conv, upsample, concat };
enum class Activation { relu, linear };

/// One entry of a network description. ReLU is fused into conv layers
/// through `activation`.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int id = 0;  // 1-based conv ordinal, 0 for non-conv entries
  int filters = 0;
  int kh = 3, kw = 3;
  int dy = 1, dx = 1;
  int sy = 1, sx = 1;
  Activation activation = Activation::relu;
  std::string share_group;  // set on layers of the per-frame shared branch
  int factor = 1;           // upsample only

  static LayerSpec conv(int filters, int kernel, int dilation, int stride = 1,
                        Activation act = Activation::relu);
  static LayerSpec upsample(int factor);
  static LayerSpec concat();
  bool operator==(const LayerSpec&) const = default;
};

/// Layers before the single `concat` entry form a branch applied to each
/// frame with one shared parameter set; the branch outputs (or the raw
/// frames, if the branch is empty) are channel-concatenated, frame 1 first,
/// and fed to the trunk.
struct NetworkSpec {
  std::string name;
  int frame_channels = 3;
  std::vector<LayerSpec> layers;

  std::size_t concat_index() const;
  std::vector<const LayerSpec*> conv_layers() const;
  int conv_count() const;
  /// Input channel count of every conv layer, in conv-ordinal order.
  std::vector<int> conv_input_channels() const;
  /// Product of all conv strides; frame dims must be multiples of it.
  int required_divisor() const;
  int output_channels() const;

  /// Throws ShapeError describing the first structural violation.
  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

NetworkSpec build_ddcnet_b0();
NetworkSpec build_ddcnet_b1();
/// `depth` 3x3 ReLU layers with dilation 1 + (l-1)*step, then a 1x1 linear head.
NetworkSpec build_linear_schedule(int depth, int dilation_step, int filters = 64,
                                  int frame_channels = 3);
/// Same trunk shape with an explicit per-layer dilation list.
NetworkSpec build_dilation_schedule(const std::vector<int>& dilations,
                                    int filters = 64, int frame_channels = 3);

/// Resolves "b0", "b1", "linear:L:step[:filters]", or a spec-file path.
NetworkSpec resolve_network(const std::string& name);

std::int64_t param_count(const NetworkSpec& net);
std::int64_t theoretical_rf(const NetworkSpec& net);

std::string format_spec(const NetworkSpec& net);
/// Throws ParseError with the offending 1-based line number.
NetworkSpec parse_spec(const std::string& text);
NetworkSpec load_spec_file(const std::string& path);

class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& what, int line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what
                                    : what),
        line_(line) {}
  int line() const { return line_; }

private:
  int line_;
};

/// One kernel per conv ordinal; shared branch layers own a single entry.
template <typename T>
struct ParamStore {
  std::vector<ConvKernel<T>> kernels;

  std::int64_t total_count() const;
  ConvKernel<T>& layer(int id) { return kernels.at(id - 1); }
  const ConvKernel<T>& layer(int id) const { return kernels.at(id - 1); }

  template <typename U>
  ParamStore<U> cast() const;
};

template <typename T>
using ParamGradients = ParamStore<T>;

/// All-zero parameters shaped for `net`.
template <typename T>
ParamStore<T> zero_params(const NetworkSpec& net);

enum class CacheMode {
  none,   // inference only
  masks,  // ReLU masks only: enough for input gradients
  full,   // every activation: enough for parameter gradients
};

template <typename T>
struct ActivationCache {
  CacheMode mode = CacheMode::none;
  Shape4 frame_shape{};
  // Per layer, indexed like NetworkSpec::layers: the activation the layer
  // produced. Branch layers see the two frames stacked along the batch axis.
  std::vector<Tensor4<T>> acts;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<Shape4> in_shapes;  // input shape of every layer
  Tensor4<T> input;               // both frames stacked along the batch axis
};

template <typename T>
struct ForwardResult {
  Tensor4<T> flow;  // (n, h, w, 2): channel 0 = u, 1 = v
  ActivationCache<T> cache;
};

template <typename T>
ForwardResult<T> forward(const NetworkSpec& net, const ParamStore<T>& params,
                         const Tensor4<T>& frame1, const Tensor4<T>& frame2,
                         CacheMode mode = CacheMode::none);

template <typename T>
struct NetGradients {
  ParamGradients<T> params;  // empty kernels when only input gradients were requested
  Tensor4<T> frame1;
  Tensor4<T> frame2;
};

/// Reverse pass. With `want_params` false only frame gradients are formed,
/// which a masks-mode cache supports.
template <typename T>
NetGradients<T> backward(const NetworkSpec& net, const ParamStore<T>& params,
                         const ActivationCache<T>& cache,
                         const Tensor4<T>& grad_flow, bool want_params = true);

class UsageError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

}  // namespace ddc
