#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ddcnet/flow.hpp"
#include "ddcnet/network.hpp"

namespace ddc {

using Rng = std::mt19937_64;

class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int batch_size = 4;
  double lr = 1e-3;
  double l2 = 0.0;
  std::uint64_t seed = 1;
  int max_steps = 2000;
  // Plateau policy: every `lr_window` steps, if the window's mean loss
  // improved on the previous window by less than `lr_threshold` (relative),
  // multiply lr by `lr_factor`.
  int lr_window = 200;
  double lr_threshold = 0.01;
  double lr_factor = 0.5;
  std::set<int> frozen_layers;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_dir;
  int eval_every = 100;
  int eval_samples = 16;

  void check() const;
  /// Applies `key=value` overrides; unknown keys throw TrainingError.
  void apply(const std::map<std::string, std::string>& kv);
};

struct AugmentConfig {
  bool geometric = true;
  bool photometric = true;
  double rotation_deg = 17.0;  // uniform in [-r, r]
  double scale_min = 0.9;
  double scale_max = 1.3;
  double translation_px = 0.0;
  double brightness = 0.2;  // additive, uniform in [-b, b]
  double contrast = 0.2;    // multiplicative around the mean, 1 +- c
  double saturation = 0.2;  // blend with luma, 1 +- s
  double hue = 0.05;        // rotation in YIQ chroma plane, fraction of a turn

  /// Every range zero: augment() returns its inputs unchanged.
  static AugmentConfig identity();
  void check() const;
};

/// Per-parameter Adam moments, shaped like the ParamStore.
struct AdamState {
  std::vector<std::vector<float>> m_w, v_w, m_b, v_b;
  std::int64_t step = 0;

  static AdamState zeros_like(const ParamStore<float>& params);
};

/// Weights ~ Normal(0, sqrt(2 / (kh * kw * c_in))); biases 0.
ParamStore<float> he_init(const NetworkSpec& net, Rng& rng);

/// One Adam update with bias correction. L2 is folded into the gradient as
/// g + l2 * theta. Frozen layer ids (1-based) are left bit-identical.
/// Throws TrainingError naming the layer on a non-finite gradient.
void adam_step(ParamStore<float>& params, const ParamGradients<float>& grads,
               AdamState& state, const TrainConfig& config, double lr);

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor4<T> grad;  // d loss / d estimate, shaped like the estimate
};

/// Masked AEE over every batch item and its gradient. EE == 0 pixels get a
/// zero gradient.
template <typename T>
LossResult<T> aee_loss(const Tensor4<T>& est, const std::vector<FlowField>& gt);

struct Sample {
  Tensor4<float> frame1;  // (1, h, w, 3) in [0, 1]
  Tensor4<float> frame2;
  FlowField gt;
};

struct SynthOptions {
  int size = 64;
  int max_disp = 3;
  double two_region_prob = 0.0;
  double texture_sigma = 1.0;
};

/// frame2(i, j) = frame1(i - v, j - u) for integer flow (u, v); pixels whose
/// correspondence leaves the frame or is occluded are invalid in `gt`.
Sample synth_pair(Rng& rng, const SynthOptions& opts);

/// Smoothed uniform noise, each channel rescaled to [0, 1].
Tensor4<float> random_texture(Rng& rng, int h, int w, double sigma);

Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng);

/// Applies the affine map x' = A (x - c) + c + t to both frames and the
/// ground truth; exposed for deterministic tests. `angle_deg` rotates +x
/// toward +y (clockwise on screen).
Sample apply_affine(const Sample& s, double angle_deg, double scale, double tx, double ty);

class DataSource {
public:
  virtual ~DataSource() = default;
  virtual Sample next(Rng& rng) = 0;
};

class SyntheticSource : public DataSource {
public:
  explicit SyntheticSource(SynthOptions opts) : opts_(opts) {}
  Sample next(Rng& rng) override { return synth_pair(rng, opts_); }
  const SynthOptions& options() const { return opts_; }

private:
  SynthOptions opts_;
};

/// Finite sample list visited in a freshly shuffled order every epoch.
class DatasetSource : public DataSource {
public:
  explicit DatasetSource(std::vector<Sample> samples);
  Sample next(Rng& rng) override;

private:
  std::vector<Sample> samples_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct HistoryEntry {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> eval_aee;
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<HistoryEntry> history;
  std::optional<double> final_eval_aee;
};

std::string history_csv(const std::vector<HistoryEntry>& h);

/// Stacks samples into (n, h, w, 3) frame batches.
std::pair<Tensor4<float>, Tensor4<float>> stack_frames(const std::vector<Sample>& batch);

/// AEE of `params` on a fixed evaluation set.
double evaluate_aee(const NetworkSpec& net, const ParamStore<float>& params,
                    const std::vector<Sample>& eval_set);

/// Mini-batch training. `init` overrides He initialization (resume). With
/// `aug` set, every sample is augmented before use.
TrainResult train(const NetworkSpec& net, const TrainConfig& config,
                  const std::optional<AugmentConfig>& aug, DataSource& data,
                  const std::vector<Sample>& eval_set,
                  std::optional<ParamStore<float>> init = {});

}  // namespace ddc
