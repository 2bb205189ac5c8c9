#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ddcnet/network.hpp"

namespace ddc {

/// Input-gradient magnitude of one output unit, normalized so max == 1.
struct ErfMap {
  int h = 0;
  int w = 0;
  std::vector<double> grid;  // row-major h*w, all >= 0
  int center_i = 0;
  int center_j = 0;
  int output_channel = 0;  // 0 = u, 1 = v
  double raw_peak = 0.0;   // max |gradient| before normalization
  bool degenerate = false; // every gradient was exactly zero

  double at(int i, int j) const { return grid[static_cast<std::size_t>(i) * w + j]; }
};

struct ErfStats {
  double fwhm_row = 0.0;
  double fwhm_col = 0.0;
  double peak = 0.0;
  double gridding_score = 0.0;

  /// Single-line `key=value` record.
  std::string record() const;
  static ErfStats parse_record(const std::string& line);
};

class ErfError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Every weight set to `value`, every bias 0. Throws DomainError unless
/// value > 0.
template <typename T>
ParamStore<T> constant_init(const NetworkSpec& net, double value);

/// Per-layer constant 1 / (kh * kw * c_in). Keeps all-ones activations at
/// unit scale in deep nets; the normalized ERF matches any positive constant.
template <typename T>
ParamStore<T> constant_init_fan_in(const NetworkSpec& net);

struct ErfOptions {
  int output_channel = 0;  // probe the u channel by default
  int input_channel = -1;  // -1 sums |gradient| over frame-1 channels
};

/// ERF of the central output unit. With no `probe`, both frames are all
/// ones; otherwise `probe` holds (frame1, frame2) batches and the |gradient|
/// maps are averaged over the batch.
template <typename T>
ErfMap compute_erf(const NetworkSpec& net, const ParamStore<T>& params, int h, int w,
                   const std::optional<std::pair<Tensor4<T>, Tensor4<T>>>& probe = {},
                   const ErfOptions& opts = {});

/// Full width at half maximum of the central row and column, with
/// half-max crossings linearly interpolated between samples.
ErfStats measure_fwhm(const ErfMap& erf);

/// FWHM of a sampled 1-D profile: distance between the outermost crossings
/// of half its maximum. Throws ErfError if either end stays above half max.
double profile_fwhm(const std::vector<double>& row);

/// Fraction of cells below eps * max inside the bounding box of cells at
/// or above half max.
double gridding_score(const ErfMap& erf, double eps = 1e-3);

/// Input pixels reachable from the central output unit, found by walking
/// layer connectivity backward with index arithmetic only.
struct SupportMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> cells;

  bool at(int i, int j) const { return cells[static_cast<std::size_t>(i) * w + j] != 0; }
  std::size_t count() const;
  /// Width of the bounding box of marked cells along rows and columns.
  int bbox_width() const;
  int bbox_height() const;
};

SupportMap support_oracle(const NetworkSpec& net, int h, int w);

/// Probe size covering the theoretical RF plus `margin`: odd for stride-free
/// nets, otherwise the next multiple of the required divisor.
int probe_size_for(const NetworkSpec& net, int margin = 2);

/// 16-bit binary PGM of the normalized map.
std::string encode_pgm16(const ErfMap& erf);
std::string encode_erf_csv(const ErfMap& erf);
std::string encode_central_row_csv(const ErfMap& erf);

}  // namespace ddc
