#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddcnet/erf.hpp"
#include "ddcnet/flow.hpp"

namespace ddc {

/// Histogram of flow magnitudes over half-open bins [edge_k, edge_k+1).
struct FlowHistogram {
  std::vector<double> bin_edges;  // counts.size() + 1, strictly increasing
  std::vector<std::int64_t> counts;
  std::int64_t total = 0;

  void check() const;
};

/// Unit-width (or `bin_width`) bins from 0 up to the bin holding the
/// largest valid magnitude. Throws DomainError on empty input.
FlowHistogram magnitude_histogram(const std::vector<FlowField>& flows,
                                  double bin_width = 1.0);

/// Upper edge of the first bin at which the cumulative fraction reaches p.
double coverage_magnitude(const FlowHistogram& hist, double p);

/// Unit-bin histogram where `fraction` of the mass lies uniformly below
/// `coverage_px` and the rest sits in a tail bin at 1.5 * coverage_px.
FlowHistogram synthetic_histogram(int coverage_px, std::int64_t total = 10000,
                                  double fraction = 0.99);

struct DesignCriteria {
  double coverage_percentile = 0.99;
  int dilation_step = 1;
  int max_depth = 30;
  int filters = 4;
  /// FWHM must reach this multiple of the coverage magnitude (FWHM is a
  /// diameter, flow magnitude a radius).
  double coverage_factor = 2.0;

  void check() const;
};

struct DepthRow {
  int depth = 0;
  std::int64_t theoretical_rf = 0;
  int probe_size = 0;
  double fwhm_row = 0.0;
  double fwhm_col = 0.0;
  double gridding_score = 0.0;
};

struct DesignReport {
  double coverage_px = 0.0;
  double target_fwhm = 0.0;
  std::optional<int> chosen_depth;
  std::vector<DepthRow> rows;
  std::vector<ErfMap> maps;  // one per row when requested

  std::string csv() const;
  std::string summary() const;
};

DesignReport design_depth(const DesignCriteria& criteria, const FlowHistogram& hist,
                          bool keep_maps = false);

/// FWHM and gridding of a constant-initialized network at its default
/// probe size. Returns nullopt when the probe would exceed `max_probe`.
struct ErfSummary {
  int probe_size = 0;
  ErfStats stats;
};
std::optional<ErfSummary> summarize_erf(const NetworkSpec& net, int max_probe = 1025);

struct ScheduleRow {
  std::string schedule;
  std::vector<int> dilations;
  std::int64_t params = 0;
  std::int64_t theoretical_rf = 0;
  std::optional<double> fwhm;
  std::optional<double> gridding_score;
};

enum class ScheduleKind { linear, exponential, constant };

std::vector<int> schedule_dilations(ScheduleKind kind, int depth, int step = 1);

/// One row per schedule at equal depth and filter count.
std::vector<ScheduleRow> compare_schedules(int depth, int filters = 4,
                                           const std::vector<int>& linear_steps = {1},
                                           int max_probe = 1025);
std::string schedules_csv(const std::vector<ScheduleRow>& rows);

/// Horizontal strip of ERF maps, each centered in a tile of the largest size.
std::string encode_erf_strip_pgm16(const std::vector<ErfMap>& maps);

}  // namespace ddc
