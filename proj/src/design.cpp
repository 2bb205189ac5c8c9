#include "ddcnet/design.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ddc {

void FlowHistogram::check() const {
  if (bin_edges.size() != counts.size() + 1)
    throw DomainError("histogram needs counts.size() + 1 edges");
  for (std::size_t i = 1; i < bin_edges.size(); ++i)
    if (!(bin_edges[i] > bin_edges[i - 1]))
      throw DomainError("histogram edges must be strictly increasing");
  std::int64_t s = 0;
  for (auto c : counts) {
    if (c < 0) throw DomainError("histogram counts must be nonnegative");
    s += c;
  }
  if (s != total) throw DomainError("histogram total does not match counts");
}

FlowHistogram magnitude_histogram(const std::vector<FlowField>& flows, double bin_width) {
  if (flows.empty()) throw DomainError("magnitude_histogram needs at least one field");
  if (!(bin_width > 0.0)) throw DomainError("bin width must be > 0");
  std::vector<double> mags;
  for (const auto& f : flows) {
    f.check();
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (!f.valid[i]) continue;
      const double u = f.u[i], v = f.v[i];
      mags.push_back(std::sqrt(u * u + v * v));
    }
  }
  if (mags.empty()) throw DomainError("no valid flow pixels to histogram");
  const double mx = *std::max_element(mags.begin(), mags.end());
  const auto bins = static_cast<std::size_t>(std::floor(mx / bin_width)) + 1;
  FlowHistogram h;
  h.counts.assign(bins, 0);
  for (std::size_t k = 0; k <= bins; ++k) h.bin_edges.push_back(static_cast<double>(k) * bin_width);
  for (double m : mags) {
    auto k = static_cast<std::size_t>(std::floor(m / bin_width));
    h.counts[std::min(k, bins - 1)] += 1;
  }
  h.total = static_cast<std::int64_t>(mags.size());
  return h;
}

double coverage_magnitude(const FlowHistogram& hist, double p) {
  hist.check();
  if (!(p > 0.0 && p <= 1.0)) throw DomainError("percentile must lie in (0, 1]");
  if (hist.total <= 0) throw DomainError("histogram is empty");
  if (p == 1.0) {
    for (std::size_t k = hist.counts.size(); k-- > 0;)
      if (hist.counts[k] > 0) return hist.bin_edges[k + 1];
  }
  const double need = p * static_cast<double>(hist.total);
  std::int64_t cum = 0;
  for (std::size_t k = 0; k < hist.counts.size(); ++k) {
    cum += hist.counts[k];
    if (static_cast<double>(cum) >= need - 1e-9 * static_cast<double>(hist.total))
      return hist.bin_edges[k + 1];
  }
  return hist.bin_edges.back();
}

FlowHistogram synthetic_histogram(int coverage_px, std::int64_t total, double fraction) {
  if (coverage_px < 1) throw DomainError("coverage must be >= 1 px");
  if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("fraction must lie in (0, 1)");
  const int tail_bin = std::max(coverage_px + 1, static_cast<int>(1.5 * coverage_px));
  FlowHistogram h;
  h.counts.assign(static_cast<std::size_t>(tail_bin) + 1, 0);
  for (int k = 0; k <= tail_bin + 1; ++k) h.bin_edges.push_back(k);
  const auto body = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(total)));
  for (int k = 0; k < coverage_px; ++k)
    h.counts[k] = body / coverage_px + (k < body % coverage_px ? 1 : 0);
  h.counts[tail_bin] = total - body;
  h.total = total;
  return h;
}

void DesignCriteria::check() const {
  if (!(coverage_percentile > 0.0 && coverage_percentile <= 1.0))
    throw DomainError("coverage percentile must lie in (0, 1]");
  if (dilation_step < 0) throw DomainError("dilation step must be >= 0");
  if (max_depth < 1) throw DomainError("max depth must be >= 1");
  if (filters < 1) throw DomainError("filters must be >= 1");
  if (!(coverage_factor > 0.0)) throw DomainError("coverage factor must be > 0");
}

namespace {

struct Probed {
  int probe = 0;
  ErfMap map;
};

Probed probe_constant_erf(const NetworkSpec& net) {
  const int n = probe_size_for(net);
  auto params = constant_init_fan_in<double>(net);
  return {n, compute_erf(net, params, n, n)};
}

}  // namespace

DesignReport design_depth(const DesignCriteria& criteria, const FlowHistogram& hist,
                          bool keep_maps) {
  criteria.check();
  DesignReport r;
  r.coverage_px = coverage_magnitude(hist, criteria.coverage_percentile);
  r.target_fwhm = criteria.coverage_factor * r.coverage_px;
  for (int L = 1; L <= criteria.max_depth; ++L) {
    const auto net = build_linear_schedule(L, criteria.dilation_step, criteria.filters);
    auto probed = probe_constant_erf(net);
    const auto stats = measure_fwhm(probed.map);
    r.rows.push_back({L, theoretical_rf(net), probed.probe, stats.fwhm_row, stats.fwhm_col,
                      stats.gridding_score});
    if (keep_maps) r.maps.push_back(std::move(probed.map));
    if (stats.fwhm_row >= r.target_fwhm) {
      r.chosen_depth = L;
      break;
    }
  }
  return r;
}

std::string DesignReport::csv() const {
  std::string out = "depth,theoretical_rf,probe_size,fwhm_row,fwhm_col,gridding_score,meets_target\n";
  char buf[160];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%d,%lld,%d,%.6f,%.6f,%.6f,%d\n", row.depth,
                  static_cast<long long>(row.theoretical_rf), row.probe_size, row.fwhm_row,
                  row.fwhm_col, row.gridding_score, row.fwhm_row >= target_fwhm ? 1 : 0);
    out += buf;
  }
  return out;
}

std::string DesignReport::summary() const {
  char buf[200];
  std::snprintf(buf, sizeof buf, "coverage_px=%.3f target_fwhm=%.3f chosen_depth=%s probed=%zu",
                coverage_px, target_fwhm,
                chosen_depth ? std::to_string(*chosen_depth).c_str() : "none", rows.size());
  return buf;
}

std::optional<ErfSummary> summarize_erf(const NetworkSpec& net, int max_probe) {
  const int n = probe_size_for(net);
  if (n > max_probe) return std::nullopt;
  auto params = constant_init_fan_in<double>(net);
  const auto erf = compute_erf(net, params, n, n);
  return ErfSummary{n, measure_fwhm(erf)};
}

std::vector<int> schedule_dilations(ScheduleKind kind, int depth, int step) {
  if (depth < 1) throw DomainError("depth must be >= 1");
  std::vector<int> d;
  for (int l = 0; l < depth; ++l) {
    switch (kind) {
      case ScheduleKind::linear: d.push_back(1 + l * step); break;
      case ScheduleKind::exponential:
        if (l >= 30) throw DomainError("exponential schedule overflows past 30 layers");
        d.push_back(1 << l);
        break;
      case ScheduleKind::constant: d.push_back(1); break;
    }
  }
  return d;
}

std::vector<ScheduleRow> compare_schedules(int depth, int filters,
                                           const std::vector<int>& linear_steps,
                                           int max_probe) {
  if (depth < 2) throw DomainError("schedule comparison needs depth >= 2");
  std::vector<std::pair<std::string, std::vector<int>>> plans;
  for (int s : linear_steps)
    plans.emplace_back("linear_step" + std::to_string(s),
                       schedule_dilations(ScheduleKind::linear, depth, s));
  plans.emplace_back("exponential_base2", schedule_dilations(ScheduleKind::exponential, depth));
  plans.emplace_back("constant", schedule_dilations(ScheduleKind::constant, depth));

  std::vector<ScheduleRow> rows;
  for (auto& [name, d] : plans) {
    const auto net = build_dilation_schedule(d, filters);
    ScheduleRow row;
    row.schedule = name;
    row.dilations = d;
    row.params = param_count(net);
    row.theoretical_rf = theoretical_rf(net);
    if (auto s = summarize_erf(net, max_probe)) {
      row.fwhm = s->stats.fwhm_row;
      row.gridding_score = s->stats.gridding_score;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string schedules_csv(const std::vector<ScheduleRow>& rows) {
  std::string out = "schedule,dilations,params,theoretical_rf,fwhm,gridding_score\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.schedule + ",";
    for (std::size_t i = 0; i < r.dilations.size(); ++i)
      out += (i ? " " : "") + std::to_string(r.dilations[i]);
    out += "," + std::to_string(r.params) + "," + std::to_string(r.theoretical_rf) + ",";
    if (r.fwhm) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", *r.fwhm, *r.gridding_score);
      out += buf;
    } else {
      out += "NA,NA";
    }
    out += "\n";
  }
  return out;
}

std::string encode_erf_strip_pgm16(const std::vector<ErfMap>& maps) {
  if (maps.empty()) throw DomainError("no ERF maps to render");
  int tile = 0;
  for (const auto& m : maps) tile = std::max({tile, m.h, m.w});
  const int W = tile * static_cast<int>(maps.size());
  std::vector<std::uint16_t> px(static_cast<std::size_t>(tile) * W, 0);
  for (std::size_t t = 0; t < maps.size(); ++t) {
    const auto& m = maps[t];
    const int oi = (tile - m.h) / 2, oj = (tile - m.w) / 2;
    for (int i = 0; i < m.h; ++i)
      for (int j = 0; j < m.w; ++j)
        px[static_cast<std::size_t>(oi + i) * W + t * tile + oj + j] = static_cast<std::uint16_t>(
            std::lround(std::clamp(m.at(i, j), 0.0, 1.0) * 65535.0));
  }
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(tile) + "\n65535\n";
  for (auto v : px) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

}  // namespace ddc
