#include "ddcnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "ddcnet/checkpoint.hpp"
#include "ddcnet/design.hpp"
#include "ddcnet/erf.hpp"
#include "ddcnet/flow.hpp"
#include "ddcnet/io.hpp"
#include "ddcnet/network.hpp"
#include "ddcnet/training.hpp"

namespace ddc {

namespace fs = std::filesystem;

namespace {

/// Usage-level failure: bad paths or arguments. Maps to exit code 2.
class UsageFailure : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string net = "b0";
  std::string out;
  std::string config;
  std::uint64_t seed = 1;
};

std::string default_out() {
  if (const char* env = std::getenv("DDCNET_OUT"); env && *env) return env;
  return ".";
}

fs::path require_out_dir(const std::string& out) {
  const fs::path p(out.empty() ? default_out() : out);
  if (!fs::is_directory(p)) throw UsageFailure("output directory does not exist: " + p.string());
  return p;
}

void write_text(const fs::path& p, const std::string& s) { write_file_atomic(p.string(), s); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Reference parameter counts (millions) reported for the published networks.
std::optional<double> reported_params_m(const std::string& name) {
  if (name == "ddcnet-b0") return 1.03;
  if (name == "ddcnet-b1") return 2.99;
  return std::nullopt;
}

double reported_tolerance(const std::string& name) { return name == "ddcnet-b1" ? 0.15 : 0.01; }

const char* kind_name(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::concat: return "concat";
    case LayerKind::upsample: return "upsample";
  }
  return "?";
}

int cmd_info(const Common& c, std::ostream& out) {
  const auto net = resolve_network(c.net);
  const auto params = param_count(net);
  const auto rf = theoretical_rf(net);
  const auto cin = net.conv_input_channels();
  out << "network        " << net.name << "\n";
  out << "conv_layers    " << net.conv_count() << "\n";
  out << "spec_entries   " << net.layers.size() << "\n";
  out << "parameters     " << params << " (" << fmt("%.3f", params / 1e6) << " m)\n";
  out << "theoretical_rf " << rf << " px\n";
  out << "divisor        " << net.required_divisor() << "\n\n";
  out << "  #  kind      id  k  c_in  filters  dil  stride  act     share\n";
  std::size_t ci = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    char buf[160];
    if (l.kind == LayerKind::conv) {
      std::snprintf(buf, sizeof buf, "%3zu  %-8s %3d %2d %5d %8d %4d %7d  %-6s  %s\n", i + 1,
                    kind_name(l), l.id, l.kh, cin[ci++], l.filters, l.dy, l.sy,
                    l.activation == Activation::relu ? "relu" : "linear",
                    l.share_group.empty() ? "-" : l.share_group.c_str());
    } else if (l.kind == LayerKind::upsample) {
      std::snprintf(buf, sizeof buf, "%3zu  %-8s   -  -     -        -    -       -  x%d\n", i + 1,
                    kind_name(l), l.factor);
    } else {
      std::snprintf(buf, sizeof buf, "%3zu  %-8s\n", i + 1, kind_name(l));
    }
    out << buf;
  }
  std::string tail;
  if (auto rep = reported_params_m(net.name)) {
    const double rel = (params / 1e6 - *rep) / *rep;
    const double tol = reported_tolerance(net.name);
    const bool ok = std::fabs(rel) <= tol;
    out << "\nreported " << fmt("%.2f", *rep) << " m; symbolic count differs by "
        << fmt("%+.2f", 100.0 * rel) << "% (tolerance " << fmt("%.0f", 100.0 * tol) << "%)";
    if (std::fabs(rel) > 0.01) out << " -- discrepancy: filter allocation not fully specified";
    out << "\n";
    tail = " reported_m=" + fmt("%.2f", *rep) + " rel_diff=" + fmt("%.4f", rel) +
           " within_tolerance=" + (ok ? "yes" : "no");
  }
  out << "info net=" << net.name << " conv_layers=" << net.conv_count()
      << " spec_entries=" << net.layers.size() << " params=" << params
      << " params_m=" << fmt("%.3f", params / 1e6) << " rf=" << rf << tail << "\n";
  return 0;
}

Tensor4<double> load_frame(const std::string& path) {
  return image_to_tensor(decode_ppm(read_file_bytes(path))).cast<double>();
}

int cmd_erf(const Common& c, int size, int max_size, const std::string& init, double value,
            const std::string& ckpt, const std::string& channel,
            const std::vector<std::string>& pairs, std::ostream& out) {
  const auto dir = require_out_dir(c.out);
  const auto net = resolve_network(c.net);
  const int div = net.required_divisor();

  ParamStore<double> params;
  if (init == "fan-in") params = constant_init_fan_in<double>(net);
  else if (init == "constant") params = constant_init<double>(net, value);
  else if (init == "checkpoint") {
    if (ckpt.empty()) throw UsageFailure("--init checkpoint requires --checkpoint");
    params = load_checkpoint(ckpt).cast<double>();
  } else {
    throw UsageFailure("unknown --init '" + init + "'");
  }

  ErfOptions opts;
  opts.output_channel = channel == "v" ? 1 : 0;
  std::optional<std::pair<Tensor4<double>, Tensor4<double>>> probe;
  bool truncated = false;
  if (!pairs.empty()) {
    std::vector<Tensor4<double>> a, b;
    for (const auto& pr : pairs) {
      const auto colon = pr.find(',');
      if (colon == std::string::npos) throw UsageFailure("--pair expects frame1.ppm,frame2.ppm");
      a.push_back(load_frame(pr.substr(0, colon)));
      b.push_back(load_frame(pr.substr(colon + 1)));
    }
    const Shape4 s = a.front().shape();
    Tensor4<double> fa(static_cast<int>(a.size()), s.h, s.w, s.c), fb(fa.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape() != s || b[i].shape() != s) throw UsageFailure("probe frames differ in size");
      std::copy(a[i].vec().begin(), a[i].vec().end(), fa.vec().begin() + i * s.size());
      std::copy(b[i].vec().begin(), b[i].vec().end(), fb.vec().begin() + i * s.size());
    }
    probe.emplace(std::move(fa), std::move(fb));
    size = s.h;
  } else {
    if (size <= 0) {
      size = probe_size_for(net);
      if (size > max_size) {
        size = max_size;
        truncated = true;
      }
    }
    if (div > 1) size = ((size + div - 1) / div) * div;
    else if (size % 2 == 0) ++size;  // odd sizes give a unique central unit
  }

  const auto erf = probe ? compute_erf(net, params, 0, 0, probe, opts)
                         : compute_erf<double>(net, params, size, size, {}, opts);
  if (erf.degenerate) throw std::runtime_error("ERF is all zero for these parameters");
  const auto stats = measure_fwhm(erf);
  write_text(dir / "erf.pgm", encode_pgm16(erf));
  write_text(dir / "erf.csv", encode_erf_csv(erf));
  write_text(dir / "central_row.csv", encode_central_row_csv(erf));
  write_text(dir / "erf_stats.txt", stats.record() + "\n");
  out << "probe " << erf.h << "x" << erf.w << (truncated ? " (truncated below theoretical RF)" : "")
      << "\n";
  out << "erf net=" << net.name << " size=" << erf.h << " " << stats.record()
      << " rf=" << theoretical_rf(net) << "\n";
  return 0;
}

std::vector<std::string> collect_files(const std::vector<std::string>& inputs,
                                       const std::string& ext) {
  std::vector<std::string> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<std::string> here;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ext) here.push_back(e.path().string());
      std::sort(here.begin(), here.end());
      files.insert(files.end(), here.begin(), here.end());
    } else if (fs::is_regular_file(in)) {
      files.push_back(in);
    } else {
      throw UsageFailure("no such file or directory: " + in);
    }
  }
  return files;
}

int cmd_design(const Common& c, const std::string& hist_src, const std::vector<std::string>& flos,
               DesignCriteria crit, int compare_depth, std::ostream& out) {
  const auto dir = require_out_dir(c.out);
  FlowHistogram hist;
  if (!hist_src.empty()) {
    if (hist_src.rfind("synthetic:", 0) != 0)
      throw UsageFailure("--hist expects synthetic:<coverage_px>");
    hist = synthetic_histogram(std::stoi(hist_src.substr(10)));
  } else if (!flos.empty()) {
    std::vector<FlowField> fields;
    for (const auto& f : collect_files(flos, ".flo")) fields.push_back(load_flo(f));
    hist = magnitude_histogram(fields);
  } else {
    throw UsageFailure("design needs --hist or --flo");
  }
  const auto report = design_depth(crit, hist, /*keep_maps=*/true);
  std::optional<std::string> sched;
  if (compare_depth > 0) sched = schedules_csv(compare_schedules(compare_depth, crit.filters));
  write_text(dir / "design.csv", report.csv());
  write_text(dir / "erf_strip.pgm", encode_erf_strip_pgm16(report.maps));
  if (sched) write_text(dir / "schedules.csv", *sched);
  out << report.csv();
  out << "design " << report.summary() << "\n";
  return 0;
}

std::string flag_or(const std::map<std::string, std::string>& kv, const std::string& k,
                    const std::string& def) {
  auto it = kv.find(k);
  return it == kv.end() ? def : it->second;
}

struct TrainFlags {
  CLI::Option* steps = nullptr;
  CLI::Option* batch = nullptr;
  CLI::Option* lr = nullptr;
  CLI::Option* l2 = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* size = nullptr;
  CLI::Option* max_disp = nullptr;
  CLI::Option* two_region = nullptr;
  CLI::Option* augment = nullptr;
  CLI::Option* freeze = nullptr;
  CLI::Option* ckpt_every = nullptr;
  CLI::Option* eval_samples = nullptr;
  int steps_v = 0, batch_v = 0, size_v = 64, max_disp_v = 3, ckpt_every_v = 0, eval_samples_v = 0;
  double lr_v = 0, l2_v = 0, two_region_v = 0;
  std::string augment_v = "off";
  std::string freeze_v;
  std::string init_ckpt;
};

int cmd_train(const Common& c, TrainFlags& f, std::ostream& out) {
  const auto dir = require_out_dir(c.out);
  const auto net = resolve_network(c.net);
  std::map<std::string, std::string> file_kv;
  if (!c.config.empty()) file_kv = parse_key_values(read_file_text(c.config));

  // Data keys are consumed here; the rest must be TrainConfig keys.
  SynthOptions synth;
  synth.size = std::stoi(flag_or(file_kv, "size", "64"));
  synth.max_disp = std::stoi(flag_or(file_kv, "max_disp", "3"));
  synth.two_region_prob = std::stod(flag_or(file_kv, "two_region_prob", "0"));
  std::string augment = flag_or(file_kv, "augment", "off");
  for (const char* k : {"size", "max_disp", "two_region_prob", "augment"}) file_kv.erase(k);

  TrainConfig cfg;
  cfg.seed = c.seed;
  cfg.apply(file_kv);
  // Flags override the config file.
  if (f.seed->count()) cfg.seed = c.seed;
  if (f.steps->count()) cfg.max_steps = f.steps_v;
  if (f.batch->count()) cfg.batch_size = f.batch_v;
  if (f.lr->count()) cfg.lr = f.lr_v;
  if (f.l2->count()) cfg.l2 = f.l2_v;
  if (f.ckpt_every->count()) cfg.checkpoint_every = f.ckpt_every_v;
  if (f.eval_samples->count()) cfg.eval_samples = f.eval_samples_v;
  if (f.freeze->count()) cfg.apply({{"frozen_layers", f.freeze_v}});
  if (f.size->count()) synth.size = f.size_v;
  if (f.max_disp->count()) synth.max_disp = f.max_disp_v;
  if (f.two_region->count()) synth.two_region_prob = f.two_region_v;
  if (f.augment->count()) augment = f.augment_v;
  if (cfg.checkpoint_every > 0) cfg.checkpoint_dir = dir.string();
  cfg.check();

  std::optional<AugmentConfig> aug;
  if (augment == "on") aug = AugmentConfig{};
  else if (augment != "off") throw UsageFailure("--augment expects on|off");

  std::optional<ParamStore<float>> init;
  if (!f.init_ckpt.empty()) init = load_checkpoint(f.init_ckpt);

  Rng eval_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Sample> eval_set;
  for (int i = 0; i < cfg.eval_samples; ++i) eval_set.push_back(synth_pair(eval_rng, synth));

  SyntheticSource source(synth);
  const auto res = train(net, cfg, aug, source, eval_set, init);
  save_checkpoint((dir / "final.ddcp").string(), res.params);
  write_text(dir / "history.csv", history_csv(res.history));
  write_text(dir / "net.spec", format_spec(net));
  const double last = res.history.empty() ? 0.0 : res.history.back().loss;
  out << "train net=" << net.name << " steps=" << cfg.max_steps << " seed=" << cfg.seed
      << " final_loss=" << fmt("%.6f", last);
  if (res.final_eval_aee) out << " eval_aee=" << fmt("%.6f", *res.final_eval_aee);
  out << "\n";
  return 0;
}

/// Zero-pads frames up to the divisor, runs the net, crops back.
FlowField estimate(const NetworkSpec& net, const ParamStore<float>& params,
                   const Tensor4<float>& f1, const Tensor4<float>& f2) {
  const int div = net.required_divisor();
  const int h = f1.h(), w = f1.w();
  const int ph = ((h + div - 1) / div) * div, pw = ((w + div - 1) / div) * div;
  Tensor4<float> a(1, ph, pw, f1.c()), b(a.shape());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      std::copy_n(f1.pixel(0, i, j), f1.c(), a.pixel(0, i, j));
      std::copy_n(f2.pixel(0, i, j), f2.c(), b.pixel(0, i, j));
    }
  const auto flow = forward(net, params, a, b).flow;
  FlowField f(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      f.u[f.index(i, j)] = flow(0, i, j, 0);
      f.v[f.index(i, j)] = flow(0, i, j, 1);
    }
  return f;
}

int cmd_eval(const Common& c, const std::string& gt_dir, const std::string& est_dir,
             const std::string& ckpt, const std::string& frames_dir, std::ostream& out) {
  const auto dir = require_out_dir(c.out);
  if (!fs::is_directory(gt_dir)) throw UsageFailure("ground-truth directory not found: " + gt_dir);
  const bool use_net = est_dir.empty();
  if (use_net && (ckpt.empty() || frames_dir.empty()))
    throw UsageFailure("eval needs --est-dir, or --ckpt with --frames-dir");
  std::optional<NetworkSpec> net;
  ParamStore<float> params;
  if (use_net) {
    net = resolve_network(c.net);
    params = load_checkpoint(ckpt);
  }
  std::string csv = "name,aee,fl_all,valid_pixels\n";
  double sum_aee = 0.0, sum_fl = 0.0;
  int pairs = 0;
  for (const auto& gt_path : collect_files({gt_dir}, ".flo")) {
    const auto base = fs::path(gt_path).stem().string();
    const auto gt = load_flo(gt_path);
    FlowField est;
    if (use_net) {
      const auto p1 = fs::path(frames_dir) / (base + "_1.ppm");
      const auto p2 = fs::path(frames_dir) / (base + "_2.ppm");
      if (!fs::exists(p1) || !fs::exists(p2)) continue;
      est = estimate(*net, params, image_to_tensor(decode_ppm(read_file_bytes(p1.string()))),
                     image_to_tensor(decode_ppm(read_file_bytes(p2.string()))));
    } else {
      const auto ep = fs::path(est_dir) / (base + ".flo");
      if (!fs::exists(ep)) continue;
      est = load_flo(ep.string());
    }
    const auto em = endpoint_error_map(est, gt);
    const auto nvalid = std::count(em.valid.begin(), em.valid.end(), std::uint8_t{1});
    const double a = aee(est, gt), fl = fl_all(est, gt);
    sum_aee += a;
    sum_fl += fl;
    ++pairs;
    csv += base + "," + fmt("%.6f", a) + "," + fmt("%.6f", fl) + "," +
           std::to_string(nvalid) + "\n";
  }
  if (pairs == 0) throw UsageFailure("no matching basenames between inputs and " + gt_dir);
  const double ma = sum_aee / pairs, mf = sum_fl / pairs;
  csv += "mean," + fmt("%.6f", ma) + "," + fmt("%.6f", mf) + ",\n";
  write_text(dir / "metrics.csv", csv);
  out << csv;
  out << "eval pairs=" << pairs << " aee=" << fmt("%.6f", ma) << " fl_all=" << fmt("%.6f", mf)
      << "\n";
  return 0;
}

int cmd_viz(const std::string& flo, const std::string& out_path, double max_mag,
            std::ostream& out) {
  const auto f = load_flo(flo);
  fs::path target(out_path.empty() ? default_out() : out_path);
  if (fs::is_directory(target)) target /= fs::path(flo).stem().string() + ".ppm";
  const auto parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw UsageFailure("output directory does not exist: " + parent.string());
  const auto img = flow_to_color(f, max_mag > 0 ? std::optional<float>(static_cast<float>(max_mag))
                                                : std::nullopt);
  write_text(target, encode_ppm(img));
  out << "viz in=" << flo << " out=" << target.string() << " size=" << f.h << "x" << f.w << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Receptive-field-guided dilated CNN toolkit for dense optical flow"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub, bool with_net = true) {
    if (with_net)
      sub->add_option("--net", c.net, "b0 | b1 | linear:L:step[:filters] | dilations:d1,d2,..[:filters] | spec file");
    sub->add_option("--out", c.out, "output directory (default $DDCNET_OUT or .)");
    sub->add_option("--config", c.config, "key=value config file");
    return sub->add_option("--seed", c.seed, "random seed");
  };

  auto* info = app.add_subcommand("info", "architecture summary and parameter count");
  add_common(info);

  auto* erf = app.add_subcommand("erf", "effective receptive field of the central output unit");
  add_common(erf);
  int erf_size = 0, erf_max = 1023;
  std::string erf_init = "fan-in", erf_ckpt, erf_channel = "u";
  double erf_value = 0.01;
  std::vector<std::string> erf_pairs;
  erf->add_option("--size", erf_size, "probe size (default: covers the theoretical RF)");
  erf->add_option("--max-size", erf_max, "cap for the automatic probe size");
  erf->add_option("--init", erf_init, "fan-in | constant | checkpoint");
  erf->add_option("--value", erf_value, "weight for --init constant");
  erf->add_option("--checkpoint", erf_ckpt, "parameters for --init checkpoint");
  erf->add_option("--channel", erf_channel, "u | v")->check(CLI::IsMember({"u", "v"}));
  erf->add_option("--pair", erf_pairs, "frame1.ppm,frame2.ppm probe pair (repeatable)");

  auto* design = app.add_subcommand("design", "choose depth so ERF FWHM covers flow magnitudes");
  add_common(design, false);
  std::string hist_src;
  std::vector<std::string> flos;
  DesignCriteria crit;
  int compare_depth = 0;
  design->add_option("--hist", hist_src, "synthetic:<coverage_px>");
  design->add_option("--flo", flos, ".flo files or directories");
  design->add_option("--percentile", crit.coverage_percentile, "coverage percentile (0,1]");
  design->add_option("--step", crit.dilation_step, "dilation step");
  design->add_option("--max-depth", crit.max_depth, "largest depth probed");
  design->add_option("--filters", crit.filters, "filters per layer");
  design->add_option("--factor", crit.coverage_factor, "required FWHM / coverage magnitude");
  design->add_option("--compare", compare_depth, "also compare schedules at this depth");

  auto* tr = app.add_subcommand("train", "desk-scale training on synthetic pairs");
  TrainFlags tf;
  tf.seed = add_common(tr);
  tf.steps = tr->add_option("--steps", tf.steps_v, "optimizer steps");
  tf.batch = tr->add_option("--batch", tf.batch_v, "batch size");
  tf.lr = tr->add_option("--lr", tf.lr_v, "initial learning rate");
  tf.l2 = tr->add_option("--l2", tf.l2_v, "L2 coefficient");
  tf.size = tr->add_option("--size", tf.size_v, "synthetic frame size");
  tf.max_disp = tr->add_option("--max-disp", tf.max_disp_v, "max synthetic displacement");
  tf.two_region = tr->add_option("--two-region", tf.two_region_v, "two-region sample probability");
  tf.augment = tr->add_option("--augment", tf.augment_v, "on | off");
  tf.freeze = tr->add_option("--freeze", tf.freeze_v, "comma-separated frozen conv ids");
  tf.ckpt_every = tr->add_option("--checkpoint-every", tf.ckpt_every_v, "checkpoint interval");
  tf.eval_samples = tr->add_option("--eval-samples", tf.eval_samples_v, "held-out samples");
  tr->add_option("--init-ckpt", tf.init_ckpt, "resume from checkpoint");

  auto* ev = app.add_subcommand("eval", "AEE and Fl-all against ground truth");
  add_common(ev);
  std::string gt_dir, est_dir, ev_ckpt, frames_dir;
  ev->add_option("--gt-dir", gt_dir, "ground-truth .flo directory")->required();
  ev->add_option("--est-dir", est_dir, "estimated .flo directory (paired by basename)");
  ev->add_option("--ckpt", ev_ckpt, "network checkpoint");
  ev->add_option("--frames-dir", frames_dir, "<name>_1.ppm / <name>_2.ppm frames");

  auto* viz = app.add_subcommand("viz", "color-coded flow image");
  std::string viz_flo, viz_out;
  double viz_max = 0.0;
  viz->add_option("--flo", viz_flo, ".flo input")->required();
  viz->add_option("--out", viz_out, "output .ppm path or directory");
  viz->add_option("--max-mag", viz_max, "normalization magnitude (default: field max)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (info->parsed()) return cmd_info(c, out);
    if (erf->parsed())
      return cmd_erf(c, erf_size, erf_max, erf_init, erf_value, erf_ckpt, erf_channel, erf_pairs, out);
    if (design->parsed()) return cmd_design(c, hist_src, flos, crit, compare_depth, out);
    if (tr->parsed()) return cmd_train(c, tf, out);
    if (ev->parsed()) return cmd_eval(c, gt_dir, est_dir, ev_ckpt, frames_dir, out);
    if (viz->parsed()) return cmd_viz(viz_flo, viz_out, viz_max, out);
  } catch (const UsageFailure& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ddc::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace ddc
