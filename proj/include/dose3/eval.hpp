#pragma once

// AUROC, ID/OOD experiments over windowed datasets, report emission and
// histogram plots.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dose3/data_io.hpp"
#include "dose3/diffusion.hpp"
#include "dose3/error.hpp"
#include "dose3/nn/checkpoint.hpp"
#include "dose3/ood.hpp"

namespace dose3::eval {

/// Probability that a random OOD score is below a random ID score, ties
/// counted one half. Scores are log-likelihoods (higher = more inlier).
/// Computed from doubled mid-ranks in integer arithmetic, so the result is
/// exactly the pairwise count divided by the number of pairs.
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw Error(ErrorKind::EmptyInput, "AUROC needs two non-empty score lists");
  struct Item {
    double v;
    bool id;
  };
  std::vector<Item> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double v : id_scores) all.push_back({v, true});
  for (double v : ood_scores) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
  std::int64_t rank2_id = 0;  // sum of doubled 1-based mid-ranks of ID items
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const auto mid2 = static_cast<std::int64_t>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (all[k].id) rank2_id += mid2;
    i = j;
  }
  const auto n = static_cast<std::int64_t>(id_scores.size());
  const auto m = static_cast<std::int64_t>(ood_scores.size());
  const std::int64_t u2 = rank2_id - n * (n + 1);
  return static_cast<double>(u2) / static_cast<double>(2 * n * m);
}

// --- histograms --------------------------------------------------------------

struct HistogramInput {
  std::string dimension;
  std::vector<std::pair<std::string, std::vector<double>>> groups;
};

struct Histogram {
  std::string dimension;
  double lo = 0.0, hi = 1.0;
  int bins = 0;
  std::vector<std::string> groups;
  std::vector<std::vector<std::size_t>> counts;  // [group][bin]
};

/// Shared-range histogram over all groups of one dimension. NaNs are
/// dropped; everything else lands in a bin (values at or beyond the range
/// edges go to the edge bins).
inline Histogram make_histogram(const HistogramInput& in, int bins, std::optional<std::pair<double, double>> range = {}) {
  if (bins < 1) throw Error(ErrorKind::ConfigError, "need at least one bin");
  Histogram h;
  h.dimension = in.dimension;
  h.bins = bins;
  if (range) {
    h.lo = range->first;
    h.hi = range->second;
  } else {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [name, vals] : in.groups)
      for (double v : vals)
        if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12 * std::max(1.0, std::abs(lo))) lo -= 0.5, hi += 0.5;
    h.lo = lo;
    h.hi = hi;
  }
  if (!(h.hi > h.lo)) throw Error(ErrorKind::ConfigError, "histogram range is empty");
  for (const auto& [name, vals] : in.groups) {
    h.groups.push_back(name);
    std::vector<std::size_t> c(bins, 0);
    for (double v : vals) {
      if (std::isnan(v)) continue;
      const double f = (v - h.lo) / (h.hi - h.lo) * bins;
      const int b = f <= 0 ? 0 : (f >= bins ? bins - 1 : static_cast<int>(f));
      ++c[b];
    }
    h.counts.push_back(std::move(c));
  }
  return h;
}

inline void write_histogram_csv(const std::string& path, std::span<const Histogram> hs) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f << "dimension,group,bin,bin_lo,bin_hi,count\n";
  char lo[64], hi[64];
  for (const auto& h : hs)
    for (std::size_t g = 0; g < h.groups.size(); ++g)
      for (int b = 0; b < h.bins; ++b) {
        const double w = (h.hi - h.lo) / h.bins;
        std::snprintf(lo, sizeof lo, "%.9g", h.lo + b * w);
        std::snprintf(hi, sizeof hi, "%.9g", h.lo + (b + 1) * w);
        f << h.dimension << ',' << h.groups[g] << ',' << b << ',' << lo << ',' << hi << ',' << h.counts[g][b] << '\n';
      }
}

inline void write_histogram_svg(const std::string& path, std::span<const Histogram> hs) {
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const int cols = 4, pw = 220, ph = 150, pad = 30;
  const int rows = std::max<int>(1, (static_cast<int>(hs.size()) + cols - 1) / cols);
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * (pw + pad) + pad << "\" height=\""
    << rows * (ph + pad) + pad + 20 << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  char buf[64];
  for (std::size_t i = 0; i < hs.size(); ++i) {
    const auto& h = hs[i];
    const int x0 = pad + static_cast<int>(i % cols) * (pw + pad);
    const int y0 = pad + static_cast<int>(i / cols) * (ph + pad);
    f << "<g transform=\"translate(" << x0 << ',' << y0 << ")\">\n";
    f << "<rect width=\"" << pw << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#888\"/>\n";
    f << "<text x=\"2\" y=\"-4\">" << h.dimension << "</text>\n";
    std::size_t peak = 1;
    std::vector<std::size_t> totals;
    for (const auto& c : h.counts) totals.push_back(std::max<std::size_t>(1, std::accumulate(c.begin(), c.end(), std::size_t{0})));
    double peak_frac = 1e-12;
    for (std::size_t g = 0; g < h.counts.size(); ++g)
      for (auto c : h.counts[g]) peak_frac = std::max(peak_frac, static_cast<double>(c) / totals[g]), peak = std::max(peak, c);
    for (std::size_t g = 0; g < h.counts.size(); ++g) {
      f << "<path fill=\"none\" stroke=\"" << colours[g % 6] << "\" d=\"";
      for (int b = 0; b < h.bins; ++b) {
        const double y = ph - ph * (static_cast<double>(h.counts[g][b]) / totals[g]) / peak_frac;
        const double xa = static_cast<double>(pw) * b / h.bins, xb = static_cast<double>(pw) * (b + 1) / h.bins;
        std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", b == 0 ? "M" : " L", xa, y);
        f << buf;
        std::snprintf(buf, sizeof buf, " L%.2f,%.2f", xb, y);
        f << buf;
      }
      f << "\"/>\n";
    }
    std::snprintf(buf, sizeof buf, "%.3g", h.lo);
    f << "<text x=\"0\" y=\"" << ph + 12 << "\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.3g", h.hi);
    f << "<text x=\"" << pw << "\" y=\"" << ph + 12 << "\" text-anchor=\"end\">" << buf << "</text>\n";
    f << "</g>\n";
  }
  // legend from the first panel's groups
  if (!hs.empty()) {
    const int y = rows * (ph + pad) + pad + 8;
    for (std::size_t g = 0; g < hs[0].groups.size(); ++g) {
      f << "<text x=\"" << pad + 80 * static_cast<int>(g) << "\" y=\"" << y << "\" fill=\"" << colours[g % 6] << "\">"
        << hs[0].groups[g] << "</text>\n";
    }
  }
  f << "</svg>\n";
}

inline std::string replace_extension(const std::string& path, const std::string& ext) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path + ext;
  return path.substr(0, dot) + ext;
}

/// Writes the overlaid histograms to `svg_path` and their counts next to it
/// (same name, ".csv").
inline std::vector<Histogram> plot_histograms(std::span<const HistogramInput> inputs, int bins, const std::string& svg_path) {
  if (inputs.empty()) throw Error(ErrorKind::ConfigError, "nothing to plot");
  std::vector<Histogram> hs;
  for (const auto& in : inputs) hs.push_back(make_histogram(in, bins));
  write_histogram_svg(svg_path, hs);
  write_histogram_csv(replace_extension(svg_path, ".csv"), hs);
  return hs;
}

// --- experiments ------------------------------------------------------------

struct ExperimentSpec {
  std::string checkpoint;
  std::string id_data;
  std::string ood_data;
  int steps = 0;        // 0: take from the checkpoint
  int seq_len = 0;      // 0: take from the datasets
  std::uint64_t seed = 0;
  bool axis_split = true;
  int components = 1;
  double fit_fraction = 0.8;
  int histogram_bins = 40;
  std::string method;   // row label in reports; empty picks a default
};

struct EvalReport {
  std::string method;
  std::string id_label, ood_label;
  double auroc = 0.0;
  int metric_dim = 0;
  std::size_t n_fit = 0, n_id_test = 0, n_ood = 0;
  double threshold = 0.0;
  std::size_t id_flagged = 0, ood_flagged = 0;  // below the density threshold
  std::vector<double> id_scores, ood_scores;
  std::vector<Histogram> metric_histograms;  // per metric dimension, groups id / ood
  std::vector<Histogram> eps_histograms;     // raw estimator outputs per axis
  std::map<std::string, std::string> config;
  double seconds = 0.0;  // kept out of emitted reports
  ood::DensityModel density;
};

struct ExperimentData {
  std::span<const PoseSequence> id;
  std::span<const PoseSequence> ood;
  std::string id_label = "id";
  std::string ood_label = "ood";
};

namespace detail {

inline std::string fmt(double v, const char* f = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string default_method(bool split) { return split ? "dose3" : "dose3 (no split)"; }

}  // namespace detail

/// Metric groups of one experiment's three window sets, with the raw
/// estimator outputs of the scored sets.
struct MetricSets {
  std::vector<ood::MetricGroupVector> fit, id_test, ood;
  ood::RawEpsSink id_eps, ood_eps;
};

/// Seeded shuffle of the ID windows into fit and test shares.
inline std::pair<std::vector<PoseSequence>, std::vector<PoseSequence>> split_id(std::span<const PoseSequence> id,
                                                                                 double fit_fraction, std::uint64_t seed) {
  if (id.size() < 2) throw Error(ErrorKind::EmptyInput, "need at least two ID windows");
  if (!(fit_fraction > 0.0 && fit_fraction < 1.0)) throw Error(ErrorKind::ConfigError, "fit fraction must be in (0, 1)");
  std::vector<std::size_t> order(id.size());
  std::iota(order.begin(), order.end(), 0);
  RngState split_rng(seed, 0x53504C4954);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.below(i)]);
  const auto n_fit =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fit_fraction * order.size())), 1, order.size() - 1);
  std::pair<std::vector<PoseSequence>, std::vector<PoseSequence>> out;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_fit ? out.first : out.second).push_back(id[order[i]]);
  return out;
}

/// Axis-split metrics for the fit share, the ID test share and the OOD set.
/// The pooled layout is obtained with ood::pool_axes.
inline MetricSets compute_metric_sets(const nn::EstimatorModel& model, const ExperimentData& data, const NoiseSchedule& s,
                                      const ExperimentSpec& spec) {
  if (data.id.size() < 2 || data.ood.empty()) throw Error(ErrorKind::EmptyInput, "experiment needs ID and OOD windows");
  for (auto ds : {data.id, data.ood})
    for (const auto& w : ds) model.arch.validate_length(static_cast<int>(w.size()));
  const auto [fit, id_test] = split_id(data.id, spec.fit_fraction, spec.seed);
  const auto est = ood::model_estimator(model);
  const auto layout = ood::MetricLayout::AxisSplit;
  MetricSets m;
  m.fit = ood::compute_metric_groups(fit, est, s, RngState(spec.seed, 1), layout);
  m.id_test = ood::compute_metric_groups(id_test, est, s, RngState(spec.seed, 2), layout, 16, &m.id_eps);
  m.ood = ood::compute_metric_groups(data.ood, est, s, RngState(spec.seed, 3), layout, 16, &m.ood_eps);
  return m;
}

/// Density fit, scoring, AUROC and histograms from precomputed axis-split
/// metrics; `spec.axis_split` false pools the rotation axes first.
inline EvalReport evaluate_metric_sets(const MetricSets& sets, const NoiseSchedule& s, const ExperimentSpec& spec,
                                       const std::string& id_label, const std::string& ood_label, std::size_t seq_len) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto layout = spec.axis_split ? ood::MetricLayout::AxisSplit : ood::MetricLayout::Pooled;
  auto relayout = [&](const std::vector<ood::MetricGroupVector>& v) {
    if (spec.axis_split) return v;
    std::vector<ood::MetricGroupVector> out;
    out.reserve(v.size());
    for (const auto& x : v) out.push_back(ood::pool_axes(x));
    return out;
  };
  const auto fit_stats = relayout(sets.fit);
  const auto id_stats = relayout(sets.id_test);
  const auto ood_stats = relayout(sets.ood);

  EvalReport r;
  r.method = spec.method.empty() ? detail::default_method(spec.axis_split) : spec.method;
  r.id_label = id_label;
  r.ood_label = ood_label;
  r.metric_dim = ood::metric_dim(layout);
  r.n_fit = fit_stats.size();
  r.n_id_test = id_stats.size();
  r.n_ood = ood_stats.size();
  r.density = ood::fit_density(fit_stats, spec.components, spec.seed);
  r.threshold = r.density.threshold;
  r.id_scores = ood::log_likelihoods(r.density, id_stats);
  r.ood_scores = ood::log_likelihoods(r.density, ood_stats);
  for (double v : r.id_scores) r.id_flagged += v < r.threshold;
  for (double v : r.ood_scores) r.ood_flagged += v < r.threshold;
  r.auroc = auroc(r.id_scores, r.ood_scores);

  const auto names = ood::metric_names(layout);
  for (std::size_t j = 0; j < names.size(); ++j) {
    eval::HistogramInput in{names[j], {{id_label, {}}, {ood_label, {}}}};
    for (const auto& v : id_stats) in.groups[0].second.push_back(v.values[j]);
    for (const auto& v : ood_stats) in.groups[1].second.push_back(v.values[j]);
    r.metric_histograms.push_back(make_histogram(in, spec.histogram_bins));
  }
  const char* axes[] = {"eps_rot_x", "eps_rot_y", "eps_rot_z"};
  for (int a = 0; a < 3; ++a) {
    r.eps_histograms.push_back(
        make_histogram({axes[a], {{id_label, sets.id_eps.rot[a]}, {ood_label, sets.ood_eps.rot[a]}}}, spec.histogram_bins));
  }
  r.eps_histograms.push_back(
      make_histogram({"eps_trans", {{id_label, sets.id_eps.trans}, {ood_label, sets.ood_eps.trans}}}, spec.histogram_bins));

  r.config = {{"steps", std::to_string(s.T)},
              {"beta_min", detail::fmt(s.beta.front())},
              {"beta_max", detail::fmt(s.beta.back())},
              {"seq_len", std::to_string(seq_len)},
              {"seed", std::to_string(spec.seed)},
              {"axis_split", spec.axis_split ? "true" : "false"},
              {"components", std::to_string(spec.components)},
              {"fit_fraction", detail::fmt(spec.fit_fraction)}};
  if (!spec.checkpoint.empty()) r.config["checkpoint"] = spec.checkpoint;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Fits the density on a seeded share of the ID windows, scores the remaining
/// ID windows and every OOD window, and reports the AUROC with histograms.
inline EvalReport run_experiment(const nn::EstimatorModel& model, const ExperimentData& data, const NoiseSchedule& s,
                                 const ExperimentSpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!(spec.fit_fraction > 0.0 && spec.fit_fraction < 1.0)) throw Error(ErrorKind::ConfigError, "fit fraction must be in (0, 1)");
  const auto sets = compute_metric_sets(model, data, s, spec);
  EvalReport r = evaluate_metric_sets(sets, s, spec, data.id_label, data.ood_label, data.id[0].size());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string dataset_label(const data::WindowedDataset& ds, const std::string& path) {
  if (!ds.labels.empty() && std::all_of(ds.labels.begin(), ds.labels.end(), [&](const auto& l) { return l == ds.labels[0]; }) &&
      !ds.labels[0].empty()) {
    return ds.labels[0];
  }
  return data::detail::stem_of(path);
}

/// File-based experiment: loads the checkpoint and both datasets.
inline EvalReport run_experiment(const ExperimentSpec& spec) {
  if (spec.id_data == spec.ood_data) throw Error(ErrorKind::ConfigError, "ID and OOD datasets must differ");
  const auto model = nn::load_checkpoint(spec.checkpoint);
  const auto id = data::load_dataset(spec.id_data);
  const auto od = data::load_dataset(spec.ood_data);
  if (id.length != od.length) throw Error(ErrorKind::ShapeError, "ID and OOD window lengths differ");
  if (spec.seq_len != 0 && spec.seq_len != id.length) {
    throw Error(ErrorKind::ShapeError, "datasets hold windows of length " + std::to_string(id.length) + ", requested " +
                                           std::to_string(spec.seq_len));
  }
  ScheduleConfig sc = model.schedule;
  if (spec.steps != 0) sc.steps = spec.steps;
  const auto s = make_schedule(sc);
  std::string id_label = dataset_label(id, spec.id_data), ood_label = dataset_label(od, spec.ood_data);
  if (id_label == ood_label) ood_label += " (ood)";
  return run_experiment(model, {id.windows, od.windows, id_label, ood_label}, s, spec);
}

// --- report emission --------------------------------------------------------

enum class ReportFormat { Markdown, Csv, JsonLines };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "markdown" || s == "md") return ReportFormat::Markdown;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "json-lines" || s == "jsonl") return ReportFormat::JsonLines;
  throw Error(ErrorKind::ConfigError, "unknown report format '" + s + "' (markdown, csv, json-lines)");
}

inline ReportFormat report_format_for(const std::string& path) {
  const auto ext = path.substr(std::min(path.size(), path.find_last_of('.') == std::string::npos ? path.size() : path.find_last_of('.')));
  if (ext == ".csv") return ReportFormat::Csv;
  if (ext == ".jsonl" || ext == ".json") return ReportFormat::JsonLines;
  return ReportFormat::Markdown;
}

namespace detail {

struct Table {
  std::vector<std::string> pairs;                       // "ID/OOD" in first-seen order
  std::vector<std::string> methods;                     // first-seen order
  std::map<std::pair<std::string, std::string>, double> cell;
  std::map<std::string, int> dims;
};

inline Table tabulate(std::span<const EvalReport> reports) {
  Table t;
  for (const auto& r : reports) {
    const std::string pair = r.id_label + "/" + r.ood_label;
    if (std::find(t.pairs.begin(), t.pairs.end(), pair) == t.pairs.end()) t.pairs.push_back(pair);
    if (std::find(t.methods.begin(), t.methods.end(), r.method) == t.methods.end()) t.methods.push_back(r.method);
    t.cell[{r.method, pair}] = r.auroc;
    t.dims[r.method] = r.metric_dim;
  }
  return t;
}

}  // namespace detail

/// Deterministic serialization (no timings). Markdown and CSV lay out methods
/// as rows and ID/OOD pairs as columns; JSON lines hold one object per run.
inline std::string format_report(std::span<const EvalReport> reports, ReportFormat format) {
  std::ostringstream o;
  const auto t = detail::tabulate(reports);
  switch (format) {
    case ReportFormat::Markdown: {
      o << "| Method |";
      for (const auto& p : t.pairs) o << ' ' << p << " |";
      o << "\n|---|";
      for (std::size_t i = 0; i < t.pairs.size(); ++i) o << "---|";
      o << '\n';
      for (const auto& m : t.methods) {
        o << "| " << m << " |";
        for (const auto& p : t.pairs) {
          auto it = t.cell.find({m, p});
          o << ' ' << (it == t.cell.end() ? "-" : detail::fmt(it->second, "%.3f")) << " |";
        }
        o << '\n';
      }
      break;
    }
    case ReportFormat::Csv: {
      o << "method,metric_dim";
      for (const auto& p : t.pairs) o << ',' << p;
      o << '\n';
      for (const auto& m : t.methods) {
        o << m << ',' << t.dims.at(m);
        for (const auto& p : t.pairs) {
          auto it = t.cell.find({m, p});
          o << ',' << (it == t.cell.end() ? "" : detail::fmt(it->second, "%.6f"));
        }
        o << '\n';
      }
      break;
    }
    case ReportFormat::JsonLines: {
      for (const auto& r : reports) {
        nlohmann::ordered_json j;
        j["method"] = r.method;
        j["id"] = r.id_label;
        j["ood"] = r.ood_label;
        j["auroc"] = r.auroc;
        j["metric_dim"] = r.metric_dim;
        j["n_fit"] = r.n_fit;
        j["n_id_test"] = r.n_id_test;
        j["n_ood"] = r.n_ood;
        j["threshold"] = r.threshold;
        j["id_flagged"] = r.id_flagged;
        j["ood_flagged"] = r.ood_flagged;
        j["config"] = r.config;
        o << j.dump() << '\n';
      }
      break;
    }
  }
  return o.str();
}

inline void emit_report(std::span<const EvalReport> reports, const std::string& path, ReportFormat format) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f << format_report(reports, format);
  if (!f) throw Error(ErrorKind::IoError, "write failed: " + path);
}

}  // namespace dose3::eval
