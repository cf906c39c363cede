#pragma once

// Metric-group statistics of the noise estimator along the forward diffusion
// path, a Gaussian-mixture density over them, and likelihood scoring.
//
// Layout of a metric-group vector (axis split, 24 values):
//   [ rot-x | rot-y | rot-z | trans ], each block holding
//   sum_t <e>_1, sum_t <e>_2, sum_t <e>_3, sum_t <de>_1, sum_t <de>_2, sum_t <de>_3
// where <x>_p is the mean p-th power over the block's values at step t and
// de = e(x_{t+1}, t+1) - e(x_t, t), both diffused with the noise drawn for t.
// Rotation blocks average over the L positions of one tangent axis, the
// translation block over all 3L components. Without the axis split the three
// rotation axes form one block of 3L values (12 values in total).

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dose3/container.hpp"
#include "dose3/diffusion.hpp"
#include "dose3/error.hpp"
#include "dose3/nn/unet.hpp"
#include "dose3/pose.hpp"
#include "dose3/rng.hpp"

namespace dose3::ood {

enum class MetricLayout : std::int64_t { AxisSplit = 0, Pooled = 1 };

inline int metric_dim(MetricLayout layout) { return layout == MetricLayout::AxisSplit ? 24 : 12; }

inline std::string block_name(MetricLayout layout, int block) {
  static const char* split[] = {"rot_x", "rot_y", "rot_z", "trans"};
  static const char* pooled[] = {"rot", "trans"};
  return layout == MetricLayout::AxisSplit ? split[block] : pooled[block];
}

/// Column names such as "rot_x_e1" or "trans_de3".
inline std::vector<std::string> metric_names(MetricLayout layout) {
  std::vector<std::string> out;
  for (int b = 0; b < metric_dim(layout) / 6; ++b)
    for (const char* kind : {"e", "de"})
      for (int p = 1; p <= 3; ++p) out.push_back(block_name(layout, b) + "_" + kind + std::to_string(p));
  return out;
}

struct MetricGroupVector {
  MetricLayout layout = MetricLayout::AxisSplit;
  std::vector<double> values;
};

/// Mean of p-th powers, p in {1, 2, 3}.
inline double moment(std::span<const double> x, int p) {
  if (x.empty()) throw Error(ErrorKind::EmptyInput, "moment of an empty list");
  if (p < 1 || p > 3) throw Error(ErrorKind::ConfigError, "moment power must be 1, 2 or 3");
  double s = 0.0;
  for (double v : x) s += p == 1 ? v : (p == 2 ? v * v : v * v * v);
  return s / static_cast<double>(x.size());
}

/// Noise estimator over a batch of diffused windows at the given steps.
using Estimator = std::function<std::vector<ScoreWindow>(std::span<const DiffusedWindow>, std::span<const int>)>;

inline Estimator model_estimator(const nn::EstimatorModel& model, int max_batch = 32) {
  return [&model, max_batch](std::span<const DiffusedWindow> w, std::span<const int> t) {
    return nn::predict(model, w, t, max_batch);
  };
}

/// Optional capture of raw estimator outputs (rotation tangent x, y, z and
/// pooled translation components) over all steps.
struct RawEpsSink {
  std::vector<double> rot[3];
  std::vector<double> trans;
};

namespace detail {

// Per block, the values of one window's estimator output.
inline void block_values(const ScoreWindow& e, MetricLayout layout, std::vector<std::vector<double>>& blocks) {
  const std::size_t len = e.trans.size();
  const int nb = metric_dim(layout) / 6;
  blocks.assign(nb, {});
  if (layout == MetricLayout::AxisSplit) {
    for (int a = 0; a < 3; ++a) {
      blocks[a].resize(len);
      for (std::size_t l = 0; l < len; ++l) blocks[a][l] = e.rot[l][a];
    }
  } else {
    blocks[0].reserve(3 * len);
    for (std::size_t l = 0; l < len; ++l)
      for (int a = 0; a < 3; ++a) blocks[0].push_back(e.rot[l][a]);
  }
  auto& tr = blocks[nb - 1];
  tr.reserve(3 * len);
  for (std::size_t l = 0; l < len; ++l)
    for (int a = 0; a < 3; ++a) tr.push_back(e.trans[l][a]);
}

inline ScoreWindow difference(const ScoreWindow& a, const ScoreWindow& b) {
  ScoreWindow d{a.trans, a.rot};
  for (std::size_t l = 0; l < d.trans.size(); ++l) {
    d.trans[l] -= b.trans[l];
    d.rot[l] -= b.rot[l];
  }
  return d;
}

inline void accumulate(std::vector<double>& out, const ScoreWindow& e, int offset, MetricLayout layout,
                       std::vector<std::vector<double>>& scratch) {
  block_values(e, layout, scratch);
  for (std::size_t b = 0; b < scratch.size(); ++b)
    for (int p = 1; p <= 3; ++p) out[6 * b + offset + p - 1] += moment(scratch[b], p);
}

}  // namespace detail

/// Metric groups for a set of windows. Window i draws its noise from
/// rng.split(i), so results do not depend on how windows are batched.
inline std::vector<MetricGroupVector> compute_metric_groups(std::span<const PoseSequence> windows, const Estimator& est,
                                                            const NoiseSchedule& s, const RngState& rng,
                                                            MetricLayout layout = MetricLayout::AxisSplit,
                                                            std::size_t chunk = 16, RawEpsSink* sink = nullptr) {
  const int T = s.T;
  const int dim = metric_dim(layout);
  std::vector<MetricGroupVector> out(windows.size(), MetricGroupVector{layout, std::vector<double>(dim, 0.0)});
  std::vector<std::vector<double>> scratch;
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t n = std::min(chunk, windows.size() - start);
    std::vector<RngState> streams;
    for (std::size_t i = 0; i < n; ++i) streams.push_back(rng.split(start + i));
    std::vector<ScoreWindow> prev_de(n);
    for (int t = 0; t < T; ++t) {
      const bool has_next = t + 1 < T;
      std::vector<DiffusedWindow> batch;
      std::vector<int> steps;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& x0 = windows[start + i];
        const NoisePair noise = sample_noise_pair(x0.size(), streams[i]);
        batch.push_back(diffuse_window(x0, noise, t, s));
        steps.push_back(t);
        if (has_next) {
          batch.push_back(diffuse_window(x0, noise, t + 1, s));
          steps.push_back(t + 1);
        }
      }
      const auto e = est(batch, steps);
      if (e.size() != batch.size()) throw Error(ErrorKind::ShapeError, "estimator returned the wrong number of windows");
      const std::size_t per = has_next ? 2 : 1;
      for (std::size_t i = 0; i < n; ++i) {
        const ScoreWindow& cur = e[per * i];
        auto& v = out[start + i].values;
        detail::accumulate(v, cur, 0, layout, scratch);
        if (has_next) {
          prev_de[i] = detail::difference(e[per * i + 1], cur);
        } else if (T == 1) {
          prev_de[i] = ScoreWindow{std::vector<Vec3>(cur.trans.size()), std::vector<Vec3>(cur.rot.size())};
        }
        detail::accumulate(v, prev_de[i], 3, layout, scratch);
        if (sink) {
          for (std::size_t l = 0; l < cur.rot.size(); ++l)
            for (int a = 0; a < 3; ++a) {
              sink->rot[a].push_back(cur.rot[l][a]);
              sink->trans.push_back(cur.trans[l][a]);
            }
        }
      }
    }
  }
  return out;
}

/// Pooled-layout vector from an axis-split one. Each pooled rotation moment
/// averages 3L values, which is the mean of the three per-axis moments.
inline MetricGroupVector pool_axes(const MetricGroupVector& v) {
  if (v.layout == MetricLayout::Pooled) return v;
  if (v.values.size() != 24) throw Error(ErrorKind::ShapeError, "axis-split metric vector must have 24 values");
  MetricGroupVector out{MetricLayout::Pooled, std::vector<double>(12)};
  for (int k = 0; k < 6; ++k) {
    out.values[k] = (v.values[k] + v.values[6 + k] + v.values[12 + k]) / 3.0;
    out.values[6 + k] = v.values[18 + k];
  }
  return out;
}

inline MetricGroupVector compute_metric_group(const PoseSequence& traj, const Estimator& est, const NoiseSchedule& s,
                                              const RngState& rng, MetricLayout layout = MetricLayout::AxisSplit) {
  return compute_metric_groups(std::span<const PoseSequence>(&traj, 1), est, s, rng, layout).front();
}

// ---------------------------------------------------------------------------

inline constexpr double kCovarianceFloor = 1e-6;
inline constexpr double kEmTolerance = 1e-6;
inline constexpr int kEmMaxIterations = 200;
inline constexpr int kMaxRestarts = 3;
inline constexpr double kThresholdQuantile = 0.05;

struct DensityModel {
  MetricLayout layout = MetricLayout::AxisSplit;
  Eigen::VectorXd feat_mean, feat_std;
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covariances;
  double threshold = -std::numeric_limits<double>::infinity();

  int dim() const { return static_cast<int>(feat_mean.size()); }
  int components() const { return static_cast<int>(weights.size()); }
};

namespace detail {

struct Component {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double log_norm = 0.0;  // log w - 0.5 (d log 2pi + log det)
};

inline std::vector<Component> factorize(const DensityModel& m) {
  std::vector<Component> out;
  const int d = m.dim();
  for (int k = 0; k < m.components(); ++k) {
    Component c;
    c.llt.compute(m.covariances[k]);
    if (c.llt.info() != Eigen::Success) throw Error(ErrorKind::DegenerateFit, "covariance is not positive definite");
    const Eigen::VectorXd diag = c.llt.matrixL().toDenseMatrix().diagonal();
    double logdet = 0.0;
    for (int i = 0; i < d; ++i) logdet += 2.0 * std::log(diag[i]);
    c.log_norm = std::log(m.weights[k]) - 0.5 * (d * std::log(2.0 * std::numbers::pi) + logdet);
    out.push_back(std::move(c));
  }
  return out;
}

inline double component_logpdf(const Component& c, const Eigen::VectorXd& mean, const Eigen::VectorXd& z) {
  const Eigen::VectorXd y = c.llt.matrixL().solve(z - mean);
  return c.log_norm - 0.5 * y.squaredNorm();
}

inline double logsumexp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Standardized-space mixture log-likelihood of each row; `resp` receives
// posterior responsibilities when non-null.
inline Eigen::VectorXd mixture_loglik(const DensityModel& m, const Eigen::MatrixXd& z, Eigen::MatrixXd* resp = nullptr) {
  const auto comps = factorize(m);
  const int n = static_cast<int>(z.rows()), K = m.components();
  Eigen::VectorXd ll(n);
  if (resp) resp->resize(n, K);
  std::vector<double> lp(K);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd zi = z.row(i).transpose();
    for (int k = 0; k < K; ++k) lp[k] = component_logpdf(comps[k], m.means[k], zi);
    ll[i] = logsumexp(lp);
    if (resp)
      for (int k = 0; k < K; ++k) (*resp)(i, k) = std::exp(lp[k] - ll[i]);
  }
  return ll;
}

inline Eigen::MatrixXd weighted_covariance(const Eigen::MatrixXd& z, const Eigen::VectorXd& w, const Eigen::VectorXd& mean,
                                           double total) {
  const Eigen::MatrixXd c = z.rowwise() - mean.transpose();
  Eigen::MatrixXd cov = (c.array().colwise() * w.array()).matrix().transpose() * c / total;
  cov = 0.5 * (cov + cov.transpose());
  cov.diagonal().array() += kCovarianceFloor;
  return cov;
}

// k-means++ seeding followed by EM. Returns false when a component collapses.
inline bool fit_mixture(DensityModel& m, const Eigen::MatrixXd& z, int K, RngState& rng) {
  const int n = static_cast<int>(z.rows()), d = static_cast<int>(z.cols());
  std::vector<int> centres{static_cast<int>(rng.below(n))};
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centres.size()) < K) {
    const Eigen::RowVectorXd c = z.row(centres.back());
    for (int i = 0; i < n; ++i) d2[i] = std::min(d2[i], (z.row(i) - c).squaredNorm());
    const double total = d2.sum();
    int pick = static_cast<int>(rng.below(n));
    if (total > 0) {
      double u = rng.uniform() * total;
      for (int i = 0; i < n; ++i) {
        u -= d2[i];
        if (u <= 0) {
          pick = i;
          break;
        }
      }
    }
    centres.push_back(pick);
  }
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, K);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double dd = (z.row(i) - z.row(centres[k])).squaredNorm();
      if (dd < bd) bd = dd, best = k;
    }
    resp(i, best) = 1.0;
  }
  const double min_mass = std::max(2.0, 0.5 * d / K);
  double prev = -std::numeric_limits<double>::infinity();
  m.weights.assign(K, 0.0);
  m.means.assign(K, Eigen::VectorXd::Zero(d));
  m.covariances.assign(K, Eigen::MatrixXd::Identity(d, d));
  for (int iter = 0; iter < kEmMaxIterations; ++iter) {
    for (int k = 0; k < K; ++k) {
      const double nk = resp.col(k).sum();
      if (nk < min_mass) return false;
      m.weights[k] = nk / n;
      m.means[k] = (z.transpose() * resp.col(k)) / nk;
      m.covariances[k] = weighted_covariance(z, resp.col(k), m.means[k], nk);
    }
    Eigen::VectorXd ll;
    try {
      ll = mixture_loglik(m, z, &resp);
    } catch (const Error&) {
      return false;
    }
    const double mean_ll = ll.mean();
    if (mean_ll - prev < kEmTolerance) break;
    prev = mean_ll;
  }
  return true;
}

}  // namespace detail

inline Eigen::VectorXd standardize(const DensityModel& m, std::span<const double> x) {
  if (static_cast<int>(x.size()) != m.dim()) throw Error(ErrorKind::ShapeError, "feature vector has the wrong dimension");
  Eigen::VectorXd z(m.dim());
  for (int j = 0; j < m.dim(); ++j) z[j] = (x[j] - m.feat_mean[j]) / m.feat_std[j];
  return z;
}

/// Log-likelihood in the original feature space (includes the Jacobian of
/// the standardization).
inline std::vector<double> log_likelihoods(const DensityModel& m, std::span<const MetricGroupVector> xs) {
  Eigen::MatrixXd z(xs.size(), m.dim());
  for (std::size_t i = 0; i < xs.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = standardize(m, xs[i].values).transpose();
  const Eigen::VectorXd ll = detail::mixture_loglik(m, z);
  const double jac = m.feat_std.array().log().sum();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = ll[static_cast<Eigen::Index>(i)] - jac;
  return out;
}

inline double log_likelihood(const DensityModel& m, const MetricGroupVector& x) {
  return log_likelihoods(m, std::span<const MetricGroupVector>(&x, 1)).front();
}

/// Standardizes the features, fits a K-component mixture (closed form for
/// K = 1, EM otherwise) and sets the threshold at the 5th percentile of the
/// fit-set log-likelihoods.
inline DensityModel fit_density(std::span<const MetricGroupVector> stats, int K = 1, std::uint64_t seed = 0) {
  if (K < 1) throw Error(ErrorKind::ConfigError, "need at least one mixture component");
  if (stats.size() < static_cast<std::size_t>(10 * K)) {
    throw Error(ErrorKind::InsufficientData, "need at least " + std::to_string(10 * K) + " samples, got " +
                                                 std::to_string(stats.size()));
  }
  const MetricLayout layout = stats[0].layout;
  const int d = static_cast<int>(stats[0].values.size());
  const int n = static_cast<int>(stats.size());
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(stats[i].values.size()) != d || stats[i].layout != layout) {
      throw Error(ErrorKind::ShapeError, "metric vectors have mixed layouts");
    }
    for (int j = 0; j < d; ++j) {
      if (!std::isfinite(stats[i].values[j])) throw Error(ErrorKind::DegenerateFit, "non-finite metric value");
      x(i, j) = stats[i].values[j];
    }
  }
  DensityModel m;
  m.layout = layout;
  m.feat_mean = x.colwise().mean().transpose();
  m.feat_std.resize(d);
  for (int j = 0; j < d; ++j) {
    const double sd = std::sqrt((x.col(j).array() - m.feat_mean[j]).square().mean());
    m.feat_std[j] = sd > 1e-12 ? sd : 1.0;
  }
  const Eigen::MatrixXd z = (x.rowwise() - m.feat_mean.transpose()).array().rowwise() / m.feat_std.transpose().array();

  if (K == 1) {
    m.weights = {1.0};
    m.means = {z.colwise().mean().transpose()};
    m.covariances = {detail::weighted_covariance(z, Eigen::VectorXd::Ones(n), m.means[0], n)};
  } else {
    RngState rng(seed, 0x474D4D);
    bool ok = false;
    for (int attempt = 0; attempt <= kMaxRestarts && !ok; ++attempt) {
      RngState r = rng.split(static_cast<std::uint64_t>(attempt));
      ok = detail::fit_mixture(m, z, K, r);
    }
    if (!ok) throw Error(ErrorKind::DegenerateFit, "mixture component collapsed after " + std::to_string(kMaxRestarts) + " restarts");
  }
  auto ll = log_likelihoods(m, stats);
  std::sort(ll.begin(), ll.end());
  m.threshold = ll[static_cast<std::size_t>(std::floor(kThresholdQuantile * n))];
  return m;
}

struct ScoreResult {
  double loglik = 0.0;
  bool is_ood = false;
};

inline ScoreResult score_metrics(const DensityModel& m, const MetricGroupVector& x) {
  const double ll = log_likelihood(m, x);
  return {ll, ll < m.threshold};
}

/// Metric group of `q` under the estimator, scored against the density.
inline ScoreResult score(const PoseSequence& q, const Estimator& est, const DensityModel& density, const NoiseSchedule& s,
                         const RngState& rng) {
  return score_metrics(density, compute_metric_group(q, est, s, rng, density.layout));
}

// --- persistence (container magic "DOSE3GMM") -------------------------------

inline constexpr const char* kDensityMagic = "DOSE3GMM";

inline void save_density(const DensityModel& m, const std::string& path) {
  const auto d = static_cast<std::uint32_t>(m.dim());
  const auto K = static_cast<std::uint32_t>(m.components());
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  std::vector<double> means, covs;
  for (std::uint32_t k = 0; k < K; ++k) {
    const auto mv = vec(m.means[k]);
    means.insert(means.end(), mv.begin(), mv.end());
    for (std::uint32_t r = 0; r < d; ++r)
      for (std::uint32_t c = 0; c < d; ++c) covs.push_back(m.covariances[k](r, c));
  }
  io::write_container(path, kDensityMagic,
                      {io::i64_entry("layout", {static_cast<std::int64_t>(m.layout)}),
                       io::f64_entry("weights", {K}, m.weights), io::f64_entry("means", {K, d}, means),
                       io::f64_entry("covariances", {K, d, d}, covs), io::f64_entry("feat_mean", {d}, vec(m.feat_mean)),
                       io::f64_entry("feat_std", {d}, vec(m.feat_std)), io::f64_entry("threshold", {1}, {m.threshold})});
}

inline DensityModel load_density(const std::string& path) {
  const auto e = io::read_container(path, kDensityMagic);
  auto get = [&](const std::string& k) -> const io::Entry& {
    auto it = e.find(k);
    if (it == e.end()) throw Error(ErrorKind::ChecksumError, "density file is missing '" + k + "'");
    return it->second;
  };
  DensityModel m;
  m.layout = static_cast<MetricLayout>(io::entry_values<std::int64_t>(get("layout"), io::DType::I64).at(0));
  m.weights = io::entry_values<double>(get("weights"), io::DType::F64);
  const auto fm = io::entry_values<double>(get("feat_mean"), io::DType::F64);
  const auto fs = io::entry_values<double>(get("feat_std"), io::DType::F64);
  const auto means = io::entry_values<double>(get("means"), io::DType::F64);
  const auto covs = io::entry_values<double>(get("covariances"), io::DType::F64);
  const std::size_t d = fm.size(), K = m.weights.size();
  if (fs.size() != d || means.size() != K * d || covs.size() != K * d * d) {
    throw Error(ErrorKind::ShapeError, "density file has inconsistent sizes");
  }
  m.feat_mean = Eigen::Map<const Eigen::VectorXd>(fm.data(), static_cast<Eigen::Index>(d));
  m.feat_std = Eigen::Map<const Eigen::VectorXd>(fs.data(), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < K; ++k) {
    m.means.push_back(Eigen::Map<const Eigen::VectorXd>(means.data() + k * d, static_cast<Eigen::Index>(d)));
    Eigen::MatrixXd c(d, d);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t cc = 0; cc < d; ++cc) c(r, cc) = covs[k * d * d + r * d + cc];
    m.covariances.push_back(std::move(c));
  }
  m.threshold = io::entry_values<double>(get("threshold"), io::DType::F64).at(0);
  return m;
}

/// Statistics cache: header, one row per window with the metric columns and
/// the source label.
inline void write_metrics_csv(const std::string& path, std::span<const MetricGroupVector> stats,
                              std::span<const std::string> labels) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  const MetricLayout layout = stats.empty() ? MetricLayout::AxisSplit : stats[0].layout;
  for (const auto& n : metric_names(layout)) f << n << ',';
  f << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < stats.size(); ++i) {
    for (double v : stats[i].values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      f << buf << ',';
    }
    f << (i < labels.size() ? labels[i] : std::string()) << '\n';
  }
}

}  // namespace dose3::ood
