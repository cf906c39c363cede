#pragma once

// Denoising training on pose windows: diffuse a batch at random steps,
// predict the injected noise, reconstruct x0 and minimize the sum of four
// terms (x0 and noise, each for translation and rotation).
//
// Translation terms are mean absolute errors over every component. Rotation
// terms are mean squared geodesic angles, one per pose. The noise rotation
// term compares exp(score) with exp(noise). Loss gradients with respect to
// the network output are computed outside the tape (rotations through
// forward-mode duals) and then pushed through the network.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dose3/diffusion.hpp"
#include "dose3/dual.hpp"
#include "dose3/error.hpp"
#include "dose3/lie.hpp"
#include "dose3/nn/checkpoint.hpp"
#include "dose3/nn/optim.hpp"
#include "dose3/nn/unet.hpp"
#include "dose3/pose.hpp"
#include "dose3/rng.hpp"

namespace dose3 {

struct LossWeights {
  double x0_trans = 1.0;
  double x0_rot = 1.0;
  double eps_trans = 1.0;
  double eps_rot = 1.0;
};

struct LossComponents {
  double x0_trans = 0.0;
  double x0_rot = 0.0;
  double eps_trans = 0.0;
  double eps_rot = 0.0;

  double total(const LossWeights& w = {}) const {
    return w.x0_trans * x0_trans + w.x0_rot * x0_rot + w.eps_trans * eps_trans + w.eps_rot * eps_rot;
  }
  bool finite() const {
    return std::isfinite(x0_trans) && std::isfinite(x0_rot) && std::isfinite(eps_trans) && std::isfinite(eps_rot);
  }
  LossComponents& operator+=(const LossComponents& o) {
    x0_trans += o.x0_trans;
    x0_rot += o.x0_rot;
    eps_trans += o.eps_trans;
    eps_rot += o.eps_rot;
    return *this;
  }
  LossComponents& operator/=(double k) {
    x0_trans /= k;
    x0_rot /= k;
    eps_trans /= k;
    eps_rot /= k;
    return *this;
  }
};

namespace detail {

using D3 = Dual<3>;

inline BasicMat3<D3> lift(const Matrix3& m) {
  BasicMat3<D3> r;
  for (int i = 0; i < 9; ++i) r.m[i] = D3(m.m[i]);
  return r;
}

inline D3 squared_norm(const BasicVec3<D3>& v) { return dot(v, v); }

struct RotLoss {
  double value = 0.0;
  Vec3 grad;
};

inline RotLoss from_dual(const D3& d) { return {d.v, {d.d[0], d.d[1], d.d[2]}}; }

inline BasicVec3<D3> dual_variable(const Vec3& s) {
  return {D3::variable(s.x, 0), D3::variable(s.y, 1), D3::variable(s.z, 2)};
}

// |log(exp(s)^T exp(z))|^2 and its gradient in s.
inline RotLoss eps_rot_loss(const Vec3& score, const Vec3& noise) {
  const auto es = so3::exp_map(dual_variable(score));
  const auto ez = lift(so3::exp_map(noise));
  try {
    return from_dual(squared_norm(so3::log_map(so3::multiply(so3::transpose(es), ez))));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NearAntipodal) throw;
    return {std::numbers::pi * std::numbers::pi, {}};
  }
}

// |log(r0^T x0_hat)|^2 with x0_hat = scale(1/sqrt(ab), rt exp(-sqrt(1-ab) s)).
inline RotLoss x0_rot_loss(const Vec3& score, const RotationMatrix& rt, const RotationMatrix& r0, double ab) {
  try {
    const auto noise = so3::exp_map(dual_variable(score) * (-std::sqrt(1.0 - ab)));
    const auto inner = so3::multiply(lift(rt.matrix()), noise);
    const auto x0_hat = so3::exp_map(so3::log_map(inner) * (1.0 / std::sqrt(ab)));
    return from_dual(squared_norm(so3::log_map(so3::multiply(lift(so3::transpose(r0.matrix())), x0_hat))));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NearAntipodal) throw;
    return {std::numbers::pi * std::numbers::pi, {}};
  }
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Losses for a batch given the estimator's predictions. When `grads` is
/// non-null it receives d(weighted total)/d(prediction) per window.
inline LossComponents compute_losses(std::span<const PoseSequence> x0, std::span<const NoisePair> noise,
                                     std::span<const DiffusedWindow> xt, std::span<const int> steps,
                                     std::span<const ScoreWindow> pred, const NoiseSchedule& s,
                                     const LossWeights& w = {}, std::vector<ScoreWindow>* grads = nullptr) {
  const std::size_t batch = x0.size();
  if (noise.size() != batch || xt.size() != batch || steps.size() != batch || pred.size() != batch) {
    throw Error(ErrorKind::ShapeError, "batch components have different sizes");
  }
  if (batch == 0) throw Error(ErrorKind::EmptyInput, "empty batch");
  const std::size_t len = x0[0].size();
  if (grads) grads->assign(batch, ScoreWindow{std::vector<Vec3>(len), std::vector<Vec3>(len)});
  const double n_trans = static_cast<double>(batch * len * 3);
  const double n_rot = static_cast<double>(batch * len);
  LossComponents out;
  for (std::size_t b = 0; b < batch; ++b) {
    if (x0[b].size() != len || pred[b].trans.size() != len || pred[b].rot.size() != len || xt[b].trans.size() != len ||
        xt[b].rot.size() != len || noise[b].eps_trans.size() != len || noise[b].eps_rot_tangent.size() != len) {
      throw Error(ErrorKind::ShapeError, "window lengths differ within the batch");
    }
    const int t = steps[b];
    detail::check_step(t, s);
    const double ab = s.alpha_bar[t];
    detail::check_alpha_bar(ab);
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab);
    const double sqrt_1mab = std::sqrt(1.0 - ab);
    for (std::size_t l = 0; l < len; ++l) {
      const Vec3& st = pred[b].trans[l];
      const Vec3& sr = pred[b].rot[l];
      for (int c = 0; c < 3; ++c) {
        const double de = st[c] - noise[b].eps_trans[l][c];
        const double x0_hat = inv_sqrt_ab * (xt[b].trans[l][c] - sqrt_1mab * st[c]);
        const double dx = x0_hat - x0[b].translations[l][c];
        out.eps_trans += std::abs(de);
        out.x0_trans += std::abs(dx);
        if (grads) {
          (*grads)[b].trans[l][c] = (w.eps_trans * detail::sign(de) - w.x0_trans * detail::sign(dx) * sqrt_1mab * inv_sqrt_ab) / n_trans;
        }
      }
      const auto le = detail::eps_rot_loss(sr, noise[b].eps_rot_tangent[l]);
      const auto lx = detail::x0_rot_loss(sr, xt[b].rot[l], x0[b].rotations[l], ab);
      out.eps_rot += le.value;
      out.x0_rot += lx.value;
      if (grads) (*grads)[b].rot[l] = (w.eps_rot * le.grad + w.x0_rot * lx.grad) / n_rot;
    }
  }
  out.eps_trans /= n_trans;
  out.x0_trans /= n_trans;
  out.eps_rot /= n_rot;
  out.x0_rot /= n_rot;
  return out;
}

/// Network output [6, B, L] unpacked into per-window predictions.
inline std::vector<ScoreWindow> unpack_scores(const nn::Tensor& y) {
  const int batch = y.dim(1), len = y.dim(2);
  std::vector<ScoreWindow> out(batch, ScoreWindow{std::vector<Vec3>(len), std::vector<Vec3>(len)});
  for (int b = 0; b < batch; ++b)
    for (int l = 0; l < len; ++l)
      for (int c = 0; c < 3; ++c) {
        out[b].trans[l][c] = y.data[(static_cast<std::size_t>(c) * batch + b) * len + l];
        out[b].rot[l][c] = y.data[(static_cast<std::size_t>(c + 3) * batch + b) * len + l];
      }
  return out;
}

inline std::vector<float> pack_scores(std::span<const ScoreWindow> g) {
  const std::size_t batch = g.size(), len = batch ? g[0].trans.size() : 0;
  std::vector<float> out(6 * batch * len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < len; ++l)
      for (int c = 0; c < 3; ++c) {
        out[(c * batch + b) * len + l] = static_cast<float>(g[b].trans[l][c]);
        out[((c + 3) * batch + b) * len + l] = static_cast<float>(g[b].rot[l][c]);
      }
  return out;
}

inline std::vector<DiffusedWindow> diffuse_batch(std::span<const PoseSequence> x0, std::span<const NoisePair> noise,
                                                 std::span<const int> steps, const NoiseSchedule& s) {
  std::vector<DiffusedWindow> out;
  out.reserve(x0.size());
  for (std::size_t b = 0; b < x0.size(); ++b) out.push_back(diffuse_window(x0[b], noise[b], steps[b], s));
  return out;
}

/// Loss of the model on a fixed batch, noise and steps, without updating.
inline LossComponents evaluate_loss(const nn::EstimatorModel& model, std::span<const PoseSequence> x0,
                                    std::span<const NoisePair> noise, std::span<const int> steps, const NoiseSchedule& s,
                                    const LossWeights& w = {}) {
  const auto xt = diffuse_batch(x0, noise, steps, s);
  const auto pred = nn::predict(model, xt, steps);
  return compute_losses(x0, noise, xt, steps, pred, s, w);
}

struct StepResult {
  LossComponents loss;
  bool updated = false;  // false when the loss was non-finite and the update was skipped
};

/// One optimizer step: sample noise, diffuse, predict, backpropagate the
/// weighted loss and apply Adam. Non-finite losses skip the update.
inline StepResult training_step(nn::EstimatorModel& model, nn::Adam& opt, std::span<const PoseSequence> batch,
                                std::span<const int> steps, RngState& rng, const NoiseSchedule& s,
                                const LossWeights& w = {}) {
  if (batch.empty()) throw Error(ErrorKind::EmptyInput, "empty batch");
  if (steps.size() != batch.size()) throw Error(ErrorKind::ShapeError, "one timestep per batch item");
  std::vector<NoisePair> noise;
  noise.reserve(batch.size());
  for (const auto& x : batch) noise.push_back(sample_noise_pair(x.size(), rng));
  const auto xt = diffuse_batch(batch, noise, steps, s);

  model.zero_grad();
  nn::Tape tape(true);
  nn::Var x = tape.constant(nn::detail::encode_windows(xt));
  nn::Var y = nn::unet_forward(tape, model, x, steps);
  const auto pred = unpack_scores(tape.value(y));
  std::vector<ScoreWindow> grads;
  StepResult r;
  r.loss = compute_losses(batch, noise, xt, steps, pred, s, w, &grads);
  if (!r.loss.finite()) return r;
  tape.backward(y, pack_scores(grads));
  for (const auto& p : model.params)
    for (float g : p.grad)
      if (!std::isfinite(g)) return r;
  opt.step(model.params);
  r.updated = true;
  return r;
}

struct TrainConfig {
  int batch_size = 8;
  nn::AdamConfig adam;
  int epochs = 10;
  std::uint64_t seed = 0;
  ScheduleConfig schedule;
  LossWeights weights;
  std::string checkpoint_path;  // written after every epoch when non-empty
  std::function<void(int epoch, const LossComponents& mean, double seconds)> on_epoch;

  void validate() const {
    if (batch_size < 1) throw Error(ErrorKind::ConfigError, "batch size must be >= 1");
    // lr = 0 is accepted: it freezes the parameters while still reporting losses.
    if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw Error(ErrorKind::ConfigError, "learning rate must be finite and >= 0");
    if (epochs < 0) throw Error(ErrorKind::ConfigError, "epochs must be >= 0");
  }
};

struct EpochRecord {
  int epoch = 0;
  LossComponents mean;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::int64_t steps = 0;
  std::string checkpoint_path;
};

inline constexpr int kMaxNonFiniteSteps = 3;

namespace detail {
inline std::uint64_t step_stream(std::int64_t epoch, std::int64_t step) {
  return mix64(0x7452'4149'4E00ULL ^ (static_cast<std::uint64_t>(epoch) << 32) ^ static_cast<std::uint64_t>(step));
}
}  // namespace detail

/// Epoch-wise minibatch training. Shuffling and per-step noise derive from
/// (seed, epoch, step), so a run resumed from a per-epoch checkpoint with its
/// optimizer state reproduces the uninterrupted run.
inline TrainReport train(nn::EstimatorModel& model, std::span<const PoseSequence> dataset, const TrainConfig& cfg,
                         const nn::TrainingState* resume = nullptr) {
  cfg.validate();
  if (dataset.empty()) throw Error(ErrorKind::ConfigError, "training dataset is empty");
  const std::size_t len = dataset[0].size();
  for (const auto& w : dataset)
    if (w.size() != len) throw Error(ErrorKind::ConfigError, "training windows have different lengths");
  model.arch.validate_length(static_cast<int>(len));
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  model.schedule = cfg.schedule;

  nn::Adam opt(cfg.adam);
  int start_epoch = 0;
  if (resume != nullptr) {
    opt.restore(resume->adam_step, resume->m, resume->v);
    start_epoch = static_cast<int>(resume->epoch);
  }

  TrainReport report;
  report.checkpoint_path = cfg.checkpoint_path;
  const auto t_start = std::chrono::steady_clock::now();
  int bad_streak = 0;
  std::vector<std::size_t> order(dataset.size());
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngState shuffle(cfg.seed, detail::step_stream(epoch, -1));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    LossComponents sum;
    int counted = 0;
    std::int64_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<PoseSequence> batch;
      batch.reserve(n);
      for (std::size_t i = 0; i < n; ++i) batch.push_back(dataset[order[start + i]]);
      RngState rng(cfg.seed, detail::step_stream(epoch, step));
      std::vector<int> steps(n);
      for (auto& t : steps) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
      const auto r = training_step(model, opt, batch, steps, rng, sched, cfg.weights);
      ++report.steps;
      if (!r.updated) {
        if (++bad_streak >= kMaxNonFiniteSteps) {
          throw Error(ErrorKind::DivergenceError,
                      "non-finite loss for " + std::to_string(bad_streak) + " consecutive steps at epoch " +
                          std::to_string(epoch) + ", step " + std::to_string(step) + " (x0_trans=" +
                          std::to_string(r.loss.x0_trans) + ", x0_rot=" + std::to_string(r.loss.x0_rot) +
                          ", eps_trans=" + std::to_string(r.loss.eps_trans) + ", eps_rot=" + std::to_string(r.loss.eps_rot) + ")");
        }
        continue;
      }
      bad_streak = 0;
      sum += r.loss;
      ++counted;
    }
    if (counted > 0) sum /= counted;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    report.epochs.push_back({epoch, sum, secs});
    if (!cfg.checkpoint_path.empty()) {
      nn::TrainingState st{opt.step_count(), epoch + 1, opt.first_moments(), opt.second_moments()};
      nn::save_checkpoint(model, cfg.checkpoint_path, &st);
    }
    if (cfg.on_epoch) cfg.on_epoch(epoch, sum, secs);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

/// Training curve as CSV: epoch, loss_x0_trans, loss_x0_rot, loss_eps_trans, loss_eps_rot.
inline void write_train_curve(const TrainReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f << "epoch,loss_x0_trans,loss_x0_rot,loss_eps_trans,loss_eps_rot\n";
  f.precision(10);
  for (const auto& e : report.epochs) {
    f << e.epoch << ',' << e.mean.x0_trans << ',' << e.mean.x0_rot << ',' << e.mean.eps_trans << ',' << e.mean.eps_rot
      << '\n';
  }
}

// ---------------------------------------------------------------------------
// Variational bound (translation channels only), reported as a diagnostic.

struct ElboBreakdown {
  double prior = 0.0;        // KL(q(x_last | x0) || N(0, I))
  double transitions = 0.0;  // sum of per-step posterior KLs
  double decoder = 0.0;      // -log p(x0 | x at step 0)
  double elbo_per_dim = 0.0; // -(prior + transitions + decoder) / (3 L), nats
};

/// Monte Carlo estimate with `samples` draws of the diffused states. Each
/// draw evaluates the estimator once per step.
inline ElboBreakdown elbo_diagnostic(const PoseSequence& x0, const nn::EstimatorModel& model, const NoiseSchedule& s,
                                     RngState& rng, int samples = 1) {
  if (x0.size() == 0) throw Error(ErrorKind::EmptyInput, "empty window");
  if (samples < 1) throw Error(ErrorKind::ConfigError, "samples must be >= 1");
  const std::size_t len = x0.size();
  const double dims = 3.0 * static_cast<double>(len);
  const int T = s.T;
  ElboBreakdown out;

  const double ab_last = s.alpha_bar[T - 1];
  for (std::size_t l = 0; l < len; ++l)
    for (int c = 0; c < 3; ++c) {
      const double m = std::sqrt(ab_last) * x0.translations[l][c];
      out.prior += 0.5 * ((1.0 - ab_last) + m * m - 1.0 - std::log(1.0 - ab_last));
    }

  for (int k = 0; k < samples; ++k) {
    std::vector<PoseSequence> xs(T, x0);
    std::vector<NoisePair> noise;
    std::vector<int> steps(T);
    for (int t = 0; t < T; ++t) {
      noise.push_back(sample_noise_pair(len, rng));
      steps[t] = t;
    }
    const auto xt = diffuse_batch(xs, noise, steps, s);
    const auto pred = nn::predict(model, xt, steps);
    for (int t = 1; t < T; ++t) {
      const auto c = posterior_coefficients(t, s);
      const double var_q = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
      const double var_p = s.beta[t];
      const double k_eps = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
      const double inv_sqrt_a = 1.0 / std::sqrt(s.alpha[t]);
      double kl = 0.0;
      for (std::size_t l = 0; l < len; ++l)
        for (int ch = 0; ch < 3; ++ch) {
          const double mq = c.x0 * x0.translations[l][ch] + c.xt * xt[t].trans[l][ch];
          const double mp = inv_sqrt_a * (xt[t].trans[l][ch] - k_eps * pred[t].trans[l][ch]);
          const double d = mq - mp;
          kl += 0.5 * (std::log(var_p / var_q) + (var_q + d * d) / var_p - 1.0);
        }
      out.transitions += kl / samples;
    }
    const double var_d = s.beta[0] / s.alpha[0];
    double nll = 0.0;
    for (std::size_t l = 0; l < len; ++l)
      for (int ch = 0; ch < 3; ++ch) {
        const double mean = (xt[0].trans[l][ch] - std::sqrt(1.0 - s.alpha_bar[0]) * pred[0].trans[l][ch]) /
                            std::sqrt(s.alpha_bar[0]);
        const double d = x0.translations[l][ch] - mean;
        nll += 0.5 * (std::log(2.0 * std::numbers::pi * var_d) + d * d / var_d);
      }
    out.decoder += nll / samples;
  }
  out.elbo_per_dim = -(out.prior + out.transitions + out.decoder) / dims;
  return out;
}

}  // namespace dose3
