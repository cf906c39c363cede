#pragma once

// Noise schedule and the closed-form DDPM equations for the product space
// R^3 x SO(3). Translations follow the Euclidean forward/reverse process;
// rotations use the same coefficients through compose (R1 * R2) and
// geodesic_scale (exp(k log R)).
//
// Step indices run over [0, T-1]; alpha_bar[t] is the cumulative product
// through step t, so even t = 0 carries a small amount of noise.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dose3/error.hpp"
#include "dose3/igso3.hpp"
#include "dose3/lie.hpp"
#include "dose3/pose.hpp"
#include "dose3/rng.hpp"

namespace dose3 {

struct ScheduleConfig {
  int steps = 30;
  double beta_min = 1e-4;
  double beta_max = 0.2;
};

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;  // reverse-step std-dev, sqrt(beta)
};

/// Linear beta grid from beta_min to beta_max.
inline NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw Error(ErrorKind::InvalidSchedule, "T must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw Error(ErrorKind::InvalidSchedule, "need 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
    s.beta[t] = beta_min + frac * (beta_max - beta_min);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  return s;
}

inline NoiseSchedule make_schedule(const ScheduleConfig& c) { return make_schedule(c.steps, c.beta_min, c.beta_max); }

/// Per-window noise: Euclidean noise for translations and the tangent vectors
/// of the IGSO(3) rotation noise.
struct NoisePair {
  std::vector<Vec3> eps_trans;
  std::vector<Vec3> eps_rot_tangent;
};

inline NoisePair sample_noise_pair(std::size_t length, RngState& rng) {
  NoisePair n;
  n.eps_trans.resize(length);
  n.eps_rot_tangent.resize(length);
  for (auto& v : n.eps_trans) v = sample_gaussian_vec3(1.0, rng);
  for (auto& v : n.eps_rot_tangent) v = sample_gaussian_vec3(1.0, rng);
  return n;
}

namespace detail {
inline void check_step(int t, const NoiseSchedule& s, int min_step = 0) {
  if (t < min_step || t >= s.T) {
    throw Error(ErrorKind::ConfigError, "step " + std::to_string(t) + " outside [" + std::to_string(min_step) + ", " +
                                            std::to_string(s.T - 1) + "]");
  }
}
inline void check_alpha_bar(double ab) {
  if (ab < 1e-12) throw Error(ErrorKind::NumericalUnderflow, "alpha_bar below 1e-12");
}
inline void check_same_length(std::size_t a, std::size_t b) {
  if (a != b) throw Error(ErrorKind::ShapeError, "sequence lengths differ");
}
}  // namespace detail

inline std::vector<Vec3> forward_trans(std::span<const Vec3> x0, std::span<const Vec3> eps, int t,
                                       const NoiseSchedule& s) {
  detail::check_step(t, s);
  detail::check_same_length(x0.size(), eps.size());
  const double a = std::sqrt(s.alpha_bar[t]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<Vec3> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// (sqrt(ab) (x) r0) (+) exp(sqrt(1 - ab) eps).
inline RotationMatrix forward_rot(const RotationMatrix& r0, const Vec3& eps_tangent, int t, const NoiseSchedule& s) {
  detail::check_step(t, s);
  const double ab = s.alpha_bar[t];
  return compose(geodesic_scale(std::sqrt(ab), r0), exp_so3(std::sqrt(1.0 - ab) * eps_tangent));
}

inline std::vector<Vec3> reconstruct_trans_x0(std::span<const Vec3> xt, std::span<const Vec3> eps_hat, int t,
                                              const NoiseSchedule& s) {
  detail::check_step(t, s);
  detail::check_same_length(xt.size(), eps_hat.size());
  const double ab = s.alpha_bar[t];
  detail::check_alpha_bar(ab);
  const double inv = 1.0 / std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  std::vector<Vec3> out(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i) out[i] = inv * (xt[i] - b * eps_hat[i]);
  return out;
}

/// (1/sqrt(ab)) (x) (rt (+) exp(-sqrt(1 - ab) eps_hat)).
inline RotationMatrix reconstruct_rot_x0(const RotationMatrix& rt, const Vec3& eps_hat_tangent, int t,
                                         const NoiseSchedule& s) {
  detail::check_step(t, s);
  const double ab = s.alpha_bar[t];
  detail::check_alpha_bar(ab);
  return geodesic_scale(1.0 / std::sqrt(ab), compose(rt, exp_so3(-std::sqrt(1.0 - ab) * eps_hat_tangent)));
}

/// Weights of x0 and x_t in the DDPM posterior mean q(x_{t-1} | x_t, x0).
/// The x_t weight is sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t), the value that
/// makes the mean agree with the epsilon-form Euclidean reverse step.
struct PosteriorCoefficients {
  double x0 = 0.0;
  double xt = 0.0;
};

inline PosteriorCoefficients posterior_coefficients(int t, const NoiseSchedule& s) {
  detail::check_step(t, s, 1);
  const double ab = s.alpha_bar[t];
  const double ab_prev = s.alpha_bar[t - 1];
  return {std::sqrt(ab_prev) * s.beta[t] / (1.0 - ab), std::sqrt(s.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)};
}

inline RotationMatrix posterior_mean_rot(const RotationMatrix& x0_hat, const RotationMatrix& xt, int t,
                                         const NoiseSchedule& s) {
  const auto c = posterior_coefficients(t, s);
  return compose(geodesic_scale(c.x0, x0_hat), geodesic_scale(c.xt, xt));
}

/// Reverse step with explicit tangent noise; the noise is ignored at t = 1.
inline RotationMatrix reverse_step_rot(const RotationMatrix& xt, const Vec3& eps_hat_tangent, int t,
                                       const NoiseSchedule& s, const Vec3& noise) {
  detail::check_step(t, s, 1);
  const RotationMatrix x0_hat = reconstruct_rot_x0(xt, eps_hat_tangent, t, s);
  const RotationMatrix mu = posterior_mean_rot(x0_hat, xt, t, s);
  if (t == 1) return mu;
  return compose(mu, exp_so3(s.sigma[t] * noise));
}

inline RotationMatrix reverse_step_rot(const RotationMatrix& xt, const Vec3& eps_hat_tangent, int t,
                                       const NoiseSchedule& s, RngState& rng) {
  return reverse_step_rot(xt, eps_hat_tangent, t, s, sample_gaussian_vec3(1.0, rng));
}

inline std::vector<Vec3> reverse_step_trans(std::span<const Vec3> xt, std::span<const Vec3> eps_hat, int t,
                                            const NoiseSchedule& s, std::span<const Vec3> noise) {
  detail::check_step(t, s, 1);
  detail::check_same_length(xt.size(), eps_hat.size());
  detail::check_same_length(xt.size(), noise.size());
  const double k = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double inv = 1.0 / std::sqrt(s.alpha[t]);
  const double sig = t == 1 ? 0.0 : s.sigma[t];
  std::vector<Vec3> out(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i) out[i] = inv * (xt[i] - k * eps_hat[i]) + sig * noise[i];
  return out;
}

inline std::vector<Vec3> reverse_step_trans(std::span<const Vec3> xt, std::span<const Vec3> eps_hat, int t,
                                            const NoiseSchedule& s, RngState& rng) {
  std::vector<Vec3> noise(xt.size());
  for (auto& v : noise) v = sample_gaussian_vec3(1.0, rng);
  return reverse_step_trans(xt, eps_hat, t, s, noise);
}

/// A window diffused to some step: translations in R^3 and rotations on SO(3).
struct DiffusedWindow {
  std::vector<Vec3> trans;
  std::vector<RotationMatrix> rot;
};

/// Noise-estimator output for one window: Euclidean noise for translations
/// and tangent-space noise for rotations.
struct ScoreWindow {
  std::vector<Vec3> trans;
  std::vector<Vec3> rot;
};

inline DiffusedWindow diffuse_window(const PoseSequence& x0, const NoisePair& noise, int t, const NoiseSchedule& s) {
  detail::check_same_length(x0.size(), noise.eps_trans.size());
  detail::check_same_length(x0.size(), noise.eps_rot_tangent.size());
  DiffusedWindow w;
  w.trans = forward_trans(x0.translations, noise.eps_trans, t, s);
  w.rot.reserve(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) w.rot.push_back(forward_rot(x0.rotations[i], noise.eps_rot_tangent[i], t, s));
  return w;
}

}  // namespace dose3
