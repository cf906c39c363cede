#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dose3/error.hpp"
#include "dose3/lie.hpp"
#include "dose3/rng.hpp"

namespace dose3 {

/// Isotropic Gaussian on SO(3) in its tangent-space form: the sample is
/// mu * exp(v) with v ~ N(0, sigma^2 I).
struct IGso3Params {
  RotationMatrix mu;
  double sigma = 1.0;
};

inline std::vector<double> sample_gaussian_vec(std::size_t n, double sigma, RngState& rng) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw Error(ErrorKind::ConfigError, "sigma must be finite and >= 0");
  std::vector<double> out(n);
  for (auto& v : out) v = sigma * rng.gaussian();
  return out;
}

inline Vec3 sample_gaussian_vec3(double sigma, RngState& rng) {
  const double x = rng.gaussian();
  const double y = rng.gaussian();
  const double z = rng.gaussian();
  return {sigma * x, sigma * y, sigma * z};
}

inline RotationMatrix sample_igso3(const IGso3Params& params, RngState& rng) {
  if (!(params.sigma > 0.0) || !std::isfinite(params.sigma)) {
    throw Error(ErrorKind::ConfigError, "IGSO(3) sigma must be finite and > 0");
  }
  return compose(params.mu, exp_so3(sample_gaussian_vec3(params.sigma, rng)));
}

}  // namespace dose3
