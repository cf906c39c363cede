#pragma once

// SO(3)/SE(3) group arithmetic in 64-bit. The kernels in dose3::so3 are
// templated on the scalar so the same code runs on doubles and on Dual<N>
// when a loss needs derivatives through a rotation.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "dose3/dual.hpp"
#include "dose3/error.hpp"

namespace dose3 {

template <class T>
struct BasicVec3 {
  T x{}, y{}, z{};

  T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  BasicVec3& operator+=(const BasicVec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  BasicVec3& operator-=(const BasicVec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }
  friend BasicVec3 operator+(BasicVec3 a, const BasicVec3& b) { return a += b; }
  friend BasicVec3 operator-(BasicVec3 a, const BasicVec3& b) { return a -= b; }
  friend BasicVec3 operator-(const BasicVec3& a) { return {-a.x, -a.y, -a.z}; }
  template <class S>
  friend BasicVec3 operator*(const S& k, const BasicVec3& a) {
    return {k * a.x, k * a.y, k * a.z};
  }
  template <class S>
  friend BasicVec3 operator*(const BasicVec3& a, const S& k) {
    return {a.x * k, a.y * k, a.z * k};
  }
  template <class S>
  friend BasicVec3 operator/(const BasicVec3& a, const S& k) {
    return {a.x / k, a.y / k, a.z / k};
  }
  friend bool operator==(const BasicVec3&, const BasicVec3&) = default;
};

using Vec3 = BasicVec3<double>;

template <class T>
T dot(const BasicVec3<T>& a, const BasicVec3<T>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline bool is_finite(const Vec3& a) {
  return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z);
}

/// Row-major 3x3 matrix.
template <class T>
struct BasicMat3 {
  std::array<T, 9> m{};

  T& operator()(int r, int c) { return m[r * 3 + c]; }
  const T& operator()(int r, int c) const { return m[r * 3 + c]; }

  static BasicMat3 identity() {
    BasicMat3 r;
    r(0, 0) = r(1, 1) = r(2, 2) = T(1.0);
    return r;
  }

  friend bool operator==(const BasicMat3&, const BasicMat3&) = default;
};

using Matrix3 = BasicMat3<double>;

namespace so3 {

template <class T>
BasicMat3<T> multiply(const BasicMat3<T>& a, const BasicMat3<T>& b) {
  BasicMat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(i, 0) * b(0, j) + a(i, 1) * b(1, j) + a(i, 2) * b(2, j);
  return r;
}

template <class T>
BasicMat3<T> transpose(const BasicMat3<T>& a) {
  BasicMat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(j, i);
  return r;
}

template <class T>
BasicVec3<T> apply(const BasicMat3<T>& a, const BasicVec3<T>& v) {
  return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z, a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
          a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
}

template <class T>
BasicMat3<T> hat_matrix(const BasicVec3<T>& w) {
  BasicMat3<T> r;
  r(0, 1) = -w.z;
  r(0, 2) = w.y;
  r(1, 0) = w.z;
  r(1, 2) = -w.x;
  r(2, 0) = -w.y;
  r(2, 1) = w.x;
  return r;
}

// Below this squared angle the Rodrigues coefficients switch to their Taylor
// series (theta < 1e-4).
inline constexpr double kSmallAngleSq = 1e-8;
inline constexpr double kAntipodalTol = 1e-6;

template <class T>
BasicMat3<T> exp_map(const BasicVec3<T>& w) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T th2 = dot(w, w);
  T a, b;
  if (value_of(th2) < kSmallAngleSq) {
    a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0;
    b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
  } else {
    const T th = sqrt(th2);
    a = sin(th) / th;
    b = (1.0 - cos(th)) / th2;
  }
  // R = I + a*K + b*K^2 with K^2 = w w^T - |w|^2 I
  BasicMat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = b * (w[i] * w[j]);
  for (int i = 0; i < 3; ++i) r(i, i) = r(i, i) + 1.0 - b * th2;
  r(0, 1) = r(0, 1) - a * w.z;
  r(0, 2) = r(0, 2) + a * w.y;
  r(1, 0) = r(1, 0) + a * w.z;
  r(1, 2) = r(1, 2) - a * w.x;
  r(2, 0) = r(2, 0) - a * w.y;
  r(2, 1) = r(2, 1) + a * w.x;
  return r;
}

/// Principal logarithm. Uses atan2 on (|axial part|, cos theta) rather than
/// arccos of the trace, which keeps full precision near theta = 0.
template <class T>
BasicVec3<T> log_map(const BasicMat3<T>& r) {
  using std::atan2;
  using std::sqrt;
  const T c = (r(0, 0) + r(1, 1) + r(2, 2) - 1.0) * 0.5;
  const BasicVec3<T> w{(r(2, 1) - r(1, 2)) * 0.5, (r(0, 2) - r(2, 0)) * 0.5, (r(1, 0) - r(0, 1)) * 0.5};
  const T s2 = dot(w, w);
  if (value_of(c) > 0.0 && value_of(s2) < kSmallAngleSq) {
    // theta / sin(theta) = asin(s)/s
    const T factor = 1.0 + s2 / 6.0 + 3.0 * s2 * s2 / 40.0;
    return w * factor;
  }
  const double theta_v = std::atan2(std::sqrt(value_of(s2)), value_of(c));
  if (std::numbers::pi - theta_v < kAntipodalTol) {
    throw Error(ErrorKind::NearAntipodal, "rotation angle within 1e-6 of pi, logarithm axis is ill-defined");
  }
  const T s = sqrt(s2);
  const T theta = atan2(s, c);
  return w * (theta / s);
}

inline double determinant(const Matrix3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

/// max |R^T R - I| and |det R - 1|, whichever is larger.
inline double orthonormality_error(const Matrix3& a) {
  double e = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double g = a(0, i) * a(0, j) + a(1, i) * a(1, j) + a(2, i) * a(2, j);
      e = std::max(e, std::abs(g - (i == j ? 1.0 : 0.0)));
    }
  return std::max(e, std::abs(determinant(a) - 1.0));
}

}  // namespace so3

inline constexpr double kRotationTolerance = 1e-6;

class RotationMatrix {
 public:
  RotationMatrix() : m_(Matrix3::identity()) {}

  static RotationMatrix identity() { return RotationMatrix(); }

  /// Validates orthonormality and determinant to 1e-6.
  static RotationMatrix from_matrix(const Matrix3& m) {
    for (double v : m.m)
      if (!std::isfinite(v)) throw Error(ErrorKind::InvalidRotation, "non-finite matrix entry");
    const double err = so3::orthonormality_error(m);
    if (err > kRotationTolerance) {
      throw Error(ErrorKind::InvalidRotation, "orthonormality error " + std::to_string(err));
    }
    return RotationMatrix(m);
  }

  /// Caller guarantees validity (results of exp, products of rotations).
  static RotationMatrix unchecked(const Matrix3& m) { return RotationMatrix(m); }

  const Matrix3& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_(r, c); }

  RotationMatrix inverse() const { return RotationMatrix(so3::transpose(m_)); }
  Vec3 apply(const Vec3& v) const { return so3::apply(m_, v); }

  friend bool operator==(const RotationMatrix&, const RotationMatrix&) = default;

 private:
  explicit RotationMatrix(const Matrix3& m) : m_(m) {}
  Matrix3 m_;
};

/// so(3) element, stored as its axial vector so antisymmetry is exact.
class SkewMatrix {
 public:
  SkewMatrix() = default;
  explicit SkewMatrix(const Vec3& w) : w_(w) {}

  const Vec3& axial() const { return w_; }
  Matrix3 matrix() const { return so3::hat_matrix(w_); }

 private:
  Vec3 w_{};
};

struct SE3Pose {
  RotationMatrix rotation;
  Vec3 translation{};
};

inline SkewMatrix hat(const Vec3& omega) { return SkewMatrix(omega); }

inline Vec3 vee(const SkewMatrix& s) { return s.axial(); }

/// Throws InvalidSkew when m + m^T exceeds 1e-9 anywhere.
inline Vec3 vee(const Matrix3& m) {
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j)
      if (std::abs(m(i, j) + m(j, i)) > 1e-9) throw Error(ErrorKind::InvalidSkew, "matrix is not antisymmetric");
  return {m(2, 1), m(0, 2), m(1, 0)};
}

inline RotationMatrix exp_so3(const Vec3& omega) { return RotationMatrix::unchecked(so3::exp_map(omega)); }

/// Throws NearAntipodal when the angle is within 1e-6 of pi.
inline Vec3 log_so3(const RotationMatrix& r) { return so3::log_map(r.matrix()); }

inline double rotation_angle(const RotationMatrix& r) {
  const auto& m = r.matrix();
  const double c = std::clamp((m(0, 0) + m(1, 1) + m(2, 2) - 1.0) * 0.5, -1.0, 1.0);
  return std::acos(c);
}

/// Nearest rotation in Frobenius norm (orthogonal polar factor), computed by
/// scaled Newton iteration. A negative determinant is corrected by negating
/// the input first.
inline RotationMatrix project_to_so3(const Matrix3& m) {
  double fro2 = 0.0;
  for (double v : m.m) {
    if (!std::isfinite(v)) throw Error(ErrorKind::DegenerateMatrix, "non-finite matrix entry");
    fro2 += v * v;
  }
  Matrix3 x = m;
  double det = so3::determinant(x);
  const double scale = std::sqrt(fro2);
  if (!(std::abs(det) > 1e-12 * scale * scale * scale)) {
    throw Error(ErrorKind::DegenerateMatrix, "matrix is rank deficient");
  }
  if (det < 0) {
    for (double& v : x.m) v = -v;
    det = -det;
  }
  for (int iter = 0; iter < 100; ++iter) {
    det = so3::determinant(x);
    // x^{-T} = cofactor(x) / det
    Matrix3 cof;
    cof(0, 0) = x(1, 1) * x(2, 2) - x(1, 2) * x(2, 1);
    cof(0, 1) = x(1, 2) * x(2, 0) - x(1, 0) * x(2, 2);
    cof(0, 2) = x(1, 0) * x(2, 1) - x(1, 1) * x(2, 0);
    cof(1, 0) = x(0, 2) * x(2, 1) - x(0, 1) * x(2, 2);
    cof(1, 1) = x(0, 0) * x(2, 2) - x(0, 2) * x(2, 0);
    cof(1, 2) = x(0, 1) * x(2, 0) - x(0, 0) * x(2, 1);
    cof(2, 0) = x(0, 1) * x(1, 2) - x(0, 2) * x(1, 1);
    cof(2, 1) = x(0, 2) * x(1, 0) - x(0, 0) * x(1, 2);
    cof(2, 2) = x(0, 0) * x(1, 1) - x(0, 1) * x(1, 0);
    const double gamma = iter < 6 ? std::cbrt(1.0 / det) : 1.0;
    Matrix3 next;
    double diff = 0.0;
    for (int i = 0; i < 9; ++i) {
      next.m[i] = 0.5 * (gamma * x.m[i] + cof.m[i] / (gamma * det));
      diff = std::max(diff, std::abs(next.m[i] - x.m[i]));
    }
    x = next;
    if (diff < 1e-15 && iter >= 1) break;
  }
  return RotationMatrix::unchecked(x);
}

/// R1 * R2 (the diffusion "oplus"). Drift beyond 1e-7 is projected away.
inline RotationMatrix compose(const RotationMatrix& r1, const RotationMatrix& r2) {
  Matrix3 p = so3::multiply(r1.matrix(), r2.matrix());
  if (so3::orthonormality_error(p) > 1e-7) return project_to_so3(p);
  return RotationMatrix::unchecked(p);
}

/// exp(k * log(R)) (the diffusion "otimes").
inline RotationMatrix geodesic_scale(double k, const RotationMatrix& r) { return exp_so3(k * log_so3(r)); }

/// Squared geodesic angle between two rotations, arccos((tr(R1^T R2) - 1)/2)^2.
inline double rot_distance(const RotationMatrix& r1, const RotationMatrix& r2) {
  const auto& a = r1.matrix();
  const auto& b = r2.matrix();
  double tr = 0.0;
  for (int i = 0; i < 9; ++i) tr += a.m[i] * b.m[i];
  const double th = std::acos(std::clamp((tr - 1.0) * 0.5, -1.0, 1.0));
  return th * th;
}

/// Total variant of log_so3 used for feature encoding: near pi it picks the
/// axis from the symmetric part instead of failing. The sign follows the
/// residual antisymmetric part when there is one.
inline Vec3 log_so3_principal(const RotationMatrix& r) {
  const auto& m = r.matrix();
  const double c = (m(0, 0) + m(1, 1) + m(2, 2) - 1.0) * 0.5;
  const Vec3 w{(m(2, 1) - m(1, 2)) * 0.5, (m(0, 2) - m(2, 0)) * 0.5, (m(1, 0) - m(0, 1)) * 0.5};
  const double theta = std::atan2(std::sqrt(dot(w, w)), c);
  if (std::numbers::pi - theta >= so3::kAntipodalTol) return so3::log_map(m);
  // (R + I)/2 ~ n n^T
  int k = 0;
  for (int i = 1; i < 3; ++i)
    if (m(i, i) > m(k, k)) k = i;
  const double d = std::sqrt(std::max((m(k, k) + 1.0) * 0.5, 1e-300));
  Vec3 n;
  for (int i = 0; i < 3; ++i) n[i] = (m(i, k) + m(k, i)) * 0.25 / d;
  n = n / norm(n);
  if (dot(n, w) < 0) n = -n;
  return theta * n;
}

inline RotationMatrix rot_x(double a) { return exp_so3({a, 0, 0}); }
inline RotationMatrix rot_y(double a) { return exp_so3({0, a, 0}); }
inline RotationMatrix rot_z(double a) { return exp_so3({0, 0, a}); }

}  // namespace dose3
