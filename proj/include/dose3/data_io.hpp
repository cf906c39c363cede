#pragma once

// Pose-trajectory I/O: KITTI and TUM text formats, fixed-length windowing
// with per-window normalization, the windowed dataset container ("DOSE3DAT")
// and seeded synthetic trajectory families.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <cstring>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dose3/container.hpp"
#include "dose3/error.hpp"
#include "dose3/igso3.hpp"
#include "dose3/lie.hpp"
#include "dose3/pose.hpp"
#include "dose3/rng.hpp"

namespace dose3::data {

struct RawTrajectory {
  std::vector<SE3Pose> poses;
  std::string label;
  std::vector<double> timestamps;  // empty when the source has none
  std::vector<std::string> warnings;

  std::size_t size() const { return poses.size(); }
};

/// Origin pose and translation scale removed from one window.
struct WindowMeta {
  SE3Pose origin;
  double scale = 1.0;
};

struct WindowedDataset {
  int length = 0;
  std::vector<PoseSequence> windows;
  std::vector<WindowMeta> meta;  // not persisted by save_dataset
  std::vector<std::string> labels;

  std::size_t size() const { return windows.size(); }
  void append(const WindowedDataset& o) {
    if (length != 0 && o.length != 0 && o.length != length) throw Error(ErrorKind::ShapeError, "window lengths differ");
    if (length == 0) length = o.length;
    windows.insert(windows.end(), o.windows.begin(), o.windows.end());
    meta.insert(meta.end(), o.meta.begin(), o.meta.end());
    labels.insert(labels.end(), o.labels.begin(), o.labels.end());
  }
};

inline constexpr double kRotationDriftAccept = 1e-6;
inline constexpr double kRotationDriftRepair = 1e-3;
inline constexpr double kQuaternionNormTol = 1e-3;
inline constexpr double kScaleFloor = 1e-6;

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline double parse_real(std::string_view tok, std::size_t line) {
  double v = 0.0;
  const auto* end = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v)) {
    throw Error(ErrorKind::ParseError, "not a finite number: '" + std::string(tok) + "'", line);
  }
  return v;
}

inline bool blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  return f;
}

inline std::string stem_of(const std::string& path) {
  const auto slash = path.find_last_of('/');
  std::string name = slash == std::string::npos ? path : path.substr(slash + 1);
  const auto dot = name.find_last_of('.');
  return dot == std::string::npos || dot == 0 ? name : name.substr(0, dot);
}

// Accepts near-orthonormal input, repairs moderate drift, rejects the rest.
inline RotationMatrix sanitize_rotation(const Matrix3& m, std::size_t line) {
  const double drift = so3::orthonormality_error(m);
  if (drift <= kRotationDriftAccept) return RotationMatrix::unchecked(m);
  if (drift <= kRotationDriftRepair) return project_to_so3(m);
  throw Error(ErrorKind::InvalidRotation, "rotation drift " + std::to_string(drift) + " exceeds 1e-3", line);
}

}  // namespace detail

// --- quaternions (x, y, z, w), Hamilton convention -------------------------

inline RotationMatrix quaternion_to_rotation(double qx, double qy, double qz, double qw) {
  const double n = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
  if (!(n > 0.0)) throw Error(ErrorKind::InvalidRotation, "zero quaternion");
  qx /= n, qy /= n, qz /= n, qw /= n;
  Matrix3 m;
  m(0, 0) = 1 - 2 * (qy * qy + qz * qz);
  m(0, 1) = 2 * (qx * qy - qz * qw);
  m(0, 2) = 2 * (qx * qz + qy * qw);
  m(1, 0) = 2 * (qx * qy + qz * qw);
  m(1, 1) = 1 - 2 * (qx * qx + qz * qz);
  m(1, 2) = 2 * (qy * qz - qx * qw);
  m(2, 0) = 2 * (qx * qz - qy * qw);
  m(2, 1) = 2 * (qy * qz + qx * qw);
  m(2, 2) = 1 - 2 * (qx * qx + qy * qy);
  return RotationMatrix::unchecked(m);
}

/// Returns (x, y, z, w) with w >= 0.
inline std::array<double, 4> rotation_to_quaternion(const RotationMatrix& r) {
  const auto& m = r.matrix();
  const double tr = m(0, 0) + m(1, 1) + m(2, 2);
  std::array<double, 4> q{};
  if (tr > 0) {
    const double s = 2.0 * std::sqrt(tr + 1.0);
    q = {(m(2, 1) - m(1, 2)) / s, (m(0, 2) - m(2, 0)) / s, (m(1, 0) - m(0, 1)) / s, 0.25 * s};
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2));
    q = {0.25 * s, (m(0, 1) + m(1, 0)) / s, (m(0, 2) + m(2, 0)) / s, (m(2, 1) - m(1, 2)) / s};
  } else if (m(1, 1) > m(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2));
    q = {(m(0, 1) + m(1, 0)) / s, 0.25 * s, (m(1, 2) + m(2, 1)) / s, (m(0, 2) - m(2, 0)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1));
    q = {(m(0, 2) + m(2, 0)) / s, (m(1, 2) + m(2, 1)) / s, 0.25 * s, (m(1, 0) - m(0, 1)) / s};
  }
  if (q[3] < 0) for (auto& v : q) v = -v;
  return q;
}

// --- parsers ---------------------------------------------------------------

/// KITTI odometry poses: 12 reals per line, the row-major 3x4 matrix [R | t].
inline RawTrajectory parse_kitti_poses(std::istream& in, std::string label = "kitti") {
  RawTrajectory out;
  out.label = std::move(label);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::blank(line)) continue;
    const auto tok = detail::split_ws(line);
    if (tok.size() != 12) {
      throw Error(ErrorKind::ParseError, "expected 12 values, found " + std::to_string(tok.size()), lineno);
    }
    double v[12];
    for (int i = 0; i < 12; ++i) v[i] = detail::parse_real(tok[i], lineno);
    Matrix3 m;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = v[4 * r + c];
    out.poses.push_back({detail::sanitize_rotation(m, lineno), {v[3], v[7], v[11]}});
  }
  if (out.poses.empty()) out.warnings.push_back("no poses found");
  return out;
}

inline RawTrajectory parse_kitti_poses(const std::string& path) {
  auto f = detail::open_input(path);
  return parse_kitti_poses(f, detail::stem_of(path));
}

/// TUM trajectories: "timestamp tx ty tz qx qy qz qw" per line, '#' comments.
inline RawTrajectory parse_tum_trajectory(std::istream& in, std::string label = "tum") {
  RawTrajectory out;
  out.label = std::move(label);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (detail::blank(line)) continue;
    const auto tok = detail::split_ws(line);
    if (tok.size() != 8) throw Error(ErrorKind::ParseError, "expected 8 values, found " + std::to_string(tok.size()), lineno);
    double v[8];
    for (int i = 0; i < 8; ++i) v[i] = detail::parse_real(tok[i], lineno);
    if (!out.timestamps.empty() && v[0] < out.timestamps.back()) {
      throw Error(ErrorKind::OrderError, "timestamp decreases", lineno);
    }
    const double qn = std::sqrt(v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]);
    if (std::abs(qn - 1.0) > kQuaternionNormTol) {
      throw Error(ErrorKind::InvalidRotation, "quaternion norm " + std::to_string(qn) + " is not within 1e-3 of 1", lineno);
    }
    out.timestamps.push_back(v[0]);
    out.poses.push_back({quaternion_to_rotation(v[4], v[5], v[6], v[7]), {v[1], v[2], v[3]}});
  }
  if (out.poses.empty()) out.warnings.push_back("no poses found");
  return out;
}

inline RawTrajectory parse_tum_trajectory(const std::string& path) {
  auto f = detail::open_input(path);
  return parse_tum_trajectory(f, detail::stem_of(path));
}

// --- writers ---------------------------------------------------------------

inline void write_kitti_poses(std::ostream& out, const RawTrajectory& traj) {
  char buf[64];
  for (const auto& p : traj.poses) {
    const auto& m = p.rotation.matrix();
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) {
        const double v = c < 3 ? m(r, c) : p.translation[r];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << (r == 0 && c == 0 ? "" : " ") << buf;
      }
    }
    out << '\n';
  }
}

inline void write_kitti_poses(const std::string& path, const RawTrajectory& traj) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  write_kitti_poses(f, traj);
}

/// Missing timestamps are written as the pose index.
inline void write_tum_trajectory(std::ostream& out, const RawTrajectory& traj) {
  char buf[64];
  for (std::size_t i = 0; i < traj.poses.size(); ++i) {
    const auto& p = traj.poses[i];
    const auto q = rotation_to_quaternion(p.rotation);
    const double vals[8] = {i < traj.timestamps.size() ? traj.timestamps[i] : static_cast<double>(i),
                            p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]};
    for (int k = 0; k < 8; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", vals[k]);
      out << (k ? " " : "") << buf;
    }
    out << '\n';
  }
}

inline void write_tum_trajectory(const std::string& path, const RawTrajectory& traj) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  write_tum_trajectory(f, traj);
}

// --- windowing -------------------------------------------------------------

struct WindowOptions {
  int length = 128;
  int stride = 0;  // 0 means stride = length
  bool canonicalize_rotation = true;
};

/// Normalizes one window: translations shifted to start at the origin and
/// divided by the largest absolute component; rotations optionally
/// left-multiplied by the inverse of the first rotation.
inline PoseSequence normalize_window(std::span<const SE3Pose> poses, bool canonicalize_rotation, WindowMeta* meta = nullptr) {
  PoseSequence w;
  if (poses.empty()) return w;
  const Vec3 origin = poses[0].translation;
  double scale = 0.0;
  for (const auto& p : poses)
    for (int c = 0; c < 3; ++c) scale = std::max(scale, std::abs(p.translation[c] - origin[c]));
  if (scale < kScaleFloor) scale = 1.0;
  const RotationMatrix r0_inv = poses[0].rotation.inverse();
  w.rotations.reserve(poses.size());
  w.translations.reserve(poses.size());
  for (const auto& p : poses) {
    w.rotations.push_back(canonicalize_rotation ? compose(r0_inv, p.rotation) : p.rotation);
    w.translations.push_back((p.translation - origin) / scale);
  }
  if (meta) *meta = {poses[0], scale};
  return w;
}

inline WindowedDataset window_and_normalize(const RawTrajectory& traj, const WindowOptions& opt = {}) {
  if (opt.length < 1) throw Error(ErrorKind::ConfigError, "window length must be >= 1");
  const int stride = opt.stride == 0 ? opt.length : opt.stride;
  if (stride < 1) throw Error(ErrorKind::ConfigError, "stride must be >= 1");
  const std::size_t len = static_cast<std::size_t>(opt.length);
  if (traj.size() < len) {
    throw Error(ErrorKind::TooShort, "trajectory has " + std::to_string(traj.size()) + " poses, window needs " +
                                         std::to_string(len));
  }
  WindowedDataset ds;
  ds.length = opt.length;
  for (std::size_t start = 0; start + len <= traj.size(); start += static_cast<std::size_t>(stride)) {
    WindowMeta meta;
    ds.windows.push_back(
        normalize_window(std::span<const SE3Pose>(traj.poses).subspan(start, len), opt.canonicalize_rotation, &meta));
    ds.meta.push_back(meta);
    ds.labels.push_back(traj.label);
  }
  return ds;
}

inline WindowedDataset window_and_normalize(const RawTrajectory& traj, int length, int stride = 0) {
  return window_and_normalize(traj, WindowOptions{length, stride, true});
}

// --- dataset container -----------------------------------------------------
//
//   "DOSE3DAT", u16 version, u32 L, u32 window count,
//   per window L x (9 rotation + 3 translation) f64,
//   label table: per window u32 byte length + bytes.

inline constexpr const char* kDatasetMagic = "DOSE3DAT";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline void save_dataset(const WindowedDataset& ds, const std::string& path) {
  std::vector<std::uint8_t> out(kDatasetMagic, kDatasetMagic + 8);
  io::le::put<std::uint16_t>(out, kDatasetVersion);
  io::le::put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.length));
  io::le::put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.windows.size()));
  for (const auto& w : ds.windows) {
    if (static_cast<int>(w.size()) != ds.length) throw Error(ErrorKind::ShapeError, "window length differs from dataset L");
    for (std::size_t l = 0; l < w.size(); ++l) {
      for (double v : w.rotations[l].matrix().m) io::le::put<double>(out, v);
      for (int c = 0; c < 3; ++c) io::le::put<double>(out, w.translations[l][c]);
    }
  }
  for (std::size_t i = 0; i < ds.windows.size(); ++i) {
    const std::string& lab = i < ds.labels.size() ? ds.labels[i] : std::string();
    io::le::put<std::uint32_t>(out, static_cast<std::uint32_t>(lab.size()));
    out.insert(out.end(), lab.begin(), lab.end());
  }
  io::write_file_bytes(path, out);
}

inline WindowedDataset load_dataset(const std::string& path) {
  const auto data = io::read_file_bytes(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (data.size() - pos < n) throw Error(ErrorKind::ChecksumError, "dataset file truncated: " + path);
  };
  if (data.size() < 8 || std::memcmp(data.data(), kDatasetMagic, 8) != 0) {
    throw Error(ErrorKind::BadMagic, path + " is not a windowed dataset");
  }
  pos = 8;
  need(10);
  const auto version = io::le::get<std::uint16_t>(data.data() + pos);
  if (version != kDatasetVersion) throw Error(ErrorKind::VersionMismatch, "dataset version " + std::to_string(version));
  const auto len = io::le::get<std::uint32_t>(data.data() + pos + 2);
  const auto count = io::le::get<std::uint32_t>(data.data() + pos + 6);
  pos += 10;
  WindowedDataset ds;
  ds.length = static_cast<int>(len);
  need(static_cast<std::size_t>(count) * len * 12 * 8);
  for (std::uint32_t i = 0; i < count; ++i) {
    PoseSequence w;
    w.rotations.reserve(len);
    w.translations.reserve(len);
    for (std::uint32_t l = 0; l < len; ++l) {
      Matrix3 m;
      for (int k = 0; k < 9; ++k, pos += 8) m.m[k] = io::le::get<double>(data.data() + pos);
      Vec3 t;
      for (int c = 0; c < 3; ++c, pos += 8) t[c] = io::le::get<double>(data.data() + pos);
      w.rotations.push_back(RotationMatrix::from_matrix(m));
      w.translations.push_back(t);
    }
    ds.windows.push_back(std::move(w));
    ds.meta.push_back({});
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    need(4);
    const auto n = io::le::get<std::uint32_t>(data.data() + pos);
    pos += 4;
    need(n);
    ds.labels.emplace_back(reinterpret_cast<const char*>(data.data() + pos), n);
    pos += n;
  }
  return ds;
}

/// Debug export: one row per pose.
inline void export_dataset_csv(const WindowedDataset& ds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f << "window,label,index,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.windows.size(); ++i) {
    const auto& w = ds.windows[i];
    for (std::size_t l = 0; l < w.size(); ++l) {
      f << i << ',' << (i < ds.labels.size() ? ds.labels[i] : "") << ',' << l;
      for (double v : w.rotations[l].matrix().m) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        f << ',' << buf;
      }
      for (int c = 0; c < 3; ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", w.translations[l][c]);
        f << ',' << buf;
      }
      f << '\n';
    }
  }
}

// --- synthetic families ----------------------------------------------------

enum class Family { ArcVehicle, TumblingWalk, HelixDrone };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::ArcVehicle: return "arc-vehicle";
    case Family::TumblingWalk: return "tumbling-walk";
    case Family::HelixDrone: return "helix-drone";
  }
  return "unknown";
}

inline Family parse_family(const std::string& s) {
  if (s == "arc-vehicle") return Family::ArcVehicle;
  if (s == "tumbling-walk") return Family::TumblingWalk;
  if (s == "helix-drone") return Family::HelixDrone;
  throw Error(ErrorKind::ConfigError, "unknown family '" + s + "' (arc-vehicle, tumbling-walk, helix-drone)");
}

struct SynthSpec {
  Family family = Family::ArcVehicle;
  double curvature_range = 0.02;  // max |curvature|, 1/m (arc-vehicle)
  double omega_sigma = 1.0;       // angular-velocity scale, rad/s (tumbling-walk)
  double speed_min = 5.0;         // m/s
  double speed_max = 12.0;
  double radius_min = 8.0;        // m (helix-drone)
  double radius_max = 30.0;
  double climb_max = 2.0;         // m/s (helix-drone)
  double dt = 0.1;                // s
  int length = 128;               // poses per trajectory
  int count = 1;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorKind::ConfigError, m); };
    if (!(curvature_range >= 0.0 && curvature_range <= 1.0)) bad("curvature_range must be in [0, 1]");
    if (!(omega_sigma >= 0.0 && omega_sigma <= 10.0)) bad("omega_sigma must be in [0, 10]");
    if (!(speed_min >= 0.0 && speed_min <= speed_max && speed_max <= 100.0)) bad("need 0 <= speed_min <= speed_max <= 100");
    if (!(radius_min > 0.0 && radius_min <= radius_max && radius_max <= 1e4)) bad("need 0 < radius_min <= radius_max <= 1e4");
    if (!(climb_max >= 0.0 && climb_max <= 50.0)) bad("climb_max must be in [0, 50]");
    if (!(dt > 0.0 && dt <= 10.0)) bad("dt must be in (0, 10]");
    if (length < 1) bad("length must be >= 1");
    if (count < 0) bad("count must be >= 0");
  }
};

namespace detail {

inline double uniform_in(RngState& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

// Planar driving: yaw-only rotations, curvature oscillating smoothly inside
// [-c, c] and constant speed.
inline RawTrajectory arc_vehicle(const SynthSpec& s, RngState& rng) {
  const double c = s.curvature_range;
  const double k0 = uniform_in(rng, -0.5 * c, 0.5 * c);
  const double amp = uniform_in(rng, 0.0, 0.5 * c);
  const double freq = uniform_in(rng, 0.02, 0.1);  // Hz
  const double phase = uniform_in(rng, 0.0, 2.0 * std::numbers::pi);
  const double speed = uniform_in(rng, s.speed_min, s.speed_max);
  double yaw = uniform_in(rng, -std::numbers::pi, std::numbers::pi);
  Vec3 p{uniform_in(rng, -100, 100), uniform_in(rng, -100, 100), 0.0};
  RawTrajectory out;
  for (int i = 0; i < s.length; ++i) {
    out.poses.push_back({rot_z(yaw), p});
    const double kappa = k0 + amp * std::sin(2.0 * std::numbers::pi * freq * i * s.dt + phase);
    yaw += speed * kappa * s.dt;
    p += speed * s.dt * Vec3{std::cos(yaw), std::sin(yaw), 0.0};
  }
  return out;
}

// Body-frame angular velocity performing a random walk, Brownian translation.
inline RawTrajectory tumbling_walk(const SynthSpec& s, RngState& rng) {
  const double sw = s.omega_sigma;
  Vec3 omega = sample_gaussian_vec3(1.0, rng) * sw;
  RotationMatrix r = exp_so3(sample_gaussian_vec3(2.0, rng));
  const double step = 0.5 * (s.speed_min + s.speed_max) * std::sqrt(s.dt);
  Vec3 p{uniform_in(rng, -100, 100), uniform_in(rng, -100, 100), uniform_in(rng, -10, 10)};
  RawTrajectory out;
  for (int i = 0; i < s.length; ++i) {
    out.poses.push_back({r, p});
    r = compose(r, exp_so3(s.dt * omega));
    omega += sample_gaussian_vec3(1.0, rng) * (sw * std::sqrt(s.dt));
    p += sample_gaussian_vec3(1.0, rng) * step;
  }
  return out;
}

// Coordinated turn along a helix: heading follows the tangent, roll banks
// into the turn, pitch follows the climb angle.
inline RawTrajectory helix_drone(const SynthSpec& s, RngState& rng) {
  constexpr double g = 9.81;
  const double radius = uniform_in(rng, s.radius_min, s.radius_max);
  const double speed = uniform_in(rng, s.speed_min, s.speed_max);
  const double climb = uniform_in(rng, -s.climb_max, s.climb_max);
  const double dir = rng.uniform() < 0.5 ? -1.0 : 1.0;
  const double rate = dir * speed / radius;
  const double bank = std::atan(speed * rate / g);
  const double pitch = -std::atan2(climb, std::max(speed, 1e-9));
  double phi = uniform_in(rng, -std::numbers::pi, std::numbers::pi);
  const Vec3 centre{uniform_in(rng, -100, 100), uniform_in(rng, -100, 100), uniform_in(rng, 10, 50)};
  RawTrajectory out;
  for (int i = 0; i < s.length; ++i) {
    const double tt = i * s.dt;
    const Vec3 p = centre + Vec3{radius * std::cos(phi), radius * std::sin(phi), climb * tt};
    const double heading = phi + dir * 0.5 * std::numbers::pi;
    out.poses.push_back({compose(compose(rot_z(heading), rot_y(pitch)), rot_x(bank)), p});
    phi += rate * s.dt;
  }
  return out;
}

}  // namespace detail

/// `count` trajectories; trajectory i draws from its own stream of `seed`.
inline std::vector<RawTrajectory> generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  std::vector<RawTrajectory> out;
  out.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    RngState rng(spec.seed, static_cast<std::uint64_t>(spec.family) * 0x100000000ULL + static_cast<std::uint64_t>(i));
    RawTrajectory t;
    switch (spec.family) {
      case Family::ArcVehicle: t = detail::arc_vehicle(spec, rng); break;
      case Family::TumblingWalk: t = detail::tumbling_walk(spec, rng); break;
      case Family::HelixDrone: t = detail::helix_drone(spec, rng); break;
    }
    t.label = to_string(spec.family);
    out.push_back(std::move(t));
  }
  return out;
}

/// Convenience: `count` synthetic trajectories of exactly one window each.
inline WindowedDataset synthetic_windows(SynthSpec spec, bool canonicalize_rotation = true) {
  WindowedDataset ds;
  ds.length = spec.length;
  for (const auto& t : generate_synthetic(spec)) ds.append(window_and_normalize(t, {spec.length, spec.length, canonicalize_rotation}));
  return ds;
}

}  // namespace dose3::data
