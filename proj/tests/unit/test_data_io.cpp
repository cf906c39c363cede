#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dose3/data_io.hpp"
#include "tempdir.hpp"

using namespace dose3;
using namespace dose3::data;

namespace {

ErrorKind kind_of(const std::function<void()>& f, std::size_t* line = nullptr) {
  try {
    f();
  } catch (const Error& e) {
    if (line) *line = e.line();
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::IoError;
}

double max_rot_err(const RotationMatrix& a, const RotationMatrix& b) {
  double m = 0.0;
  for (int k = 0; k < 9; ++k) m = std::max(m, std::abs(a.matrix().m[k] - b.matrix().m[k]));
  return m;
}

RawTrajectory random_trajectory(int n, std::uint64_t seed) {
  RngState rng(seed);
  RawTrajectory t;
  t.label = "rand";
  for (int i = 0; i < n; ++i) {
    t.poses.push_back({exp_so3(sample_gaussian_vec3(1.0, rng)), sample_gaussian_vec3(50.0, rng)});
    t.timestamps.push_back(0.1 * i + 1e9);
  }
  return t;
}

// Mean geodesic step angle over all consecutive poses.
double mean_step_angle(const std::vector<RawTrajectory>& ts) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& t : ts)
    for (std::size_t i = 1; i < t.size(); ++i, ++n)
      s += std::sqrt(rot_distance(t.poses[i - 1].rotation, t.poses[i].rotation));
  return s / static_cast<double>(n);
}

}  // namespace

TEST(Kitti, IdentityLine) {
  std::istringstream in("1 0 0 0 0 1 0 0 0 0 1 0\n");
  const auto t = parse_kitti_poses(in);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(max_rot_err(t.poses[0].rotation, RotationMatrix()), 0.0);
  EXPECT_EQ(t.poses[0].translation, Vec3{});
  EXPECT_TRUE(t.timestamps.empty());
}

TEST(Kitti, TranslationColumn) {
  std::istringstream in("0 -1 0 1.5  1 0 0 -2  0 0 1 3e1\n\n");
  const auto t = parse_kitti_poses(in);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t.poses[0].translation, (Vec3{1.5, -2.0, 30.0}));
  EXPECT_LT(max_rot_err(t.poses[0].rotation, rot_z(std::numbers::pi / 2)), 1e-15);
}

TEST(Kitti, EmptyFileWarns) {
  std::istringstream in("");
  const auto t = parse_kitti_poses(in);
  EXPECT_EQ(t.size(), 0u);
  EXPECT_FALSE(t.warnings.empty());
}

TEST(Kitti, Errors) {
  std::size_t line = 0;
  EXPECT_EQ(kind_of([] {
              std::istringstream in("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n");
              parse_kitti_poses(in);
            }, &line),
            ErrorKind::ParseError);
  EXPECT_EQ(line, 2u);
  EXPECT_EQ(kind_of([] {
              std::istringstream in("\n1 0 0 0 0 1 0 0 0 0 1 x\n");
              parse_kitti_poses(in);
            }, &line),
            ErrorKind::ParseError);
  EXPECT_EQ(line, 2u);
  EXPECT_EQ(kind_of([] {
              std::istringstream in("1 0 0 0 0 1 0 0 0 0 1.01 0\n");
              parse_kitti_poses(in);
            }, &line),
            ErrorKind::InvalidRotation);
  EXPECT_EQ(line, 1u);
  EXPECT_EQ(kind_of([] { parse_kitti_poses(std::string("/nonexistent/poses.txt")); }), ErrorKind::IoError);
}

TEST(Kitti, SmallDriftIsRepaired) {
  std::istringstream in("1.0001 0 0 0 0 1 0 0 0 0 1 0\n");
  const auto t = parse_kitti_poses(in);
  const auto& m = t.poses[0].rotation.matrix();
  EXPECT_LT(so3::orthonormality_error(m), 1e-12);
  EXPECT_NEAR(m(0, 0), 1.0, 1e-12);
}

TEST(Kitti, RoundTrip) {
  const auto t = random_trajectory(50, 1);
  std::stringstream ss;
  write_kitti_poses(ss, t);
  const auto r = parse_kitti_poses(ss);
  ASSERT_EQ(r.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_LE(max_rot_err(r.poses[i].rotation, t.poses[i].rotation), 1e-9);
    EXPECT_LE(norm(r.poses[i].translation - t.poses[i].translation), 1e-9);
  }
}

TEST(Kitti, FileRoundTripUsesStemAsLabel) {
  check::TempDir dir;
  const auto t = random_trajectory(5, 2);
  write_kitti_poses(dir.file("seq07.txt"), t);
  const auto r = parse_kitti_poses(dir.file("seq07.txt"));
  EXPECT_EQ(r.label, "seq07");
  EXPECT_EQ(r.size(), 5u);
}

TEST(Tum, IdentityAndQuarterTurn) {
  std::istringstream in(
      "# timestamp tx ty tz qx qy qz qw\n"
      "0.0 1 2 3 0 0 0 1\n"
      "0.1 0 0 0 0 0 0.70710678118654752 0.70710678118654752\n");
  const auto t = parse_tum_trajectory(in);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.timestamps, (std::vector<double>{0.0, 0.1}));
  EXPECT_EQ(max_rot_err(t.poses[0].rotation, RotationMatrix()), 0.0);
  EXPECT_EQ(t.poses[0].translation, (Vec3{1, 2, 3}));
  EXPECT_LT(max_rot_err(t.poses[1].rotation, rot_z(std::numbers::pi / 2)), 1e-15);
}

TEST(Tum, Errors) {
  std::size_t line = 0;
  EXPECT_EQ(kind_of([] {
              std::istringstream in("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n");
              parse_tum_trajectory(in);
            }, &line),
            ErrorKind::OrderError);
  EXPECT_EQ(line, 2u);
  EXPECT_EQ(kind_of([] {
              std::istringstream in("# c\n1.0 0 0 0 0 0 0 1.01\n");
              parse_tum_trajectory(in);
            }, &line),
            ErrorKind::InvalidRotation);
  EXPECT_EQ(line, 2u);
  EXPECT_EQ(kind_of([] {
              std::istringstream in("1.0 0 0 0 0 0 1\n");
              parse_tum_trajectory(in);
            }, &line),
            ErrorKind::ParseError);
  EXPECT_EQ(line, 1u);
  // A norm within tolerance is accepted and renormalized.
  std::istringstream ok("1.0 0 0 0 0 0 0 1.0005\n");
  const auto t = parse_tum_trajectory(ok);
  EXPECT_LT(max_rot_err(t.poses[0].rotation, RotationMatrix()), 1e-15);
}

TEST(Tum, RoundTrip) {
  const auto t = random_trajectory(200, 3);
  std::stringstream ss;
  write_tum_trajectory(ss, t);
  const auto r = parse_tum_trajectory(ss);
  ASSERT_EQ(r.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_LE(max_rot_err(r.poses[i].rotation, t.poses[i].rotation), 1e-9) << i;
    EXPECT_LE(norm(r.poses[i].translation - t.poses[i].translation), 1e-9);
    EXPECT_EQ(r.timestamps[i], t.timestamps[i]);
  }
}

TEST(Quaternion, RoundTripCoversAllBranches) {
  // Angles near pi exercise the non-trace branches.
  for (const Vec3 axis : {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}, Vec3{1, 1, 1} / std::sqrt(3.0)}) {
    for (double angle : {0.0, 0.3, 2.0, 3.1, std::numbers::pi}) {
      const RotationMatrix r = exp_so3(angle * axis);
      const auto q = rotation_to_quaternion(r);
      EXPECT_GE(q[3], 0.0);
      EXPECT_NEAR(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3], 1.0, 1e-14);
      EXPECT_LT(max_rot_err(quaternion_to_rotation(q[0], q[1], q[2], q[3]), r), 1e-14);
    }
  }
}

TEST(Window, ConstantPose) {
  RawTrajectory t;
  for (int i = 0; i < 10; ++i) t.poses.push_back({exp_so3({0.3, -0.2, 1.0}), {4, 5, 6}});
  const auto ds = window_and_normalize(t, 10);
  ASSERT_EQ(ds.size(), 1u);
  for (std::size_t l = 0; l < 10; ++l) {
    EXPECT_EQ(ds.windows[0].translations[l], Vec3{});
    EXPECT_LT(max_rot_err(ds.windows[0].rotations[l], RotationMatrix()), 1e-15);
  }
  EXPECT_EQ(ds.meta[0].scale, 1.0);
}

TEST(Window, StraightLine) {
  RawTrajectory t;
  for (int i = 0; i <= 5; ++i) t.poses.push_back({RotationMatrix(), {10.0 + i, -3.0, 2.0}});
  const auto ds = window_and_normalize(t, 6);
  const auto& w = ds.windows[0];
  for (int i = 0; i <= 5; ++i) {
    EXPECT_DOUBLE_EQ(w.translations[i].x, i / 5.0);
    EXPECT_EQ(w.translations[i].y, 0.0);
    EXPECT_EQ(w.translations[i].z, 0.0);
  }
  EXPECT_DOUBLE_EQ(ds.meta[0].scale, 5.0);
  EXPECT_EQ(ds.meta[0].origin.translation, (Vec3{10, -3, 2}));
}

TEST(Window, MaxComponentIsOneAndStartsAtIdentity) {
  const auto t = random_trajectory(300, 4);
  const auto ds = window_and_normalize(t, 32, 16);
  for (const auto& w : ds.windows) {
    double mx = 0.0;
    for (const auto& p : w.translations) mx = std::max({mx, std::abs(p.x), std::abs(p.y), std::abs(p.z)});
    EXPECT_EQ(mx, 1.0);
    EXPECT_EQ(w.translations[0], Vec3{});
    EXPECT_LT(max_rot_err(w.rotations[0], RotationMatrix()), 1e-15);
  }
}

TEST(Window, RotationCanonicalizationIsLeftTranslation) {
  const auto t = random_trajectory(20, 5);
  const auto on = window_and_normalize(t, {10, 10, true});
  const auto off = window_and_normalize(t, {10, 10, false});
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& r0 = t.poses[10 * k].rotation;
    for (std::size_t l = 0; l < 10; ++l) {
      EXPECT_EQ(max_rot_err(off.windows[k].rotations[l], t.poses[10 * k + l].rotation), 0.0);
      EXPECT_LT(max_rot_err(compose(r0, on.windows[k].rotations[l]), t.poses[10 * k + l].rotation), 1e-14);
    }
  }
}

TEST(Window, Counts) {
  const auto t = random_trajectory(103, 6);
  const auto disjoint = window_and_normalize(t, 10);
  EXPECT_EQ(disjoint.size(), 10u);
  // Disjoint windows partition the first floor(n/L)*L poses.
  for (std::size_t k = 0; k < disjoint.size(); ++k) EXPECT_EQ(disjoint.meta[k].origin.translation, t.poses[10 * k].translation);
  for (int stride : {1, 3, 7, 9}) {
    const auto ds = window_and_normalize(t, 10, stride);
    EXPECT_EQ(ds.size(), static_cast<std::size_t>((103 - 10) / stride + 1)) << stride;
    for (const auto& w : ds.windows) EXPECT_EQ(w.size(), 10u);
  }
  EXPECT_EQ(window_and_normalize(t, 103).size(), 1u);
}

TEST(Window, Errors) {
  const auto t = random_trajectory(5, 7);
  EXPECT_EQ(kind_of([&] { window_and_normalize(t, 6); }), ErrorKind::TooShort);
  EXPECT_EQ(kind_of([&] { window_and_normalize(t, 0); }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([&] { window_and_normalize(t, 3, -1); }), ErrorKind::ConfigError);
}

TEST(Window, NormalizationIsIdempotent) {
  const auto t = random_trajectory(64, 8);
  const auto once = window_and_normalize(t, 64);
  RawTrajectory again;
  for (std::size_t l = 0; l < 64; ++l) again.poses.push_back({once.windows[0].rotations[l], once.windows[0].translations[l]});
  const auto twice = window_and_normalize(again, 64);
  EXPECT_EQ(twice.meta[0].scale, 1.0);
  EXPECT_EQ(twice.meta[0].origin.translation, Vec3{});
  for (std::size_t l = 0; l < 64; ++l) {
    EXPECT_EQ(twice.windows[0].translations[l], once.windows[0].translations[l]);
    EXPECT_LT(max_rot_err(twice.windows[0].rotations[l], once.windows[0].rotations[l]), 1e-15);
  }
}

TEST(Window, TinyMotionUsesUnitScale) {
  RawTrajectory t;
  for (int i = 0; i < 4; ++i) t.poses.push_back({RotationMatrix(), {1e-8 * i, 0, 0}});
  const auto ds = window_and_normalize(t, 4);
  EXPECT_EQ(ds.meta[0].scale, 1.0);
  EXPECT_NEAR(ds.windows[0].translations[3].x, 3e-8, 1e-20);
}

TEST(Dataset, SaveLoadRoundTrip) {
  check::TempDir dir;
  SynthSpec spec;
  spec.count = 4;
  spec.length = 16;
  spec.seed = 3;
  auto ds = synthetic_windows(spec);
  spec.family = Family::HelixDrone;
  ds.append(synthetic_windows(spec));
  save_dataset(ds, dir.file("d.dat"));
  const auto r = load_dataset(dir.file("d.dat"));
  EXPECT_EQ(r.length, 16);
  ASSERT_EQ(r.size(), 8u);
  EXPECT_EQ(r.labels, ds.labels);
  EXPECT_EQ(r.labels.front(), "arc-vehicle");
  EXPECT_EQ(r.labels.back(), "helix-drone");
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t l = 0; l < 16; ++l) {
      EXPECT_EQ(r.windows[i].translations[l], ds.windows[i].translations[l]);
      EXPECT_EQ(max_rot_err(r.windows[i].rotations[l], ds.windows[i].rotations[l]), 0.0);
    }
}

TEST(Dataset, LoadErrors) {
  check::TempDir dir;
  SynthSpec spec;
  spec.count = 2;
  spec.length = 8;
  save_dataset(synthetic_windows(spec), dir.file("d.dat"));
  std::ifstream f(dir.file("d.dat"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), {});
  std::ofstream(dir.file("trunc.dat"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_EQ(kind_of([&] { load_dataset(dir.file("trunc.dat")); }), ErrorKind::ChecksumError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir.file("magic.dat"), std::ios::binary) << bad;
  EXPECT_EQ(kind_of([&] { load_dataset(dir.file("magic.dat")); }), ErrorKind::BadMagic);
  bad = bytes;
  bad[8] = 9;
  std::ofstream(dir.file("ver.dat"), std::ios::binary) << bad;
  EXPECT_EQ(kind_of([&] { load_dataset(dir.file("ver.dat")); }), ErrorKind::VersionMismatch);
  EXPECT_EQ(kind_of([&] { load_dataset(dir.file("missing.dat")); }), ErrorKind::IoError);
}

TEST(Dataset, CsvExport) {
  check::TempDir dir;
  SynthSpec spec;
  spec.count = 2;
  spec.length = 5;
  export_dataset_csv(synthetic_windows(spec), dir.file("d.csv"));
  std::ifstream f(dir.file("d.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(f, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 14);
    ++rows;
  }
  EXPECT_EQ(rows, 1 + 2 * 5);
}

TEST(Synth, DeterministicPerSeed) {
  for (auto fam : {Family::ArcVehicle, Family::TumblingWalk, Family::HelixDrone}) {
    SynthSpec spec;
    spec.family = fam;
    spec.count = 3;
    spec.length = 20;
    spec.seed = 9;
    const auto a = generate_synthetic(spec);
    const auto b = generate_synthetic(spec);
    spec.seed = 10;
    const auto c = generate_synthetic(spec);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(a[i].label, to_string(fam));
      for (std::size_t l = 0; l < 20; ++l) EXPECT_EQ(a[i].poses[l].translation, b[i].poses[l].translation);
    }
    EXPECT_NE(a[0].poses[5].translation, c[0].poses[5].translation);
    // Trajectory i does not depend on how many are generated.
    spec.seed = 9;
    spec.count = 1;
    EXPECT_EQ(generate_synthetic(spec)[0].poses[7].translation, a[0].poses[7].translation);
  }
}

TEST(Synth, ValidRotations) {
  for (auto fam : {Family::ArcVehicle, Family::TumblingWalk, Family::HelixDrone}) {
    SynthSpec spec;
    spec.family = fam;
    spec.count = 5;
    spec.length = 128;
    const auto ds = synthetic_windows(spec);
    for (const auto& w : ds.windows)
      for (std::size_t l = 0; l < w.size(); ++l) {
        EXPECT_LT(so3::orthonormality_error(w.rotations[l].matrix()), 1e-9);
        for (int c = 0; c < 3; ++c) EXPECT_LE(std::abs(w.translations[l][c]), 1.0);
      }
  }
}

TEST(Synth, ArcZeroCurvatureIsStraight) {
  SynthSpec spec;
  spec.curvature_range = 0.0;
  spec.count = 3;
  spec.length = 50;
  for (const auto& t : generate_synthetic(spec)) {
    const Vec3 d0 = t.poses[1].translation - t.poses[0].translation;
    for (std::size_t i = 1; i < t.size(); ++i) {
      EXPECT_LT(max_rot_err(t.poses[i].rotation, t.poses[0].rotation), 1e-15);
      const Vec3 d = t.poses[i].translation - t.poses[i - 1].translation;
      EXPECT_LT(norm(d - d0), 1e-9);
    }
  }
}

TEST(Synth, ArcIsPlanarYaw) {
  SynthSpec spec;
  spec.count = 3;
  spec.length = 40;
  for (const auto& t : generate_synthetic(spec))
    for (const auto& p : t.poses) {
      EXPECT_EQ(p.translation.z, 0.0);
      const Vec3 w = log_so3(p.rotation);
      EXPECT_NEAR(w.x, 0.0, 1e-12);
      EXPECT_NEAR(w.y, 0.0, 1e-12);
    }
}

TEST(Synth, TumbleZeroOmegaKeepsOrientation) {
  SynthSpec spec;
  spec.family = Family::TumblingWalk;
  spec.omega_sigma = 0.0;
  spec.count = 2;
  spec.length = 30;
  for (const auto& t : generate_synthetic(spec))
    for (const auto& p : t.poses) EXPECT_LT(max_rot_err(p.rotation, t.poses[0].rotation), 1e-15);
}

TEST(Synth, TumbleRotatesFiveTimesFasterThanArc) {
  SynthSpec spec;
  spec.count = 200;
  spec.length = 128;
  spec.seed = 31;
  const double arc = mean_step_angle(generate_synthetic(spec));
  spec.family = Family::TumblingWalk;
  const double tumble = mean_step_angle(generate_synthetic(spec));
  EXPECT_GE(tumble, 5.0 * arc) << arc << " vs " << tumble;
}

TEST(Synth, HelixClimbsAtConstantRate) {
  SynthSpec spec;
  spec.family = Family::HelixDrone;
  spec.count = 3;
  spec.length = 30;
  for (const auto& t : generate_synthetic(spec)) {
    const double dz = t.poses[1].translation.z - t.poses[0].translation.z;
    for (std::size_t i = 1; i < t.size(); ++i)
      EXPECT_NEAR(t.poses[i].translation.z - t.poses[i - 1].translation.z, dz, 1e-9);
    // Constant turn rate: consecutive relative rotations are equal.
    const RotationMatrix d0 = compose(t.poses[0].rotation.inverse(), t.poses[1].rotation);
    for (std::size_t i = 2; i < t.size(); ++i)
      EXPECT_LT(max_rot_err(compose(t.poses[i - 1].rotation.inverse(), t.poses[i].rotation), d0), 1e-9);
  }
}

TEST(Synth, InvalidSpec) {
  auto bad = [](auto mutate) {
    SynthSpec s;
    mutate(s);
    return kind_of([&] { generate_synthetic(s); });
  };
  EXPECT_EQ(bad([](SynthSpec& s) { s.curvature_range = -1; }), ErrorKind::ConfigError);
  EXPECT_EQ(bad([](SynthSpec& s) { s.omega_sigma = 20; }), ErrorKind::ConfigError);
  EXPECT_EQ(bad([](SynthSpec& s) { s.speed_min = 20; s.speed_max = 10; }), ErrorKind::ConfigError);
  EXPECT_EQ(bad([](SynthSpec& s) { s.radius_min = 0; }), ErrorKind::ConfigError);
  EXPECT_EQ(bad([](SynthSpec& s) { s.dt = 0; }), ErrorKind::ConfigError);
  EXPECT_EQ(bad([](SynthSpec& s) { s.length = 0; }), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { parse_family("spiral"); }), ErrorKind::ConfigError);
  EXPECT_EQ(parse_family("helix-drone"), Family::HelixDrone);
}
