#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dose3/data_io.hpp"
#include "json.hpp"
#include "tempdir.hpp"

using namespace dose3;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

RunResult run(const check::TempDir& dir, const std::string& args) {
  const std::string out = dir.file("stdout.txt"), err = dir.file("stderr.txt");
  const std::string cmd = std::string(DOSE3_CLI_PATH) + " " + args + " >" + out + " 2>" + err;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<nlohmann::json> json_lines(const std::string& text) {
  std::vector<nlohmann::json> v;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) v.push_back(nlohmann::json::parse(line));
  return v;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  check::TempDir dir;
  EXPECT_EQ(run(dir, "").code, 2);
  EXPECT_EQ(run(dir, "frobnicate").code, 2);
  const auto r = run(dir, "gen-synth --count 3");
  EXPECT_EQ(r.code, 2);
  const auto logs = json_lines(r.err);
  ASSERT_FALSE(logs.empty());
  EXPECT_EQ(logs.back()["level"], "error");
}

TEST(Cli, HelpExitsZero) {
  check::TempDir dir;
  const auto r = run(dir, "--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-synth"), std::string::npos);
}

TEST(Cli, LibraryErrorsExitTwoWithKind) {
  check::TempDir dir;
  auto r = run(dir, "gen-synth --family spiral --out " + dir.file("x.dat"));
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(json_lines(r.err).back()["kind"], "ConfigError");

  std::ofstream(dir.file("bad.txt")) << "1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3\n";
  r = run(dir, "ingest --format kitti --seq-len 1 --input " + dir.file("bad.txt") + " --out " + dir.file("o.dat"));
  EXPECT_EQ(r.code, 2);
  const auto last = json_lines(r.err).back();
  EXPECT_EQ(last["kind"], "ParseError");
  EXPECT_NE(last["message"].get<std::string>().find("line 2"), std::string::npos);

  r = run(dir, "eval --ckpt " + dir.file("missing.ckpt") + " --id a.dat --ood b.dat --report " + dir.file("r.md"));
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(json_lines(r.err).back()["kind"], "IoError");
}

TEST(Cli, IngestWindowsPoseFiles) {
  check::TempDir dir;
  data::SynthSpec spec;
  spec.length = 50;
  const auto t = data::generate_synthetic(spec)[0];
  data::write_kitti_poses(dir.file("seq.txt"), t);
  data::write_tum_trajectory(dir.file("seq.tum"), t);
  auto r = run(dir, "ingest --format kitti --seq-len 16 --stride 8 --input " + dir.file("seq.txt") + " --out " +
                        dir.file("k.dat"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto k = data::load_dataset(dir.file("k.dat"));
  EXPECT_EQ(k.size(), (50u - 16u) / 8u + 1u);
  EXPECT_EQ(k.labels[0], "seq");
  r = run(dir, "ingest --format tum --seq-len 16 --input " + dir.file("seq.tum") + " --out " + dir.file("t.dat"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(data::load_dataset(dir.file("t.dat")).size(), 3u);
}

// gen-synth -> train -> fit -> eval -> score on a tiny configuration.
TEST(Cli, EndToEnd) {
  check::TempDir dir;
  const std::string d = dir.path().string() + "/";
  ASSERT_EQ(run(dir, "gen-synth --family arc-vehicle --count 40 --seq-len 16 --seed 1 --out " + d + "arc.dat").code, 0);
  ASSERT_EQ(run(dir, "gen-synth --family tumbling-walk --count 10 --seq-len 16 --seed 2 --out " + d + "tw.dat").code, 0);

  auto r = run(dir, "train --data " + d + "arc.dat --epochs 2 --steps 4 --width 8 --depth 2 --heads 2 --groups 2 --temb-dim 8"
                    " --out " + d + "m.ckpt --curve " + d + "curve.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  int epochs = 0;
  for (const auto& j : json_lines(r.err)) epochs += j["event"] == "epoch";
  EXPECT_EQ(epochs, 2);
  EXPECT_FALSE(slurp(d + "curve.csv").empty());

  r = run(dir, "fit --ckpt " + d + "m.ckpt --data " + d + "arc.dat --out " + d + "d.gmm --stats " + d + "stats.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json_lines(r.err).back()["dim"], 24);

  r = run(dir, "eval --ckpt " + d + "m.ckpt --id " + d + "arc.dat --ood " + d + "tw.dat --seed 3 --report " + d +
                   "r.csv --hist " + d + "h.svg");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto done = json_lines(r.err).back();
  EXPECT_EQ(done["event"], "eval-done");
  const double au = done["auroc"];
  EXPECT_GE(au, 0.0);
  EXPECT_LE(au, 1.0);
  const std::string csv = slurp(d + "r.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,metric_dim,arc-vehicle/tumbling-walk");
  EXPECT_FALSE(slurp(d + "h.csv").empty());

  // Same seed, same bytes.
  ASSERT_EQ(run(dir, "eval --ckpt " + d + "m.ckpt --id " + d + "arc.dat --ood " + d + "tw.dat --seed 3 --report " + d +
                         "r2.csv").code, 0);
  EXPECT_EQ(slurp(d + "r2.csv"), csv);

  r = run(dir, "eval --no-axis-split --ckpt " + d + "m.ckpt --id " + d + "arc.dat --ood " + d + "tw.dat --report " + d +
                   "r3.md");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json_lines(r.err).back()["metric_dim"], 12);

  r = run(dir, "score --ckpt " + d + "m.ckpt --density " + d + "d.gmm --format dat --traj " + d + "tw.dat");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto scores = json_lines(r.out);
  ASSERT_EQ(scores.size(), 10u);
  EXPECT_TRUE(scores[0].contains("loglik"));
  EXPECT_TRUE(scores[0]["is_ood"].is_boolean());

  r = run(dir, "train --data " + d + "arc.dat --epochs 1 --resume " + d + "m.ckpt --out " + d + "m2.ckpt");
  EXPECT_EQ(r.code, 0) << r.err;
}
