// dose3 command-line tool. Progress and errors go to stderr as JSON lines;
// the exit code is 0 on success and 2 on any error.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dose3/dose3.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dose3;
using json = nlohmann::ordered_json;

namespace {

void log_event(const std::string& level, const std::string& event, json fields = json::object()) {
  json j;
  j["level"] = level;
  j["event"] = event;
  for (auto& [k, v] : fields.items()) j[k] = v;
  std::cerr << j.dump() << std::endl;
}

/// A dataset file, or every *.dat file of a directory in name order.
data::WindowedDataset load_datasets(const std::string& path) {
  if (!fs::is_directory(path)) return data::load_dataset(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".dat") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorKind::IoError, "no .dat files in " + path);
  data::WindowedDataset all;
  for (const auto& f : files) all.append(data::load_dataset(f.string()));
  return all;
}

data::RawTrajectory load_trajectory(const std::string& path, const std::string& format) {
  data::RawTrajectory t;
  if (format == "kitti") {
    t = data::parse_kitti_poses(path);
  } else if (format == "tum") {
    t = data::parse_tum_trajectory(path);
  } else {
    throw Error(ErrorKind::ConfigError, "unknown trajectory format '" + format + "' (kitti, tum)");
  }
  for (const auto& w : t.warnings) log_event("warn", "parse", {{"file", path}, {"message", w}});
  return t;
}

struct ScheduleArgs {
  int steps = 30;
  double beta_min = 1e-4;
  double beta_max = 0.2;
};

void add_schedule_options(CLI::App* cmd, ScheduleArgs& a) {
  cmd->add_option("--steps", a.steps, "Diffusion steps T")->capture_default_str();
  cmd->add_option("--beta-min", a.beta_min, "First beta of the linear schedule")->capture_default_str();
  cmd->add_option("--beta-max", a.beta_max, "Last beta of the linear schedule")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based OOD detection for SE(3) pose trajectories"};
  app.require_subcommand(1);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic windowed dataset");
  std::string family = "arc-vehicle", gen_out, gen_csv;
  data::SynthSpec synth;
  bool gen_no_canon = false;
  gen->add_option("--family", family, "arc-vehicle | tumbling-walk | helix-drone")->capture_default_str();
  gen->add_option("--count", synth.count, "Number of windows")->capture_default_str();
  gen->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  gen->add_option("--seq-len", synth.length, "Window length L")->capture_default_str();
  gen->add_option("--curvature", synth.curvature_range, "Max |curvature| (arc-vehicle)")->capture_default_str();
  gen->add_option("--omega-sigma", synth.omega_sigma, "Angular-velocity scale (tumbling-walk)")->capture_default_str();
  gen->add_option("--speed-min", synth.speed_min)->capture_default_str();
  gen->add_option("--speed-max", synth.speed_max)->capture_default_str();
  gen->add_option("--out", gen_out, "Output dataset file")->required();
  gen->add_option("--csv", gen_csv, "Also export a CSV dump");
  gen->add_flag("--no-rot-canon", gen_no_canon, "Keep absolute window orientations");

  // ingest
  auto* ing = app.add_subcommand("ingest", "Window and normalize pose files into a dataset");
  std::string ing_format = "kitti", ing_out, ing_csv;
  std::vector<std::string> ing_inputs;
  data::WindowOptions wopt;
  bool ing_no_canon = false;
  ing->add_option("--format", ing_format, "kitti | tum")->capture_default_str();
  ing->add_option("--input,inputs", ing_inputs, "Pose files")->required();
  ing->add_option("--seq-len", wopt.length, "Window length L")->capture_default_str();
  ing->add_option("--stride", wopt.stride, "Window stride (default: L)");
  ing->add_option("--out", ing_out, "Output dataset file")->required();
  ing->add_option("--csv", ing_csv, "Also export a CSV dump");
  ing->add_flag("--no-rot-canon", ing_no_canon, "Keep absolute window orientations");

  // train
  auto* tr = app.add_subcommand("train", "Train the noise estimator");
  std::string tr_data, tr_out, tr_curve, tr_resume;
  ScheduleArgs tr_sched;
  TrainConfig tcfg;
  nn::ArchConfig arch;
  int tr_seq_len = 0;
  std::uint64_t init_seed = 0;
  tr->add_option("--data", tr_data, "Dataset file or directory of .dat files")->required();
  add_schedule_options(tr, tr_sched);
  tr->add_option("--seq-len", tr_seq_len, "Expected window length (checked against the data)");
  tr->add_option("--epochs", tcfg.epochs)->capture_default_str();
  tr->add_option("--seed", tcfg.seed)->capture_default_str();
  tr->add_option("--init-seed", init_seed, "Parameter initialization seed")->capture_default_str();
  tr->add_option("--batch-size", tcfg.batch_size)->capture_default_str();
  tr->add_option("--lr", tcfg.adam.lr)->capture_default_str();
  tr->add_option("--width", arch.base_width, "Base channel width")->capture_default_str();
  tr->add_option("--depth", arch.depth, "Number of down/up levels")->capture_default_str();
  tr->add_option("--heads", arch.attention_heads)->capture_default_str();
  tr->add_option("--groups", arch.norm_groups)->capture_default_str();
  tr->add_option("--temb-dim", arch.time_embed_dim)->capture_default_str();
  tr->add_option("--out", tr_out, "Checkpoint path (rewritten every epoch)")->required();
  tr->add_option("--curve", tr_curve, "Training-curve CSV");
  tr->add_option("--resume", tr_resume, "Resume from a checkpoint written by train");

  // fit
  auto* fit = app.add_subcommand("fit", "Fit the metric-group density on inlier windows");
  std::string fit_ckpt, fit_data, fit_out, fit_stats;
  int fit_k = 1, fit_steps = 0;
  std::uint64_t fit_seed = 0;
  bool fit_no_split = false;
  fit->add_option("--ckpt", fit_ckpt)->required();
  fit->add_option("--data", fit_data, "Inlier dataset file or directory")->required();
  fit->add_option("--components", fit_k, "Mixture components K")->capture_default_str();
  fit->add_option("--steps", fit_steps, "Diffusion steps (default: from checkpoint)");
  fit->add_option("--seed", fit_seed)->capture_default_str();
  fit->add_option("--out", fit_out, "Density file")->required();
  fit->add_option("--stats", fit_stats, "Metric-group CSV cache");
  fit->add_flag("--no-axis-split", fit_no_split, "Pool the rotation axes (12-d metrics)");

  // eval
  auto* ev = app.add_subcommand("eval", "ID vs OOD experiment with AUROC report");
  eval::ExperimentSpec es;
  std::string ev_report, ev_format, ev_hist;
  bool ev_no_split = false;
  ev->add_option("--ckpt", es.checkpoint)->required();
  ev->add_option("--id", es.id_data, "Inlier dataset")->required();
  ev->add_option("--ood", es.ood_data, "Outlier dataset")->required();
  ev->add_option("--steps", es.steps, "Diffusion steps (default: from checkpoint)");
  ev->add_option("--seq-len", es.seq_len, "Expected window length");
  ev->add_option("--seed", es.seed)->capture_default_str();
  ev->add_option("--components", es.components)->capture_default_str();
  ev->add_option("--bins", es.histogram_bins)->capture_default_str();
  ev->add_option("--method", es.method, "Row label in the report");
  ev->add_option("--report", ev_report, "Report path")->required();
  ev->add_option("--format", ev_format, "markdown | csv | json-lines (default: from extension)");
  ev->add_option("--hist", ev_hist, "Histogram SVG path (counts go next to it as .csv)");
  ev->add_flag("--no-axis-split", ev_no_split, "Pool the rotation axes (12-d metrics)");

  // score
  auto* sc = app.add_subcommand("score", "Score query trajectories against a fitted density");
  std::string sc_ckpt, sc_density, sc_traj, sc_format = "kitti";
  int sc_steps = 0, sc_stride = 0, sc_seq_len = 128;
  std::uint64_t sc_seed = 0;
  bool sc_no_canon = false;
  sc->add_option("--ckpt", sc_ckpt)->required();
  sc->add_option("--density", sc_density)->required();
  sc->add_option("--traj", sc_traj, "Pose file or dataset (.dat)")->required();
  sc->add_option("--format", sc_format, "kitti | tum | dat")->capture_default_str();
  sc->add_option("--steps", sc_steps, "Diffusion steps (default: from checkpoint)");
  sc->add_option("--seq-len", sc_seq_len, "Window length for pose files")->capture_default_str();
  sc->add_option("--stride", sc_stride, "Window stride for pose files (default: L)");
  sc->add_option("--seed", sc_seed)->capture_default_str();
  sc->add_flag("--no-rot-canon", sc_no_canon, "Keep absolute window orientations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    log_event("error", "usage", {{"kind", "ConfigError"}, {"message", e.what()}});
    return 2;
  }

  try {
    if (*gen) {
      synth.family = data::parse_family(family);
      const auto ds = data::synthetic_windows(synth, !gen_no_canon);
      data::save_dataset(ds, gen_out);
      if (!gen_csv.empty()) data::export_dataset_csv(ds, gen_csv);
      log_event("info", "gen-synth", {{"family", family}, {"windows", ds.size()}, {"out", gen_out}});
    } else if (*ing) {
      wopt.canonicalize_rotation = !ing_no_canon;
      data::WindowedDataset ds;
      ds.length = wopt.length;
      for (const auto& in : ing_inputs) {
        const auto t = load_trajectory(in, ing_format);
        const auto w = data::window_and_normalize(t, wopt);
        log_event("info", "ingest", {{"file", in}, {"poses", t.size()}, {"windows", w.size()}});
        ds.append(w);
      }
      data::save_dataset(ds, ing_out);
      if (!ing_csv.empty()) data::export_dataset_csv(ds, ing_csv);
      log_event("info", "ingest-done", {{"windows", ds.size()}, {"out", ing_out}});
    } else if (*tr) {
      const auto ds = load_datasets(tr_data);
      if (tr_seq_len != 0 && tr_seq_len != ds.length) {
        throw Error(ErrorKind::ShapeError, "data holds windows of length " + std::to_string(ds.length) +
                                               ", --seq-len asks for " + std::to_string(tr_seq_len));
      }
      tcfg.schedule = {tr_sched.steps, tr_sched.beta_min, tr_sched.beta_max};
      tcfg.checkpoint_path = tr_out;
      nn::EstimatorModel model;
      std::optional<nn::TrainingState> state;
      if (!tr_resume.empty()) {
        auto loaded = nn::load_checkpoint_full(tr_resume);
        model = std::move(loaded.model);
        state = std::move(loaded.state);
        if (!state) throw Error(ErrorKind::ConfigError, tr_resume + " holds no training state");
        log_event("info", "resume", {{"ckpt", tr_resume}, {"epoch", state->epoch}});
      } else {
        model = nn::make_model(arch, init_seed, tcfg.schedule);
      }
      log_event("info", "train-start", {{"windows", ds.size()}, {"seq_len", ds.length}, {"parameters", model.parameter_count()}});
      tcfg.on_epoch = [](int epoch, const LossComponents& l, double secs) {
        log_event("info", "epoch", {{"epoch", epoch}, {"loss_x0_trans", l.x0_trans}, {"loss_x0_rot", l.x0_rot},
                                    {"loss_eps_trans", l.eps_trans}, {"loss_eps_rot", l.eps_rot}, {"seconds", secs}});
      };
      const auto report = train(model, ds.windows, tcfg, state ? &*state : nullptr);
      if (!tr_curve.empty()) write_train_curve(report, tr_curve);
      log_event("info", "train-done", {{"steps", report.steps}, {"seconds", report.wall_seconds}, {"ckpt", tr_out}});
    } else if (*fit) {
      const auto model = nn::load_checkpoint(fit_ckpt);
      const auto ds = load_datasets(fit_data);
      ScheduleConfig sched = model.schedule;
      if (fit_steps != 0) sched.steps = fit_steps;
      const auto layout = fit_no_split ? ood::MetricLayout::Pooled : ood::MetricLayout::AxisSplit;
      const auto stats = ood::compute_metric_groups(ds.windows, ood::model_estimator(model), make_schedule(sched),
                                                    RngState(fit_seed, 1), layout);
      const auto density = ood::fit_density(stats, fit_k, fit_seed);
      ood::save_density(density, fit_out);
      if (!fit_stats.empty()) ood::write_metrics_csv(fit_stats, stats, ds.labels);
      log_event("info", "fit-done", {{"windows", ds.size()}, {"dim", density.dim()}, {"threshold", density.threshold},
                                     {"out", fit_out}});
    } else if (*ev) {
      es.axis_split = !ev_no_split;
      const auto report = eval::run_experiment(es);
      const auto fmt = ev_format.empty() ? eval::report_format_for(ev_report) : eval::parse_report_format(ev_format);
      eval::emit_report(std::span<const eval::EvalReport>(&report, 1), ev_report, fmt);
      if (!ev_hist.empty()) {
        std::vector<eval::Histogram> hs = report.metric_histograms;
        hs.insert(hs.end(), report.eps_histograms.begin(), report.eps_histograms.end());
        eval::write_histogram_svg(ev_hist, hs);
        eval::write_histogram_csv(eval::replace_extension(ev_hist, ".csv"), hs);
      }
      log_event("info", "eval-done", {{"id", report.id_label}, {"ood", report.ood_label}, {"auroc", report.auroc},
                                      {"metric_dim", report.metric_dim}, {"seconds", report.seconds}, {"report", ev_report}});
    } else if (*sc) {
      const auto model = nn::load_checkpoint(sc_ckpt);
      const auto density = ood::load_density(sc_density);
      ScheduleConfig sched = model.schedule;
      if (sc_steps != 0) sched.steps = sc_steps;
      const auto s = make_schedule(sched);
      data::WindowedDataset ds;
      if (sc_format == "dat") {
        ds = data::load_dataset(sc_traj);
      } else {
        const auto t = load_trajectory(sc_traj, sc_format);
        ds = data::window_and_normalize(t, {sc_seq_len, sc_stride, !sc_no_canon});
      }
      const auto stats = ood::compute_metric_groups(ds.windows, ood::model_estimator(model), s, RngState(sc_seed, 4),
                                                    density.layout);
      const auto ll = ood::log_likelihoods(density, stats);
      std::size_t flagged = 0;
      for (std::size_t i = 0; i < ll.size(); ++i) {
        const bool is_ood = ll[i] < density.threshold;
        flagged += is_ood;
        json j;
        j["window"] = i;
        j["loglik"] = ll[i];
        j["is_ood"] = is_ood;
        std::cout << j.dump() << '\n';
      }
      log_event("info", "score-done", {{"windows", ll.size()}, {"flagged", flagged}, {"threshold", density.threshold}});
    }
  } catch (const Error& e) {
    log_event("error", "failed", {{"kind", std::string(to_string(e.kind()))}, {"message", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    log_event("error", "failed", {{"kind", "Internal"}, {"message", e.what()}});
    return 2;
  }
  return 0;
}
