// Command-line front end: one subcommand per pipeline step.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <spdlog/spdlog.h>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "podom/errors.hpp"
#include "podom/pipeline.hpp"

namespace {

using namespace podom;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string output;
  std::string dataset;
  bool quiet = false;
};

RunConfig resolve(const GlobalOptions& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.output.empty()) cfg.output_dir = g.output;
  if (!g.dataset.empty()) cfg.dataset_root = g.dataset;
  return cfg.seeded();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lidar odometry toolkit: preprocessing, training, evaluation and plots"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed; component seeds derive from it");
  app.add_option("--threads", g.threads, "Worker cap (1 guarantees determinism)")->check(CLI::PositiveNumber);
  app.add_option("--output", g.output, "Override the output directory");
  app.add_option("--dataset", g.dataset, "Override the dataset root");
  app.add_flag("--quiet", g.quiet, "Only log warnings and errors");

  auto* synth = app.add_subcommand("synth", "Write synthetic sequences in KITTI layout");
  std::string synth_root;
  std::vector<std::string> synth_seqs{"00"};
  SyntheticConfig synth_cfg;
  synth->add_option("--root", synth_root, "Dataset root to write")->required();
  synth->add_option("--sequences", synth_seqs, "Sequence names");
  synth->add_option("--frames", synth_cfg.n_frames, "Frames per sequence")->check(CLI::Range(2, 100000));
  synth->add_option("--points", synth_cfg.points_per_scan, "Points per scan")->check(CLI::PositiveNumber);

  auto* preprocess = app.add_subcommand("preprocess", "Sample scans into pair caches");
  auto* augment = app.add_subcommand("augment", "Label statistics, repetition weights, identity injection");
  bool tune = false;
  augment->add_flag("--tune", tune, "Search `a` against the reference added counts");

  auto* train = app.add_subcommand("train", "Train the hierarchical registration stages");
  std::optional<int> stage;
  train->add_option("--stage", stage, "Train only this stage")->check(CLI::PositiveNumber);

  auto* train_temporal = app.add_subcommand("train-temporal", "Extract tap features and train the temporal model");
  std::string tap = "fclf";
  train_temporal->add_option("--tap", tap, "Feature tap")->check(CLI::IsMember({"pref", "posf", "fclf"}));

  auto* eval = app.add_subcommand("eval", "Estimate test trajectories and write metric reports");
  int eval_stages = 0;
  std::string eval_tap;
  bool inject_gt = false;
  eval->add_option("--stage", eval_stages, "Use the first N stages (default: all trained)")->check(CLI::NonNegativeNumber);
  eval->add_option("--tap", eval_tap, "Evaluate the temporal model of this tap")
      ->check(CLI::IsMember({"pref", "posf", "fclf"}));
  eval->add_flag("--inject-gt", inject_gt, "Use ground truth as the estimate (sanity run)");

  auto* icp = app.add_subcommand("icp", "Frame-to-frame ICP baseline or refinement");
  std::string icp_init = "identity";
  icp->add_option("--icp-init", icp_init, "Initial estimate")->check(CLI::IsMember({"identity", "model"}));

  auto* plot = app.add_subcommand("plot", "Top-down trajectory SVGs and CSVs");

  auto* show = app.add_subcommand("config", "Print the effective configuration");

  CLI11_PARSE(app, argc, argv);

  spdlog::set_level(g.quiet ? spdlog::level::warn : spdlog::level::info);
  Eigen::setNbThreads(g.threads);

  try {
    if (synth->parsed()) {
      synth_cfg.seed = g.seed.value_or(0);
      run_synth(synth_root, synth_seqs, synth_cfg);
      return 0;
    }
    const RunConfig cfg = resolve(g);
    if (show->parsed()) {
      cfg.validate();
      std::cout << nlohmann::json(cfg).dump(2) << '\n';
    } else if (preprocess->parsed()) {
      run_preprocess(cfg);
    } else if (augment->parsed()) {
      RunConfig c = cfg;
      c.tune_augment = c.tune_augment || tune;
      run_augment(c);
    } else if (train->parsed()) {
      run_train(cfg, stage);
    } else if (train_temporal->parsed()) {
      run_train_temporal(cfg, tap_from_name(tap));
    } else if (eval->parsed()) {
      EvalOptions opt;
      opt.stages = eval_stages;
      if (!eval_tap.empty()) opt.temporal = tap_from_name(eval_tap);
      opt.inject_gt = inject_gt;
      run_eval(cfg, opt);
    } else if (icp->parsed()) {
      run_icp(cfg, icp_init == "model" ? IcpInit::kModel : IcpInit::kIdentity);
    } else if (plot->parsed()) {
      for (const auto& p : run_plot(cfg)) spdlog::info("plot: wrote {}", p.string());
    }
  } catch (const podom::Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
