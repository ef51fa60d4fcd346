#include "podom/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "podom/errors.hpp"
#include "podom/kitti_io.hpp"

namespace podom {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- component config serialization ----------------------------------------

namespace {

std::string fps_seed_name(FpsSeed::Kind k) {
  switch (k) {
    case FpsSeed::Kind::kFirstIndex: return "first";
    case FpsSeed::Kind::kRandom: return "random";
    case FpsSeed::Kind::kNearestCentroid: return "centroid";
  }
  return "first";
}

FpsSeed::Kind fps_seed_from_name(const std::string& s) {
  if (s == "first") return FpsSeed::Kind::kFirstIndex;
  if (s == "random") return FpsSeed::Kind::kRandom;
  if (s == "centroid") return FpsSeed::Kind::kNearestCentroid;
  throw ConfigError("sampler: unknown fps_seed '" + s + "'");
}

json sampler_json(const SamplerConfig& c) {
  return json{{"range_limit", c.range_limit},
              {"n_nonground", c.n_nonground},
              {"n_ground", c.n_ground},
              {"fps_seed", fps_seed_name(c.fps_seed)},
              {"seed", c.seed},
              {"ground",
               {{"ransac_iterations", c.ground.ransac_iterations},
                {"inlier_threshold", c.ground.inlier_threshold},
                {"max_normal_tilt_deg", c.ground.max_normal_tilt_deg},
                {"min_inlier_fraction", c.ground.min_inlier_fraction},
                {"seed", c.ground.seed}}}};
}

SamplerConfig sampler_from_json(const json& j) {
  SamplerConfig c;
  c.range_limit = j.value("range_limit", c.range_limit);
  c.n_nonground = j.value("n_nonground", c.n_nonground);
  c.n_ground = j.value("n_ground", c.n_ground);
  c.fps_seed = fps_seed_from_name(j.value("fps_seed", fps_seed_name(c.fps_seed)));
  c.seed = j.value("seed", c.seed);
  if (j.contains("ground")) {
    const json& g = j.at("ground");
    c.ground.ransac_iterations = g.value("ransac_iterations", c.ground.ransac_iterations);
    c.ground.inlier_threshold = g.value("inlier_threshold", c.ground.inlier_threshold);
    c.ground.max_normal_tilt_deg = g.value("max_normal_tilt_deg", c.ground.max_normal_tilt_deg);
    c.ground.min_inlier_fraction = g.value("min_inlier_fraction", c.ground.min_inlier_fraction);
    c.ground.seed = g.value("seed", c.ground.seed);
  }
  return c;
}

json augment_json(const AugmentConfig& c) {
  return json{{"a", c.a},
              {"divisor", c.divisor},
              {"identity_prob", c.identity_prob},
              {"rule", c.rule == RepetitionRule::kDivergence ? "divergence" : "literal"},
              {"seed", c.seed}};
}

AugmentConfig augment_from_json(const json& j) {
  AugmentConfig c;
  c.a = j.value("a", c.a);
  c.divisor = j.value("divisor", c.divisor);
  c.identity_prob = j.value("identity_prob", c.identity_prob);
  const std::string rule = j.value("rule", std::string("divergence"));
  if (rule == "divergence") {
    c.rule = RepetitionRule::kDivergence;
  } else if (rule == "literal") {
    c.rule = RepetitionRule::kLiteral;
  } else {
    throw ConfigError("augment: unknown rule '" + rule + "'");
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

json icp_json(const IcpConfig& c) {
  return json{{"max_iterations", c.max_iterations},
              {"convergence_tol", c.convergence_tol},
              {"max_correspondence_distance", c.max_correspondence_distance}};
}

IcpConfig icp_from_json(const json& j) {
  IcpConfig c;
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
  c.max_correspondence_distance = j.value("max_correspondence_distance", c.max_correspondence_distance);
  return c;
}

std::string full_precision(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

void to_json(json& j, const RunConfig& c) {
  j = json{{"dataset_root", c.dataset_root.string()},
           {"train_split", c.train_split},
           {"test_split", c.test_split},
           {"use_calibration", c.use_calibration},
           {"sampler", sampler_json(c.sampler)},
           {"augment", augment_json(c.augment)},
           {"tune_augment", c.tune_augment},
           {"regnet", c.regnet},
           {"training", c.training},
           {"temporal", c.temporal},
           {"temporal_training", c.temporal_training},
           {"icp", icp_json(c.icp)},
           {"output_dir", c.output_dir.string()},
           {"seed", c.seed}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  const RunConfig d;
  c.dataset_root = j.value("dataset_root", d.dataset_root.string());
  c.train_split = j.value("train_split", d.train_split);
  c.test_split = j.value("test_split", d.test_split);
  c.use_calibration = j.value("use_calibration", d.use_calibration);
  c.sampler = j.contains("sampler") ? sampler_from_json(j.at("sampler")) : d.sampler;
  c.augment = j.contains("augment") ? augment_from_json(j.at("augment")) : d.augment;
  c.tune_augment = j.value("tune_augment", d.tune_augment);
  c.regnet = j.contains("regnet") ? j.at("regnet").get<RegNetConfig>() : d.regnet;
  c.training = j.contains("training") ? j.at("training").get<TrainConfig>() : d.training;
  c.temporal = j.contains("temporal") ? j.at("temporal").get<TemporalConfig>() : d.temporal;
  c.temporal_training =
      j.contains("temporal_training") ? j.at("temporal_training").get<TemporalTrainConfig>() : d.temporal_training;
  c.icp = j.contains("icp") ? icp_from_json(j.at("icp")) : d.icp;
  c.output_dir = j.value("output_dir", d.output_dir.string());
  c.seed = j.value("seed", d.seed);
}

void RunConfig::validate(bool check_paths) const {
  if (train_split.empty()) throw ConfigError("run config: train split is empty");
  if (test_split.empty()) throw ConfigError("run config: test split is empty");
  std::set<std::string> seen;
  for (const auto& s : train_split) {
    if (!seen.insert(s).second) throw ConfigError("run config: sequence " + s + " listed twice");
  }
  for (const auto& s : test_split) {
    if (!seen.insert(s).second) throw ConfigError("run config: sequence " + s + " is in both splits or listed twice");
  }
  if (output_dir.empty()) throw ConfigError("run config: output_dir is empty");
  sampler.validate();
  augment.validate();
  regnet.validate();
  training.validate();
  temporal.validate();
  temporal_training.validate();
  icp.validate();
  if (sampler.n_nonground != regnet.n_nonground || sampler.n_ground != regnet.n_ground) {
    throw ConfigError(fmt::format("run config: sampler produces {}+{} points but the network expects {}+{}",
                                  sampler.n_nonground, sampler.n_ground, regnet.n_nonground, regnet.n_ground));
  }
  if (check_paths) {
    if (dataset_root.empty()) throw ConfigError("run config: dataset_root is not set");
    for (const auto& s : seen) {
      if (!fs::is_directory(dataset_root / "sequences" / s / "velodyne")) {
        throw ConfigError("run config: missing scans for sequence " + s + " under " + dataset_root.string());
      }
      if (!fs::is_regular_file(dataset_root / "poses" / (s + ".txt"))) {
        throw ConfigError("run config: missing poses for sequence " + s);
      }
    }
  }
}

RunConfig RunConfig::seeded() const {
  RunConfig c = *this;
  c.sampler.seed = seed;
  c.sampler.ground.seed = seed;
  c.augment.seed = seed + 1;
  c.regnet.init_seed = seed + 2;
  c.training.seed = seed + 3;
  c.temporal.init_seed = seed + 4;
  c.temporal_training.seed = seed + 5;
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  try {
    return j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

void write_run_config(const fs::path& path, const RunConfig& c) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << json(c).dump(2) << '\n';
}

// ---- layout -----------------------------------------------------------------

fs::path RunLayout::stage_model(int stage) const { return root / "models" / fmt::format("stage{}.pdtf", stage); }
fs::path RunLayout::stage_loss(int stage) const { return root / "models" / fmt::format("stage{}_loss.csv", stage); }
fs::path RunLayout::stage_dataset(int stage) const {
  return root / "models" / fmt::format("stage{}_train.pdpc", stage);
}
fs::path RunLayout::feature_cache(const std::string& seq, TapKind tap) const {
  return root / "features" / (seq + "_" + tap_name(tap) + ".pdtf");
}
fs::path RunLayout::temporal_model(TapKind tap) const { return root / "models" / ("temporal_" + tap_name(tap) + ".pdtf"); }
fs::path RunLayout::temporal_loss(TapKind tap) const {
  return root / "models" / ("temporal_" + tap_name(tap) + "_loss.csv");
}
fs::path RunLayout::trajectory(const std::string& seq, const std::string& method) const {
  return root / "trajectories" / (seq + "_" + method + ".txt");
}
fs::path RunLayout::trajectory_csv(const std::string& seq, const std::string& method) const {
  return root / "plots" / (seq + "_" + method + ".csv");
}
fs::path RunLayout::report(const std::string& seq, const std::string& method) const {
  return root / "reports" / (seq + "_" + method + ".json");
}
fs::path RunLayout::drift_csv(const std::string& seq, const std::string& method) const {
  return root / "reports" / (seq + "_" + method + "_drift.csv");
}
fs::path RunLayout::plot_svg(const std::string& seq, const std::string& method) const {
  return root / "plots" / (seq + "_" + method + ".svg");
}

namespace {

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw PipelineError("missing " + p.string() + "; run `" + producer + "` first");
}

RunLayout prepare(const RunConfig& cfg) {
  cfg.validate();
  RunLayout layout{cfg.output_dir};
  fs::create_directories(layout.root);
  write_run_config(layout.effective_config(), cfg);
  return layout;
}

std::vector<FramePair> load_pairs(const RunLayout& layout, const std::string& seq) {
  require(layout.pair_cache(seq), "preprocess");
  return read_pair_cache(layout.pair_cache(seq));
}

std::vector<EulerPose> labels_of(std::span<const FramePair> pairs) {
  std::vector<EulerPose> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.label);
  return out;
}

int trained_stage_count(const RunLayout& layout, int configured) {
  int n = 0;
  while (n < configured && fs::exists(layout.stage_model(n + 1))) ++n;
  return n;
}

std::vector<StageModel> load_stages(const RunLayout& layout, const RunConfig& cfg, int requested) {
  const int available = trained_stage_count(layout, cfg.training.stages);
  if (available == 0) throw PipelineError("no trained stage under " + layout.root.string() + "; run `train` first");
  const int use = requested == 0 ? available : requested;
  if (use < 1 || use > available) {
    throw PipelineError(fmt::format("asked for {} stages but {} are trained", use, available));
  }
  std::vector<StageModel> stages;
  for (int s = 1; s <= use; ++s) stages.push_back(load_stage(layout.stage_model(s)));
  return stages;
}

std::vector<const StageModel*> stage_pointers(const std::vector<StageModel>& stages) {
  std::vector<const StageModel*> out;
  for (const auto& s : stages) out.push_back(&s);
  return out;
}

std::vector<Pose> load_gt(const RunLayout& layout, const std::string& seq) {
  require(layout.gt_poses(seq), "preprocess");
  return read_poses(layout.gt_poses(seq));
}

SequenceResult finish_sequence(const RunLayout& layout, const std::string& seq, const std::string& method,
                               const std::vector<Pose>& est) {
  const std::vector<Pose> gt = load_gt(layout, seq);
  if (gt.size() != est.size()) {
    throw PipelineError(fmt::format("sequence {}: {} estimated poses for {} ground-truth poses", seq, est.size(),
                                    gt.size()));
  }
  SequenceResult r{seq, method, evaluate_trajectory(est, gt)};
  ensure_parent(layout.trajectory(seq, method));
  write_poses(layout.trajectory(seq, method), est);
  ensure_parent(layout.report(seq, method));
  write_report_json(layout.report(seq, method), r.report);
  write_drift_csv(layout.drift_csv(seq, method), r.report.drift);
  spdlog::info("{} {}: ATE {:.4f} m, RTE {:.4f} m, RRE {:.4f} deg", seq, method, r.report.ate_rmse,
               r.report.mean_rte, r.report.mean_rre);
  return r;
}

}  // namespace

// ---- subcommands ------------------------------------------------------------

void run_synth(const fs::path& root, std::span<const std::string> sequences, const SyntheticConfig& base) {
  if (sequences.empty()) throw ConfigError("synth: no sequence names given");
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    SyntheticConfig c = base;
    c.seed = base.seed + i;
    write_synthetic_sequence(root, sequences[i], make_synthetic_sequence(c));
    spdlog::info("synth: wrote sequence {} ({} frames)", sequences[i], c.n_frames);
  }
}

PreprocessSummary run_preprocess(const RunConfig& cfg) {
  cfg.validate(true);
  const RunLayout layout = prepare(cfg);
  PreprocessSummary summary;
  std::vector<std::string> all = cfg.train_split;
  all.insert(all.end(), cfg.test_split.begin(), cfg.test_split.end());
  for (const auto& seq : all) {
    const SequenceData data = load_sequence(cfg.dataset_root, seq);
    if (data.size() < 2) throw PipelineError("sequence " + seq + " has fewer than two frames");
    const std::vector<Pose> motions = relative_labels(data.global_poses);
    std::vector<FramePair> pairs;
    pairs.reserve(data.size() - 1);
    const Pose to_label_frame = cfg.use_calibration ? data.calib : Pose::identity();
    PointCloud prev = transform_cloud(sample_frame(data.scan(0), cfg.sampler), to_label_frame);
    for (std::size_t i = 1; i < data.size(); ++i) {
      PointCloud cur = transform_cloud(sample_frame(data.scan(i), cfg.sampler), to_label_frame);
      FramePair p;
      p.source = std::move(prev);
      p.target = cur;
      p.label = pose_to_euler(motions[i - 1]);
      pairs.push_back(std::move(p));
      prev = std::move(cur);
    }
    ensure_parent(layout.pair_cache(seq));
    write_pair_cache(layout.pair_cache(seq), pairs);
    write_poses(layout.gt_poses(seq), data.global_poses);
    summary.sequences.push_back(seq);
    summary.pair_counts.push_back(static_cast<int>(pairs.size()));
    spdlog::info("preprocess: sequence {} -> {} pairs", seq, pairs.size());
  }
  return summary;
}

AugmentRunSummary run_augment(const RunConfig& cfg) {
  const RunLayout layout = prepare(cfg);
  std::vector<FramePair> pairs;
  std::vector<std::string> origin;
  std::vector<PointCloud> frames;
  for (const auto& seq : cfg.train_split) {
    std::vector<FramePair> s = load_pairs(layout, seq);
    for (std::size_t i = 0; i < s.size(); ++i) {
      frames.push_back(s[i].source);
      origin.push_back(fmt::format("{},{}", seq, i));
    }
    if (!s.empty()) frames.push_back(s.back().target);
    for (auto& p : s) pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw PipelineError("augment: the train split holds no pairs");

  const std::vector<EulerPose> labels = labels_of(pairs);
  AugmentRunSummary out;
  out.stats = compute_stats(labels);
  AugmentConfig ac = cfg.augment;
  if (cfg.tune_augment) ac.a = tune_a(labels, out.stats, ac).a;
  out.a = ac.a;
  const AugmentResult weights = augment_weights(labels, out.stats, ac);
  out.added = weights.summary;
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].weight = weights.weights[i];

  std::mt19937_64 rng(ac.seed);
  const auto chosen = inject_identity(frames.size(), ac.identity_prob, rng);
  std::vector<FramePair> identity = make_identity_pairs(frames, chosen);
  out.identity_pairs = static_cast<int>(identity.size());

  ensure_parent(layout.augment_weights());
  {
    std::ofstream w(layout.augment_weights());
    if (!w) throw IoError("cannot open for writing: " + layout.augment_weights().string());
    w << "sequence,pair,weight\n";
    for (std::size_t i = 0; i < pairs.size(); ++i) w << origin[i] << ',' << pairs[i].weight << '\n';
  }
  write_histograms(layout.augment_histograms(), labels, weights.weights);

  for (auto& p : identity) pairs.push_back(std::move(p));
  out.total_pairs = static_cast<int>(pairs.size());
  write_pair_cache(layout.augmented_cache(), pairs);

  const json summary{{"mu_r", out.stats.mu_r},
                     {"sigma_r", out.stats.sigma_r},
                     {"mu_t", out.stats.mu_t},
                     {"sigma_t", out.stats.sigma_t},
                     {"a", out.a},
                     {"added_rotation", out.added.added_rotation},
                     {"added_translation", out.added.added_translation},
                     {"added_both", out.added.added_both},
                     {"pairs_rotation", out.added.pairs_rotation},
                     {"pairs_translation", out.added.pairs_translation},
                     {"pairs_both", out.added.pairs_both},
                     {"identity_pairs", out.identity_pairs},
                     {"total_pairs", out.total_pairs}};
  std::ofstream s(layout.augment_summary());
  if (!s) throw IoError("cannot open for writing: " + layout.augment_summary().string());
  s << summary.dump(2) << '\n';
  spdlog::info("augment: a = {}, +{} rotation, +{} translation, +{} both, {} identity pairs", out.a,
               out.added.added_rotation, out.added.added_translation, out.added.added_both, out.identity_pairs);
  return out;
}

void run_train(const RunConfig& cfg, std::optional<int> only_stage) {
  const RunLayout layout = prepare(cfg);
  const int n_stages = cfg.training.stages;
  const int first = only_stage.value_or(1);
  const int last = only_stage.value_or(n_stages);
  if (first < 1 || last > n_stages) {
    throw ConfigError(fmt::format("train: stage {} outside 1..{}", only_stage.value_or(0), n_stages));
  }
  require(layout.augmented_cache(), "augment");
  for (int s = first; s <= last; ++s) {
    ResidualDataset data;
    if (s == 1) {
      data.pairs = read_pair_cache(layout.augmented_cache());
      data.normalizer = LabelNormalizer::fit(labels_of(data.pairs));
    } else {
      require(layout.stage_model(s - 1), fmt::format("train --stage {}", s - 1));
      const StageModel prev = load_stage(layout.stage_model(s - 1));
      const std::vector<FramePair> prev_pairs =
          s == 2 ? read_pair_cache(layout.augmented_cache()) : read_pair_cache(layout.stage_dataset(s - 1));
      data = build_residual_dataset(prev_pairs, prev);
      write_pair_cache(layout.stage_dataset(s), data.pairs);
    }
    RegNetConfig rc = cfg.regnet;
    rc.init_seed = cfg.regnet.init_seed + static_cast<std::uint64_t>(s - 1);
    TrainConfig tc = cfg.training;
    tc.seed = cfg.training.seed + static_cast<std::uint64_t>(s - 1);
    StageModel model = make_stage_model(rc, data.normalizer, tc.loss, s);
    spdlog::info("train: stage {} on {} pairs", s, data.pairs.size());
    const TrainResult result = train_stage(model, data.pairs, tc, [&](const LossRecord& r) {
      if (r.step % 100 == 0) spdlog::info("stage {} step {} loss {:.5f}", s, r.step, r.total);
      return true;
    });
    ensure_parent(layout.stage_model(s));
    save_stage(layout.stage_model(s), model);
    write_loss_csv(layout.stage_loss(s), result.curve);
    if (result.diverged) {
      throw TrainingError(fmt::format("stage {} diverged after {} steps; the last finite state was saved", s,
                                      result.steps));
    }
  }
}

void run_train_temporal(const RunConfig& cfg, TapKind tap) {
  const RunLayout layout = prepare(cfg);
  require(layout.stage_model(1), "train");
  StageModel base = load_stage(layout.stage_model(1));
  std::vector<FeatureSequence> sequences;
  std::vector<EulerPose> all_labels;
  for (const auto& seq : cfg.train_split) {
    const std::vector<FramePair> pairs = load_pairs(layout, seq);
    FeatureSequence fs_seq;
    fs_seq.samples = extract_features(pairs, *base.net, tap);
    fs_seq.labels = labels_of(pairs);
    ensure_parent(layout.feature_cache(seq, tap));
    write_feature_cache(layout.feature_cache(seq, tap), fs_seq.samples, tap);
    all_labels.insert(all_labels.end(), fs_seq.labels.begin(), fs_seq.labels.end());
    sequences.push_back(std::move(fs_seq));
  }
  TemporalConfig tc = cfg.temporal;
  tc.tap = tap;
  TemporalBundle bundle =
      make_temporal_bundle(tc, base.net->config(), LabelNormalizer::fit(all_labels), cfg.temporal_training.loss);
  spdlog::info("train-temporal: tap {} on {} sequences", tap_name(tap), sequences.size());
  const TrainResult result = train_temporal(bundle, sequences, cfg.temporal_training, [&](const LossRecord& r) {
    if (r.step % 100 == 0) spdlog::info("temporal step {} loss {:.5f}", r.step, r.total);
    return true;
  });
  ensure_parent(layout.temporal_model(tap));
  save_temporal(layout.temporal_model(tap), bundle);
  write_loss_csv(layout.temporal_loss(tap), result.curve);
  if (result.diverged) throw TrainingError("temporal training diverged; the last finite state was saved");
}

std::vector<SequenceResult> run_eval(const RunConfig& cfg, const EvalOptions& opt) {
  const RunLayout layout = prepare(cfg);
  std::vector<StageModel> stages;
  std::optional<TemporalBundle> temporal;
  std::string method = "regnet";
  if (opt.inject_gt) {
    method = "gt_injected";
  } else if (opt.temporal) {
    require(layout.temporal_model(*opt.temporal), "train-temporal");
    temporal = load_temporal(layout.temporal_model(*opt.temporal));
    stages = load_stages(layout, cfg, 1);
    method = "temporal_" + tap_name(*opt.temporal);
  } else {
    stages = load_stages(layout, cfg, opt.stages);
  }
  const auto ptrs = stage_pointers(stages);

  std::vector<SequenceResult> results;
  for (const auto& seq : cfg.test_split) {
    const std::vector<FramePair> pairs = load_pairs(layout, seq);
    if (opt.inject_gt) {
      results.push_back(finish_sequence(layout, seq, method, load_gt(layout, seq)));
      continue;
    }
    std::vector<Pose> motions;
    motions.reserve(pairs.size());
    if (temporal) {
      const auto samples = extract_features(pairs, *stages.front().net, *opt.temporal);
      for (const auto& e : infer_sequence(*temporal, samples)) motions.push_back(euler_to_pose(e));
    } else {
      for (const auto& p : pairs) motions.push_back(hierarchical_infer(p, ptrs));
    }
    results.push_back(finish_sequence(layout, seq, method, accumulate_motions(motions, load_gt(layout, seq).front())));
  }
  return results;
}

std::vector<SequenceResult> run_icp(const RunConfig& cfg, IcpInit init) {
  const RunLayout layout = prepare(cfg);
  std::vector<StageModel> stages;
  if (init == IcpInit::kModel) stages = load_stages(layout, cfg, 0);
  const auto ptrs = stage_pointers(stages);
  const std::string method = init == IcpInit::kModel ? "icp_model" : "icp_identity";

  std::vector<SequenceResult> results;
  for (const auto& seq : cfg.test_split) {
    const std::vector<FramePair> pairs = load_pairs(layout, seq);
    std::vector<Pose> motions;
    motions.reserve(pairs.size());
    int failures = 0;
    for (const auto& p : pairs) {
      const Pose start = init == IcpInit::kModel ? hierarchical_infer(p, ptrs) : Pose{};
      try {
        motions.push_back(refine(p, start, cfg.icp));
      } catch (const IcpError&) {
        ++failures;
        motions.push_back(start);
      }
    }
    if (failures > 0) spdlog::warn("icp: {} of {} pairs in {} kept their initial estimate", failures, pairs.size(), seq);
    results.push_back(finish_sequence(layout, seq, method, accumulate_motions(motions, load_gt(layout, seq).front())));
  }
  return results;
}

std::vector<fs::path> run_plot(const RunConfig& cfg) {
  const RunLayout layout = prepare(cfg);
  std::vector<fs::path> written;
  for (const auto& seq : cfg.test_split) {
    const std::vector<Pose> gt = load_gt(layout, seq);
    std::vector<std::string> methods;
    const fs::path dir = layout.root / "trajectories";
    if (fs::is_directory(dir)) {
      const std::string prefix = seq + "_";
      for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind(prefix, 0) == 0 && entry.path().extension() == ".txt") {
          methods.push_back(name.substr(prefix.size(), name.size() - prefix.size() - 4));
        }
      }
    }
    std::sort(methods.begin(), methods.end());
    ensure_parent(layout.plot_svg(seq, "gt"));
    write_trajectory_csv(layout.trajectory_csv(seq, "gt"), gt);
    write_trajectory_svg(layout.plot_svg(seq, "gt"), gt, {});
    written.push_back(layout.plot_svg(seq, "gt"));
    for (const auto& m : methods) {
      const std::vector<Pose> est = read_poses(layout.trajectory(seq, m));
      write_trajectory_csv(layout.trajectory_csv(seq, m), est);
      write_trajectory_svg(layout.plot_svg(seq, m), gt, est);
      written.push_back(layout.plot_svg(seq, m));
    }
  }
  return written;
}

// ---- trajectories -------------------------------------------------------------

std::vector<Pose> accumulate_motions(std::span<const Pose> motions, const Pose& start) {
  std::vector<Pose> out;
  out.reserve(motions.size() + 1);
  out.push_back(start);
  for (const auto& m : motions) out.push_back(compose(out.back(), inverse(m)));
  return out;
}

void write_trajectory_csv(const fs::path& path, std::span<const Pose> poses) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "frame,r00,r01,r02,t0,r10,r11,r12,t1,r20,r21,r22,t2\n";
  for (std::size_t i = 0; i < poses.size(); ++i) {
    out << i;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << ',' << full_precision(poses[i].rotation(r, c));
      out << ',' << full_precision(poses[i].translation(r));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_trajectory_svg(const fs::path& path, std::span<const Pose> gt, std::span<const Pose> est) {
  if (gt.empty()) throw PipelineError("plot: empty ground-truth trajectory");
  double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x, lo_y = lo_x, hi_y = -lo_x;
  auto extend = [&](std::span<const Pose> poses) {
    for (const auto& p : poses) {
      lo_x = std::min(lo_x, p.translation.x());
      hi_x = std::max(hi_x, p.translation.x());
      lo_y = std::min(lo_y, -p.translation.z());
      hi_y = std::max(hi_y, -p.translation.z());
    }
  };
  extend(gt);
  extend(est);
  const double margin = 0.05 * std::max({hi_x - lo_x, hi_y - lo_y, 1.0});
  const double w = hi_x - lo_x + 2 * margin, h = hi_y - lo_y + 2 * margin;
  auto polyline = [&](std::span<const Pose> poses, const char* id, const char* color) {
    std::string pts;
    for (const auto& p : poses) {
      if (!pts.empty()) pts += ' ';
      pts += fmt::format("{:.9g},{:.9g}", p.translation.x(), -p.translation.z());
    }
    return fmt::format("  <polyline id=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{:.6g}\" points=\"{}\"/>\n",
                       id, color, margin * 0.1, pts);
  };
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{:.9g} {:.9g} {:.9g} {:.9g}\" "
                     "width=\"800\" height=\"{:.0f}\">\n",
                     lo_x - margin, lo_y - margin, w, h, 800.0 * h / w);
  out << polyline(gt, "ground_truth", "black");
  if (!est.empty()) out << polyline(est, "estimate", "red");
  out << "</svg>\n";
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace podom
