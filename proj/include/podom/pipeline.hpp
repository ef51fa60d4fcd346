#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "podom/augmentation.hpp"
#include "podom/icp.hpp"
#include "podom/metrics.hpp"
#include "podom/regnet.hpp"
#include "podom/sampling.hpp"
#include "podom/synthetic.hpp"
#include "podom/temporal.hpp"
#include "podom/training.hpp"

namespace podom {

/// Everything one run needs. Missing JSON keys keep these defaults (8k4k,
/// comp weighting, three stages, KITTI train/test split).
struct RunConfig {
  std::filesystem::path dataset_root;
  std::vector<std::string> train_split{"00", "01", "02", "03", "04", "05", "06", "07", "08"};
  std::vector<std::string> test_split{"09", "10"};
  /// Moves sampled clouds into the camera frame the pose labels live in.
  /// False keeps lidar-frame clouds against camera-frame labels (ablation).
  bool use_calibration = true;
  SamplerConfig sampler;
  AugmentConfig augment;
  /// Search `a` against the reference added-count targets before augmenting.
  bool tune_augment = false;
  RegNetConfig regnet;
  TrainConfig training;
  TemporalConfig temporal;
  TemporalTrainConfig temporal_training;
  IcpConfig icp;
  std::filesystem::path output_dir = "run";
  std::uint64_t seed = 0;

  /// Structural checks. With check_paths the dataset sequences must exist.
  void validate(bool check_paths = false) const;
  /// Copy with every component seed derived from `seed`.
  RunConfig seeded() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(const std::filesystem::path& path, const RunConfig& c);

/// File names of every artifact under the output directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path effective_config() const { return root / "config.json"; }
  std::filesystem::path pair_cache(const std::string& seq) const { return root / "pairs" / (seq + ".pdpc"); }
  std::filesystem::path gt_poses(const std::string& seq) const { return root / "pairs" / (seq + "_gt.txt"); }
  std::filesystem::path augmented_cache() const { return root / "augment" / "train.pdpc"; }
  std::filesystem::path augment_summary() const { return root / "augment" / "summary.json"; }
  std::filesystem::path augment_weights() const { return root / "augment" / "weights.csv"; }
  std::filesystem::path augment_histograms() const { return root / "augment" / "histograms.csv"; }
  std::filesystem::path stage_model(int stage) const;
  std::filesystem::path stage_loss(int stage) const;
  std::filesystem::path stage_dataset(int stage) const;
  std::filesystem::path feature_cache(const std::string& seq, TapKind tap) const;
  std::filesystem::path temporal_model(TapKind tap) const;
  std::filesystem::path temporal_loss(TapKind tap) const;
  /// `method` names the estimator, e.g. "regnet", "temporal_fclf", "icp_identity".
  std::filesystem::path trajectory(const std::string& seq, const std::string& method) const;
  std::filesystem::path trajectory_csv(const std::string& seq, const std::string& method) const;
  std::filesystem::path report(const std::string& seq, const std::string& method) const;
  std::filesystem::path drift_csv(const std::string& seq, const std::string& method) const;
  std::filesystem::path plot_svg(const std::string& seq, const std::string& method) const;
};

/// Writes synthetic sequences in KITTI layout, one per name, with seeds
/// base.seed, base.seed + 1, ...
void run_synth(const std::filesystem::path& root, std::span<const std::string> sequences,
               const SyntheticConfig& base);

struct PreprocessSummary {
  std::vector<std::string> sequences;
  std::vector<int> pair_counts;
};

/// Samples every frame of the train and test sequences into camera-frame
/// pair caches and copies the ground-truth trajectories.
PreprocessSummary run_preprocess(const RunConfig& cfg);

struct AugmentRunSummary {
  LabelStats stats;
  double a = 0.0;
  AugmentSummary added;
  int identity_pairs = 0;
  int total_pairs = 0;
};

/// Label statistics, repetition weights and identity injection over the
/// train split; writes the weighted training set and histogram CSVs.
AugmentRunSummary run_augment(const RunConfig& cfg);

/// Trains the hierarchical stages. With `only_stage` just that stage is
/// trained; it requires the previous stage's checkpoint.
void run_train(const RunConfig& cfg, std::optional<int> only_stage = std::nullopt);

/// Extracts tap features with the stage-1 network and trains the temporal
/// model on the train split.
void run_train_temporal(const RunConfig& cfg, TapKind tap);

struct EvalOptions {
  /// Stages used for inference; 0 means all trained stages.
  int stages = 0;
  /// Use the temporal model of this tap instead of the stage models.
  std::optional<TapKind> temporal;
  /// Replace estimates by ground truth (a sanity run whose metrics are zero).
  bool inject_gt = false;
};

struct SequenceResult {
  std::string sequence;
  std::string method;
  TrajectoryReport report;
};

std::vector<SequenceResult> run_eval(const RunConfig& cfg, const EvalOptions& opt = {});

enum class IcpInit { kIdentity, kModel };

/// Frame-to-frame ICP on the test split, started from the identity or from
/// the hierarchical network estimate.
std::vector<SequenceResult> run_icp(const RunConfig& cfg, IcpInit init);

/// Top-down SVG and CSV of every evaluated trajectory against ground truth.
/// Returns the written SVG paths.
std::vector<std::filesystem::path> run_plot(const RunConfig& cfg);

/// Frame -> world poses from frame-to-frame motions (label convention),
/// starting at `start`.
std::vector<Pose> accumulate_motions(std::span<const Pose> motions, const Pose& start = Pose{});

/// One line per frame: index followed by the 12 row-major entries of [R|t].
void write_trajectory_csv(const std::filesystem::path& path, std::span<const Pose> poses);

/// Top-down view (x right, z up) of the ground truth and, if non-empty, the
/// estimate. Coordinates are written unscaled as (x, -z) polyline points.
void write_trajectory_svg(const std::filesystem::path& path, std::span<const Pose> gt, std::span<const Pose> est);

}  // namespace podom
