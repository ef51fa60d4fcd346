#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "podom/autodiff.hpp"
#include "podom/geometry.hpp"
#include "podom/point_cloud.hpp"
#include "podom/regnet.hpp"

namespace podom {

enum class LossMode {
  /// One log-variance weight each for rotation and translation.
  kComp,
  /// One weight per pose parameter.
  kIndiv,
};

/// Trainable loss weights with log-variance semantics.
struct LossWeights {
  LossMode mode = LossMode::kComp;
  ad::Parameter* w_r = nullptr;
  ad::Parameter* w_t = nullptr;
  std::array<ad::Parameter*, 6> w{};  // indiv mode

  static LossWeights create(ad::ParameterStore& store, LossMode mode, double init = 0.0);
  /// Mean rotation and translation weight values (for logging).
  std::pair<double, double> summary() const;
};

struct LossTerms {
  ad::Var per_sample;  // B x 1
  ad::Var rot;         // B x 1, weighted rotation term including w_r
  ad::Var trans;       // B x 1
};

/// Per-sample loss exp(-w_r)|dr| + w_r + exp(-w_t)|dt| + w_t, with |.| the
/// L2 norm over the three components. Indiv mode sums
/// exp(-w_i)|d_i| + w_i over the six parameters.
LossTerms weighted_loss(ad::Var pred_rot, ad::Var pred_trans, ad::Var gt_rot, ad::Var gt_trans,
                        const LossWeights& w);

/// Plain-number version of the comp loss for a single sample.
double weighted_loss_value(const std::array<double, 6>& pred, const std::array<double, 6>& gt,
                           double w_r, double w_t);

/// Mean of the k largest per-sample losses.
ad::Var ohem_select(ad::Var per_sample, int k);

/// Fraction of the batch kept by OHEM, growing at epoch thresholds.
struct OhemSchedule {
  std::vector<std::pair<int, double>> phases{{0, 0.25}, {10, 0.5}, {25, 1.0}};

  double fraction(int epoch) const;
  int k(int epoch, int batch) const;
  void validate() const;
};

struct TrainConfig {
  int stages = 3;
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-3;
  LossMode loss = LossMode::kComp;
  OhemSchedule ohem;
  bool dropout = true;
  /// When false the loss weights keep their initial values.
  bool learn_loss_weights = true;
  /// Stop after this many optimizer steps (0 = no cap).
  int max_steps = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossRecord {
  int step = 0;
  double total = 0.0;
  double rot = 0.0;
  double trans = 0.0;
  double w_r = 0.0;
  double w_t = 0.0;
};

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> curve);

/// A trained registration stage: network, its label statistics and loss
/// weights.
struct StageModel {
  std::unique_ptr<RegNet> net;
  LabelNormalizer normalizer;
  ad::ParameterStore loss_params;
  LossWeights loss_weights;
  int stage_index = 0;

  /// Inference-mode prediction mapping source coordinates to target.
  Pose predict(const FramePair& pair) const;
  EulerPose predict_euler(const FramePair& pair) const;
};

StageModel make_stage_model(const RegNetConfig& cfg, const LabelNormalizer& normalizer, LossMode mode,
                            int stage_index = 0);

void save_stage(const std::filesystem::path& path, const StageModel& model);
StageModel load_stage(const std::filesystem::path& path);

struct TrainResult {
  std::vector<LossRecord> curve;
  int steps = 0;
  bool diverged = false;
};

/// Called after every optimizer step; return false to stop early.
using StepCallback = std::function<bool(const LossRecord&)>;

/// Trains `model` in place on the pairs, sampling each pair with
/// multiplicity equal to its weight. Labels are normalized with the model's
/// normalizer. A non-finite loss or gradient stops training and leaves the
/// last finite parameters in place.
TrainResult train_stage(StageModel& model, std::span<const FramePair> pairs, const TrainConfig& cfg,
                        const StepCallback& on_step = {});

/// Training-mode loss over a batch without dropout or running-statistics
/// updates (the deterministic probe used to compare losses across steps).
double probe_loss(StageModel& model, std::span<const FramePair> pairs, int batch_size = 1);

/// t_gt * t_pred^-1: the motion left after applying the prediction.
Pose residual_label(const Pose& t_gt, const Pose& t_pred);

struct ResidualDataset {
  std::vector<FramePair> pairs;
  LabelNormalizer normalizer;
};

/// Moves each source cloud by the stage prediction and replaces the label by
/// the residual. Statistics are refit on the residual labels.
ResidualDataset build_residual_dataset(std::span<const FramePair> pairs, const StageModel& model);

/// Same construction with precomputed predictions.
ResidualDataset build_residual_dataset(std::span<const FramePair> pairs, std::span<const Pose> predictions);

/// T_n * ... * T_1, moving the source cloud by each stage's output before
/// the next stage runs.
Pose hierarchical_infer(const FramePair& pair, std::span<const StageModel* const> stages);

/// Same composition with a per-stage predictor (for tests and tools).
Pose hierarchical_infer(const FramePair& pair,
                        std::span<const std::function<Pose(const FramePair&)>> stages);

}  // namespace podom
