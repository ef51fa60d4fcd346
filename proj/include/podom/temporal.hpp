#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "podom/autodiff.hpp"
#include "podom/regnet.hpp"
#include "podom/training.hpp"

namespace podom {

/// Where features are tapped from a frozen registration network.
enum class TapKind {
  /// Per-frame features before the flow embedding (two maps per pair).
  kPref,
  /// Flow-embedding output (one map per pair).
  kPosf,
  /// Flattened final abstraction (one vector per pair).
  kFclf,
};

std::string tap_name(TapKind t);
TapKind tap_from_name(const std::string& s);

enum class CellActivation { kSoftsign, kTanh };

struct TemporalConfig {
  TapKind tap = TapKind::kFclf;
  int window = 5;
  std::vector<int> fc{64, 128};
  int hidden = 64;
  int recurrent_layers = 2;
  int post_fc = 64;
  CellActivation cell = CellActivation::kSoftsign;
  bool batch_norm = true;
  double bn_momentum = 0.9;
  double keep_prob = 0.8;
  std::uint64_t init_seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TemporalConfig& c);
void from_json(const nlohmann::json& j, TemporalConfig& c);

/// Features of one frame pair at a tap. FCLF holds one 1 x D map and no
/// positions; POSF one map with its positions; PREF the source and target
/// maps with their positions.
struct TapSample {
  std::vector<ad::Tensor> maps;
  std::vector<PointsD> positions;
};

/// Runs the frozen network in inference mode on every pair, in order.
std::vector<TapSample> extract_features(std::span<const FramePair> pairs, RegNet& net, TapKind tap);

void write_feature_cache(const std::filesystem::path& path, std::span<const TapSample> samples, TapKind tap);
std::vector<TapSample> read_feature_cache(const std::filesystem::path& path, TapKind* tap = nullptr);

/// Window of `window` consecutive pairs whose predictions serve pair i:
/// the window centered on i, shifted inward at the sequence ends. Returns
/// the start index; i - start is i's slot in the window.
int center_window_start(int i, int n, int window);

/// Start indices of all stride-1 windows (n - window + 1 of them).
std::vector<int> window_starts(int n, int window);

struct TemporalOutput {
  ad::Var rot;    // (B * window) x 3, rows ordered window-major
  ad::Var trans;
};

class TemporalModel {
 public:
  /// `source` describes the registration network the features come from.
  TemporalModel(TemporalConfig cfg, RegNetConfig source);
  TemporalModel(const TemporalModel&) = delete;
  TemporalModel& operator=(const TemporalModel&) = delete;

  /// Each window holds cfg.window samples. Dropout in training mode needs
  /// an rng.
  TemporalOutput forward(ad::Graph& g, std::span<const std::vector<const TapSample*>> windows, ad::Mode mode,
                         std::mt19937_64* rng = nullptr, bool update_bn_stats = true);

  ad::ParameterStore& params() { return store_; }
  const ad::ParameterStore& params() const { return store_; }
  const TemporalConfig& config() const { return cfg_; }
  const RegNetConfig& source_config() const { return source_; }
  /// Width of the vector the front block hands to the first fc layer.
  int input_width() const { return input_width_; }

 private:
  struct Recurrent {
    ad::Parameter* wx = nullptr;  // in x 4H, gate order i, f, g, o
    ad::Parameter* wh = nullptr;  // H x 4H
    ad::Parameter* b = nullptr;   // 1 x 4H
  };

  ad::Var front(ad::Graph& g, std::span<const TapSample* const> frames, const LayerOptions& lo);
  ad::Var run_direction(ad::Graph& g, const Recurrent& cell, ad::Var x, int batch, bool reverse);
  ad::Var post_layer(const DenseLayer& layer, ad::Var x, ad::Mode mode, bool update_bn, std::mt19937_64* rng);

  TemporalConfig cfg_;
  RegNetConfig source_;
  ad::ParameterStore store_;
  int input_width_ = 0;
  std::optional<FlowEmbeddingBlock> front_embedding_;
  std::optional<SetAbstractionBlock> front_sa_;
  std::vector<DenseLayer> fc_;
  std::vector<std::array<Recurrent, 2>> recurrent_;
  DenseLayer post_;
  DenseLayer rot_head_;
  DenseLayer trans_head_;
  GeometryCache cache_;
};

struct TemporalTrainConfig {
  int epochs = 30;
  int batch_size = 8;  // windows per step
  double lr = 1e-3;
  LossMode loss = LossMode::kComp;
  bool learn_loss_weights = true;
  int max_steps = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TemporalTrainConfig& c);
void from_json(const nlohmann::json& j, TemporalTrainConfig& c);

/// Features and labels of one sequence, in pair order.
struct FeatureSequence {
  std::vector<TapSample> samples;
  std::vector<EulerPose> labels;
};

struct TemporalBundle {
  std::unique_ptr<TemporalModel> model;
  LabelNormalizer normalizer;
  ad::ParameterStore loss_params;
  LossWeights loss_weights;
};

TemporalBundle make_temporal_bundle(const TemporalConfig& cfg, const RegNetConfig& source,
                                    const LabelNormalizer& normalizer, LossMode mode);

/// Trains on every stride-1 window of every sequence; the loss is the
/// weighted loss averaged over all frames of the batch's windows.
TrainResult train_temporal(TemporalBundle& bundle, std::span<const FeatureSequence> sequences,
                           const TemporalTrainConfig& cfg, const StepCallback& on_step = {});

/// Per-pair motion estimates for one sequence, each taken from the window
/// returned by center_window_start.
std::vector<EulerPose> infer_sequence(TemporalBundle& bundle, std::span<const TapSample> samples);

void save_temporal(const std::filesystem::path& path, const TemporalBundle& bundle);
TemporalBundle load_temporal(const std::filesystem::path& path);

}  // namespace podom
