#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "podom/autodiff.hpp"
#include "podom/point_cloud.hpp"

namespace podom {

struct SetAbstractionSpec {
  int n_out = 0;
  double radius = 0.0;
  std::vector<int> mlp;
  /// Ball-query cap; the nearest k_max neighbours are kept.
  int k_max = 32;

  void validate(const std::string& name) const;
};

struct FlowEmbeddingSpec {
  int k = 10;
  std::vector<int> mlp;
};

/// Siamese registration network layout. Defaults are the 8k4k network.
struct RegNetConfig {
  int n_nonground = 8000;
  int n_ground = 4000;
  SetAbstractionSpec ground{400, 4.0, {64, 96, 128}};
  std::vector<SetAbstractionSpec> nonground{{1500, 0.5, {64, 80, 96}}, {800, 1.0, {112, 128, 128}}};
  FlowEmbeddingSpec embedding{10, {128, 128, 128}};
  SetAbstractionSpec final_sa{300, 1.0, {128, 96, 64}};
  int head_hidden = 128;
  double keep_prob = 0.6;
  double bn_momentum = 0.9;
  bool batch_norm = true;
  std::uint64_t init_seed = 0;

  static RegNetConfig config_8k4k();
  static RegNetConfig config_4k2k();
  /// Tiny network for gradient checks and fast tests.
  static RegNetConfig miniature();

  int embedding_points() const { return ground.n_out + nonground.back().n_out; }
  int embedding_channels() const { return ground.mlp.back(); }
  int flat_size() const { return final_sa.n_out * final_sa.mlp.back(); }
  void validate() const;
};

void to_json(nlohmann::json& j, const RegNetConfig& c);
void from_json(const nlohmann::json& j, RegNetConfig& c);

/// Linear layer followed by batch norm (no bias) or by a bias, then ReLU.
struct DenseLayer {
  ad::Parameter* weight = nullptr;
  ad::Parameter* bias = nullptr;
  std::optional<ad::BatchNormParams> bn;
};

DenseLayer make_dense(ad::ParameterStore& store, const std::string& name, int in, int out,
                      bool batch_norm, double momentum, std::mt19937_64& rng);

class GeometryCache;

struct LayerOptions {
  ad::Mode mode = ad::Mode::kInfer;
  /// When false, training-mode batch norm leaves running statistics alone.
  bool update_bn_stats = true;
  GeometryCache* cache = nullptr;
};

/// Normalization and activation applied to a precomputed linear output.
ad::Var norm_act(const DenseLayer& layer, ad::Var pre, const LayerOptions& opt);
ad::Var dense_forward(const DenseLayer& layer, ad::Var x, const LayerOptions& opt);

/// A batch of point sets sharing one feature matrix: rows of cloud c occupy
/// [row_offset(c), row_offset(c) + positions[c].rows()).
struct CloudBatch {
  std::vector<PointsD> positions;
  /// Per-point features (the raw coordinates for a first layer).
  ad::Var feats;

  int row_offset(std::size_t c) const;
  int total_rows() const;
};

/// Ball-query groups around FPS centroids. Member rows index the input
/// cloud; group g spans members [offsets[g], offsets[g+1]).
struct Grouping {
  std::vector<int> centroid_index;
  std::vector<int> members;
  std::vector<int> offsets;
};

/// Memoizes groupings and neighbor lists, which depend only on point
/// positions. Entries are keyed by a hash of the positions and the query
/// parameters; the cache empties itself once it holds `capacity` entries.
class GeometryCache {
 public:
  explicit GeometryCache(std::size_t capacity = 8192) : capacity_(capacity) {}

  const Grouping& grouping(const PointsD& pts, int n_out, double radius, int k_max);
  const std::vector<std::vector<int>>& neighbors(const PointsD& queries, const PointsD& points, int k);

  std::size_t size() const { return groups_.size() + knn_.size(); }
  void clear();

 private:
  void make_room();

  std::size_t capacity_;
  std::unordered_map<std::uint64_t, Grouping> groups_;
  std::unordered_map<std::uint64_t, std::vector<std::vector<int>>> knn_;
};

/// FPS (nearest-centroid seed) followed by ball query. The centroid is
/// always the first member of its group.
Grouping ball_query_groups(const PointsD& pts, int n_out, double radius, int k_max);

struct SetAbstractionBlock {
  SetAbstractionSpec spec;
  int in_channels = 3;
  std::vector<DenseLayer> layers;
};

SetAbstractionBlock make_set_abstraction(ad::ParameterStore& store, const std::string& name,
                                         const SetAbstractionSpec& spec, int in_channels,
                                         bool batch_norm, double momentum, std::mt19937_64& rng);

/// PointNet++ abstraction: each group's members see (p_j - c, f_j) through
/// the shared MLP and are max-pooled per channel.
CloudBatch set_abstraction(const SetAbstractionBlock& block, const CloudBatch& in, const LayerOptions& opt);

struct FlowEmbeddingBlock {
  FlowEmbeddingSpec spec;
  int channels = 128;
  std::vector<DenseLayer> layers;
};

FlowEmbeddingBlock make_flow_embedding(ad::ParameterStore& store, const std::string& name,
                                       const FlowEmbeddingSpec& spec, int channels, bool batch_norm,
                                       double momentum, std::mt19937_64& rng);

/// For every frame-1 point, its k nearest frame-2 points contribute
/// (p2 - p1 || cos(f1, f2) || f2) through the MLP, max-pooled over the k.
/// first[c] pairs with second[c]; the output keeps first's positions.
CloudBatch flow_embedding(const FlowEmbeddingBlock& block, const CloudBatch& first, const CloudBatch& second,
                          const LayerOptions& opt);

/// Detached intermediate features of one pair.
struct TapFeatures {
  std::array<PointsD, 2> pref_positions;
  std::array<ad::Tensor, 2> pref;  // before the flow embedding, per frame
  PointsD posf_positions;
  ad::Tensor posf;  // after the flow embedding
  ad::Tensor fclf;  // flattened final abstraction, before dropout
};

struct ForwardOptions {
  ad::Mode mode = ad::Mode::kInfer;
  bool dropout = true;
  bool update_bn_stats = true;
  std::mt19937_64* rng = nullptr;  // required for training-mode dropout
  bool capture_taps = false;
  /// Reuse groupings across calls (the network's own cache when null).
  bool use_cache = true;
};

struct RegNetOutput {
  ad::Var rot;    // B x 3, normalized label space
  ad::Var trans;  // B x 3
  std::vector<TapFeatures> taps;
};

class RegNet {
 public:
  explicit RegNet(RegNetConfig cfg);
  RegNet(const RegNet&) = delete;
  RegNet& operator=(const RegNet&) = delete;

  RegNetOutput forward(ad::Graph& g, std::span<const FramePair* const> pairs, const ForwardOptions& opt);

  /// Inference-mode prediction (normalized label space), one pair at a time.
  std::array<double, 6> predict(const FramePair& pair);
  TapFeatures taps(const FramePair& pair);

  ad::ParameterStore& params() { return store_; }
  const ad::ParameterStore& params() const { return store_; }
  const RegNetConfig& config() const { return cfg_; }
  std::size_t parameter_count() const { return store_.trainable_scalar_count(); }

 private:
  RegNetConfig cfg_;
  ad::ParameterStore store_;
  SetAbstractionBlock ground_;
  std::vector<SetAbstractionBlock> nonground_;
  FlowEmbeddingBlock embedding_;
  SetAbstractionBlock final_;
  std::array<DenseLayer, 2> rot_head_;
  std::array<DenseLayer, 2> trans_head_;
  GeometryCache cache_;
};

}  // namespace podom
