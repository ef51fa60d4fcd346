#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "podom/geometry.hpp"
#include "podom/point_cloud.hpp"

namespace podom {

/// Mean and population std of the rotation-vector and translation norms.
struct LabelStats {
  double mu_r = 0.0;
  double sigma_r = 0.0;
  double mu_t = 0.0;
  double sigma_t = 0.0;
};

LabelStats compute_stats(std::span<const EulerPose> labels);

/// Which pairs get repeated and how the exponent is formed.
enum class RepetitionRule {
  /// Repeat when |x - mu| > a*sigma; exponent |x - mu| / (a*sigma).
  kDivergence,
  /// The literal reading: repeat when x < |mu - a*sigma|; exponent
  /// (x - mu) / (a*sigma).
  kLiteral,
};

struct AugmentConfig {
  double a = 1.0;
  double divisor = 4.0;
  double identity_prob = 0.1;
  RepetitionRule rule = RepetitionRule::kDivergence;
  std::uint64_t seed = 0;

  void validate() const;
};

/// ceil(2^e / D) with e from the configured rule. Returns 0 when sigma == 0.
int repetition_count(double x, double mu, double sigma, double a, double divisor,
                     RepetitionRule rule = RepetitionRule::kDivergence);

bool rule_triggers(double x, double mu, double sigma, double a, RepetitionRule rule);

struct AugmentSummary {
  std::int64_t added_rotation = 0;
  std::int64_t added_translation = 0;
  std::int64_t added_both = 0;
  std::int64_t pairs_rotation = 0;
  std::int64_t pairs_translation = 0;
  std::int64_t pairs_both = 0;
};

struct AugmentResult {
  std::vector<std::uint16_t> weights;
  AugmentSummary summary;
};

/// Repetition weights for a label list. Every pair starts at its current
/// weight (1 if `base` is empty); rotation and translation rules each add
/// their N_x, and pairs hitting both rules get one more run of
/// max(N_r, N_t). Weights saturate at 65535.
AugmentResult augment_weights(std::span<const EulerPose> labels, const LabelStats& stats,
                              const AugmentConfig& cfg, std::span<const std::uint16_t> base = {});

/// augment_weights applied in place to the pairs' weight fields.
AugmentSummary augment_dataset(std::vector<FramePair>& pairs, const LabelStats& stats,
                               const AugmentConfig& cfg);

/// Indices of frames chosen (independently, with probability prob) to be
/// repeated as identity pairs.
std::vector<std::size_t> inject_identity(std::size_t n_frames, double prob, std::mt19937_64& rng);

/// Identity pairs (cloud, cloud) for the chosen frames.
std::vector<FramePair> make_identity_pairs(std::span<const PointCloud> frames,
                                           std::span<const std::size_t> chosen);

struct TuneTargets {
  double rotation = 10000;
  double translation = 6000;
  double both = 2000;
};

struct TuneResult {
  double a = 1.0;
  AugmentSummary summary;
  double max_rel_error = 0.0;
};

/// Log-spaced search over a in [a_min, a_max] minimizing the worst relative
/// deviation of the added counts from the targets.
TuneResult tune_a(std::span<const EulerPose> labels, const LabelStats& stats, AugmentConfig cfg,
                  const TuneTargets& targets = {}, double a_min = 0.05, double a_max = 20.0,
                  int steps = 600);

/// Per-component histogram (pitch, yaw, roll, tx, ty, tz) of the labels with
/// and without repetition weights, written as CSV:
/// component,bin_lo,bin_hi,count_before,count_after
void write_histograms(const std::filesystem::path& path, std::span<const EulerPose> labels,
                      std::span<const std::uint16_t> weights_after, int bins = 50);

/// Weighted fraction of samples whose component value exceeds `threshold`.
double tail_mass(std::span<const EulerPose> labels, std::span<const std::uint16_t> weights,
                 int component, double threshold);

}  // namespace podom
