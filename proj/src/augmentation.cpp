#include "podom/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace podom {

LabelStats compute_stats(std::span<const EulerPose> labels) {
  if (labels.empty()) throw InvalidStatsError("compute_stats: empty label list");
  const double n = static_cast<double>(labels.size());
  double sr = 0, st = 0;
  for (const auto& l : labels) {
    sr += l.rotation_part().norm();
    st += l.translation_part().norm();
  }
  LabelStats s;
  s.mu_r = sr / n;
  s.mu_t = st / n;
  double vr = 0, vt = 0;
  for (const auto& l : labels) {
    vr += std::pow(l.rotation_part().norm() - s.mu_r, 2);
    vt += std::pow(l.translation_part().norm() - s.mu_t, 2);
  }
  s.sigma_r = std::sqrt(vr / n);
  s.sigma_t = std::sqrt(vt / n);
  return s;
}

void AugmentConfig::validate() const {
  if (!(a > 0.0)) throw ConfigError("augment: a must be positive");
  if (!(divisor > 0.0)) throw ConfigError("augment: divisor must be positive");
  if (!(identity_prob >= 0.0 && identity_prob <= 1.0)) {
    throw ConfigError("augment: identity_prob must lie in [0, 1]");
  }
}

bool rule_triggers(double x, double mu, double sigma, double a, RepetitionRule rule) {
  if (!(sigma > 0.0)) return false;
  switch (rule) {
    case RepetitionRule::kDivergence:
      return std::abs(x - mu) > a * sigma;
    case RepetitionRule::kLiteral:
      return x < std::abs(mu - a * sigma);
  }
  return false;
}

int repetition_count(double x, double mu, double sigma, double a, double divisor, RepetitionRule rule) {
  if (!(sigma > 0.0)) return 0;
  if (!(a > 0.0) || !(divisor > 0.0)) throw ConfigError("repetition_count: a and D must be positive");
  const double diff = rule == RepetitionRule::kDivergence ? std::abs(x - mu) : x - mu;
  const double copies = std::ceil(std::exp2(diff / (a * sigma)) / divisor);
  return static_cast<int>(std::min(copies, 65535.0));
}

AugmentResult augment_weights(std::span<const EulerPose> labels, const LabelStats& stats,
                              const AugmentConfig& cfg, std::span<const std::uint16_t> base) {
  cfg.validate();
  if (!base.empty() && base.size() != labels.size()) {
    throw ConfigError("augment_weights: base weight count mismatch");
  }
  AugmentResult res;
  res.weights.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double xr = labels[i].rotation_part().norm();
    const double xt = labels[i].translation_part().norm();
    const bool rot = rule_triggers(xr, stats.mu_r, stats.sigma_r, cfg.a, cfg.rule);
    const bool trn = rule_triggers(xt, stats.mu_t, stats.sigma_t, cfg.a, cfg.rule);
    std::int64_t w = base.empty() ? 1 : base[i];
    int nr = 0, nt = 0;
    if (rot) {
      nr = repetition_count(xr, stats.mu_r, stats.sigma_r, cfg.a, cfg.divisor, cfg.rule);
      res.summary.added_rotation += nr;
      ++res.summary.pairs_rotation;
      w += nr;
    }
    if (trn) {
      nt = repetition_count(xt, stats.mu_t, stats.sigma_t, cfg.a, cfg.divisor, cfg.rule);
      res.summary.added_translation += nt;
      ++res.summary.pairs_translation;
      w += nt;
    }
    if (rot && trn) {
      const int nb = std::max(nr, nt);
      res.summary.added_both += nb;
      ++res.summary.pairs_both;
      w += nb;
    }
    res.weights[i] = static_cast<std::uint16_t>(std::min<std::int64_t>(w, 65535));
  }
  return res;
}

AugmentSummary augment_dataset(std::vector<FramePair>& pairs, const LabelStats& stats,
                               const AugmentConfig& cfg) {
  std::vector<EulerPose> labels;
  std::vector<std::uint16_t> base;
  labels.reserve(pairs.size());
  base.reserve(pairs.size());
  for (const auto& p : pairs) {
    labels.push_back(p.label);
    base.push_back(p.weight);
  }
  auto res = augment_weights(labels, stats, cfg, base);
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].weight = res.weights[i];
  return res.summary;
}

std::vector<std::size_t> inject_identity(std::size_t n_frames, double prob, std::mt19937_64& rng) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("inject_identity: prob must lie in [0, 1]");
  std::vector<std::size_t> chosen;
  std::bernoulli_distribution coin(prob);
  for (std::size_t i = 0; i < n_frames; ++i) {
    if (coin(rng)) chosen.push_back(i);
  }
  return chosen;
}

std::vector<FramePair> make_identity_pairs(std::span<const PointCloud> frames,
                                           std::span<const std::size_t> chosen) {
  std::vector<FramePair> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) {
    FramePair p;
    p.source = frames[i];
    p.target = frames[i];
    p.label = EulerPose{};
    p.weight = 1;
    out.push_back(std::move(p));
  }
  return out;
}

TuneResult tune_a(std::span<const EulerPose> labels, const LabelStats& stats, AugmentConfig cfg,
                  const TuneTargets& targets, double a_min, double a_max, int steps) {
  if (!(a_min > 0.0) || !(a_max > a_min) || steps < 2) throw ConfigError("tune_a: bad search range");
  TuneResult best;
  best.max_rel_error = std::numeric_limits<double>::infinity();
  for (int s = 0; s < steps; ++s) {
    cfg.a = a_min * std::pow(a_max / a_min, static_cast<double>(s) / (steps - 1));
    const auto res = augment_weights(labels, stats, cfg);
    const double er = std::abs(res.summary.added_rotation - targets.rotation) / targets.rotation;
    const double et = std::abs(res.summary.added_translation - targets.translation) / targets.translation;
    const double eb = std::abs(res.summary.added_both - targets.both) / targets.both;
    const double worst = std::max({er, et, eb});
    if (worst < best.max_rel_error) {
      best.a = cfg.a;
      best.summary = res.summary;
      best.max_rel_error = worst;
    }
  }
  return best;
}

void write_histograms(const std::filesystem::path& path, std::span<const EulerPose> labels,
                      std::span<const std::uint16_t> weights_after, int bins) {
  if (labels.empty()) throw ConfigError("write_histograms: no labels");
  if (weights_after.size() != labels.size()) throw ConfigError("write_histograms: weight count mismatch");
  static constexpr const char* kNames[6] = {"pitch", "yaw", "roll", "tx", "ty", "tz"};
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "component,bin_lo,bin_hi,count_before,count_after\n";
  out << std::setprecision(10);
  for (int c = 0; c < 6; ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& l : labels) {
      const double v = l.as_array()[static_cast<std::size_t>(c)];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi <= lo) hi = lo + 1e-9;
    const double width = (hi - lo) / bins;
    std::vector<std::int64_t> before(static_cast<std::size_t>(bins)), after(static_cast<std::size_t>(bins));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double v = labels[i].as_array()[static_cast<std::size_t>(c)];
      const auto b = static_cast<std::size_t>(std::clamp(static_cast<int>((v - lo) / width), 0, bins - 1));
      before[b] += 1;
      after[b] += weights_after[i];
    }
    for (int b = 0; b < bins; ++b) {
      out << kNames[c] << ',' << lo + b * width << ',' << lo + (b + 1) * width << ','
          << before[static_cast<std::size_t>(b)] << ',' << after[static_cast<std::size_t>(b)] << '\n';
    }
  }
}

double tail_mass(std::span<const EulerPose> labels, std::span<const std::uint16_t> weights,
                 int component, double threshold) {
  double total = 0, tail = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    total += w;
    if (labels[i].as_array()[static_cast<std::size_t>(component)] > threshold) tail += w;
  }
  return total > 0 ? tail / total : 0.0;
}

}  // namespace podom
