#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "podom/errors.hpp"
#include "podom/kitti_io.hpp"
#include "podom/point_cloud.hpp"

namespace podom {

/// How farthest-point sampling picks its first index.
struct FpsSeed {
  enum class Kind { kFirstIndex, kRandom, kNearestCentroid };
  Kind kind = Kind::kFirstIndex;
  std::uint64_t seed = 0;

  static FpsSeed first_index() { return {}; }
  static FpsSeed random(std::uint64_t s) { return {Kind::kRandom, s}; }
  /// Starts at the point closest to the cloud centroid, so the selection
  /// depends only on positions and not on their storage order.
  static FpsSeed nearest_centroid() { return {Kind::kNearestCentroid, 0}; }
};

/// Greedy maximin subsampling. Each new index maximizes the squared distance
/// to the already selected set; ties go to the lowest index.
template <typename Derived>
std::vector<int> farthest_point_sample(const Eigen::MatrixBase<Derived>& pts, int k,
                                       FpsSeed seed = FpsSeed::first_index()) {
  const auto n = static_cast<int>(pts.rows());
  if (k < 0 || k > n) {
    throw SamplingError("farthest_point_sample: k = " + std::to_string(k) +
                        " exceeds point count " + std::to_string(n));
  }
  std::vector<int> out;
  if (k == 0) return out;
  out.reserve(static_cast<std::size_t>(k));

  auto sq_dist = [&](int a, int b) {
    const double dx = static_cast<double>(pts(a, 0)) - static_cast<double>(pts(b, 0));
    const double dy = static_cast<double>(pts(a, 1)) - static_cast<double>(pts(b, 1));
    const double dz = static_cast<double>(pts(a, 2)) - static_cast<double>(pts(b, 2));
    return dx * dx + dy * dy + dz * dz;
  };

  int first = 0;
  switch (seed.kind) {
    case FpsSeed::Kind::kFirstIndex:
      break;
    case FpsSeed::Kind::kRandom: {
      std::mt19937_64 rng(seed.seed);
      first = static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng));
      break;
    }
    case FpsSeed::Kind::kNearestCentroid: {
      Eigen::Vector3d c = Eigen::Vector3d::Zero();
      for (int i = 0; i < n; ++i) c += pts.row(i).template cast<double>().transpose();
      c /= n;
      double best = std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) {
        const double d = (pts.row(i).template cast<double>().transpose() - c).squaredNorm();
        if (d < best) {
          best = d;
          first = i;
        }
      }
      break;
    }
  }

  std::vector<double> min_d(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  int cur = first;
  for (int s = 0; s < k; ++s) {
    out.push_back(cur);
    min_d[static_cast<std::size_t>(cur)] = -1.0;
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < n; ++i) {
      double& m = min_d[static_cast<std::size_t>(i)];
      if (m < 0.0) continue;
      const double d = sq_dist(i, cur);
      if (d < m) m = d;
      if (m > best_d) {
        best_d = m;
        best = i;
      }
    }
    cur = best;
  }
  return out;
}

/// Keeps points with |x| <= limit and |y| <= limit (lidar frame horizontal
/// axes). Throws SamplingError when nothing survives.
RawScan range_filter(const RawScan& scan, double limit);

struct GroundConfig {
  int ransac_iterations = 500;
  double inlier_threshold = 0.15;  // meters
  double max_normal_tilt_deg = 15.0;
  /// A plane must explain at least this fraction of the cloud to count as
  /// ground.
  double min_inlier_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct GroundSegmentation {
  std::vector<std::uint8_t> is_ground;
  Eigen::Vector4d plane = Eigen::Vector4d::Zero();  // n . p + d = 0, |n| = 1, n_z > 0
  bool plane_found = false;

  std::size_t ground_count() const;
};

/// RANSAC plane fit restricted to near-horizontal planes. When no plane
/// qualifies every point is non-ground and a warning is logged.
GroundSegmentation segment_ground(const PointsD& points, const GroundConfig& cfg = {});

struct SamplerConfig {
  double range_limit = 50.0;
  int n_nonground = 8000;
  int n_ground = 4000;
  GroundConfig ground;
  std::uint64_t seed = 0;
  /// kFirstIndex reproduces the deterministic default; kRandom draws the
  /// first index from `seed`.
  FpsSeed::Kind fps_seed = FpsSeed::Kind::kFirstIndex;

  int total() const { return n_nonground + n_ground; }
  void validate() const;
};

/// Range filter, ground segmentation and per-class FPS. Output holds exactly
/// n_nonground non-ground points followed by n_ground ground points. A class
/// with too few points is filled by sampling with replacement (warning).
PointCloud sample_frame(const RawScan& scan, const SamplerConfig& cfg);

}  // namespace podom
