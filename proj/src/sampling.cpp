#include "podom/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

namespace podom {

std::size_t PointCloud::ground_count() const {
  return static_cast<std::size_t>(std::count(is_ground.begin(), is_ground.end(), std::uint8_t{1}));
}

PointsD PointCloud::select(bool ground) const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < is_ground.size(); ++i) {
    if ((is_ground[i] != 0) == ground) idx.push_back(static_cast<int>(i));
  }
  PointsD out(static_cast<Eigen::Index>(idx.size()), 3);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = positions.row(idx[r]).cast<double>();
  }
  return out;
}

PointCloud transform_cloud(const PointCloud& cloud, const Pose& pose) {
  PointCloud out = cloud;
  const Eigen::Matrix3f r = pose.rotation.cast<float>();
  const Eigen::RowVector3f t = pose.translation.cast<float>().transpose();
  out.positions = (cloud.positions * r.transpose()).rowwise() + t;
  return out;
}

RawScan range_filter(const RawScan& scan, double limit) {
  if (!(limit > 0.0)) throw SamplingError("range limit must be positive");
  std::vector<Eigen::Index> keep;
  keep.reserve(scan.size());
  for (Eigen::Index i = 0; i < scan.points.rows(); ++i) {
    if (std::abs(static_cast<double>(scan.points(i, 0))) <= limit &&
        std::abs(static_cast<double>(scan.points(i, 1))) <= limit) {
      keep.push_back(i);
    }
  }
  if (keep.empty()) throw SamplingError("range filter removed every point");
  RawScan out;
  out.frame_index = scan.frame_index;
  out.points.resize(static_cast<Eigen::Index>(keep.size()), 4);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    out.points.row(static_cast<Eigen::Index>(r)) = scan.points.row(keep[r]);
  }
  return out;
}

std::size_t GroundSegmentation::ground_count() const {
  return static_cast<std::size_t>(std::count(is_ground.begin(), is_ground.end(), std::uint8_t{1}));
}

namespace {

bool normal_ok(const Eigen::Vector3d& n, double max_tilt_deg) {
  return std::abs(n.z()) >= std::cos(max_tilt_deg * std::numbers::pi / 180.0);
}

std::vector<int> plane_inliers(const PointsD& pts, const Eigen::Vector4d& plane, double thr) {
  std::vector<int> in;
  for (int i = 0; i < static_cast<int>(pts.rows()); ++i) {
    const double d = plane.head<3>().dot(pts.row(i).transpose()) + plane[3];
    if (std::abs(d) <= thr) in.push_back(i);
  }
  return in;
}

/// Least-squares plane through the given points (smallest-eigenvalue normal).
Eigen::Vector4d fit_plane(const PointsD& pts, const std::vector<int>& idx) {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (int i : idx) c += pts.row(i).transpose();
  c /= static_cast<double>(idx.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (int i : idx) {
    const Eigen::Vector3d d = pts.row(i).transpose() - c;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  Eigen::Vector3d n = es.eigenvectors().col(0).normalized();
  if (n.z() < 0) n = -n;
  return {n.x(), n.y(), n.z(), -n.dot(c)};
}

}  // namespace

GroundSegmentation segment_ground(const PointsD& points, const GroundConfig& cfg) {
  const int n = static_cast<int>(points.rows());
  if (n < 50) throw SamplingError("segment_ground needs at least 50 points, got " + std::to_string(n));

  GroundSegmentation out;
  out.is_ground.assign(static_cast<std::size_t>(n), 0);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::size_t best_count = 0;
  Eigen::Vector4d best_plane = Eigen::Vector4d::Zero();
  for (int it = 0; it < cfg.ransac_iterations; ++it) {
    const int a = pick(rng), b = pick(rng), c = pick(rng);
    if (a == b || b == c || a == c) continue;
    const Eigen::Vector3d pa = points.row(a).transpose();
    Eigen::Vector3d nrm = (points.row(b).transpose() - pa).cross(points.row(c).transpose() - pa);
    const double len = nrm.norm();
    if (len < 1e-12) continue;
    nrm /= len;
    if (nrm.z() < 0) nrm = -nrm;
    if (!normal_ok(nrm, cfg.max_normal_tilt_deg)) continue;
    const Eigen::Vector4d plane(nrm.x(), nrm.y(), nrm.z(), -nrm.dot(pa));
    std::size_t count = 0;
    for (int i = 0; i < n; ++i) {
      if (std::abs(nrm.dot(points.row(i).transpose()) + plane[3]) <= cfg.inlier_threshold) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best_plane = plane;
    }
  }

  const auto min_count = static_cast<std::size_t>(std::ceil(cfg.min_inlier_fraction * n));
  if (best_count < std::max<std::size_t>(min_count, 3)) {
    spdlog::warn("segment_ground: no near-horizontal plane found; all {} points are non-ground", n);
    return out;
  }

  // One least-squares refinement, kept only if it stays near-horizontal and
  // does not lose support.
  Eigen::Vector4d plane = best_plane;
  auto inliers = plane_inliers(points, plane, cfg.inlier_threshold);
  const Eigen::Vector4d refined = fit_plane(points, inliers);
  if (normal_ok(refined.head<3>(), cfg.max_normal_tilt_deg)) {
    auto refined_in = plane_inliers(points, refined, cfg.inlier_threshold);
    if (refined_in.size() >= inliers.size()) {
      plane = refined;
      inliers = std::move(refined_in);
    }
  }
  out.plane = plane;
  out.plane_found = true;
  for (int i : inliers) out.is_ground[static_cast<std::size_t>(i)] = 1;
  return out;
}

void SamplerConfig::validate() const {
  if (!(range_limit > 0.0)) throw ConfigError("sampler: range_limit must be positive");
  if (n_nonground <= 0 || n_ground <= 0) throw ConfigError("sampler: point counts must be positive");
}

namespace {

/// Picks `k` indices from `pool` by FPS, or all of them plus replacement
/// draws when the pool is too small.
std::vector<int> sample_class(const PointsD& pts, const std::vector<int>& pool, int k,
                              const SamplerConfig& cfg, std::mt19937_64& rng, const char* label) {
  if (pool.empty()) {
    throw SamplingError(std::string("sample_frame: no ") + label + " points to sample from");
  }
  PointsD sub(static_cast<Eigen::Index>(pool.size()), 3);
  for (std::size_t i = 0; i < pool.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = pts.row(pool[i]);
  std::vector<int> out;
  if (static_cast<int>(pool.size()) >= k) {
    const FpsSeed seed{cfg.fps_seed, cfg.seed};
    for (int i : farthest_point_sample(sub, k, seed)) out.push_back(pool[static_cast<std::size_t>(i)]);
    return out;
  }
  spdlog::warn("sample_frame: only {} {} points for {} requested; filling by replacement",
               pool.size(), label, k);
  out = pool;
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  while (static_cast<int>(out.size()) < k) out.push_back(pool[pick(rng)]);
  return out;
}

}  // namespace

PointCloud sample_frame(const RawScan& scan, const SamplerConfig& cfg) {
  cfg.validate();
  const RawScan filtered = range_filter(scan, cfg.range_limit);
  const PointsD pts = filtered.points.leftCols<3>().cast<double>();
  GroundConfig gcfg = cfg.ground;
  gcfg.seed = cfg.ground.seed ^ (cfg.seed * 0x9E3779B97F4A7C15ULL);
  const GroundSegmentation seg = segment_ground(pts, gcfg);

  std::vector<int> ground, nonground;
  for (int i = 0; i < static_cast<int>(pts.rows()); ++i) {
    (seg.is_ground[static_cast<std::size_t>(i)] ? ground : nonground).push_back(i);
  }
  std::mt19937_64 rng(cfg.seed + 0x51ED);
  const auto ng = sample_class(pts, nonground, cfg.n_nonground, cfg, rng, "non-ground");
  const auto g = sample_class(pts, ground, cfg.n_ground, cfg, rng, "ground");

  PointCloud out;
  out.positions.resize(cfg.total(), 3);
  out.is_ground.resize(static_cast<std::size_t>(cfg.total()));
  Eigen::Index r = 0;
  for (int i : ng) {
    out.positions.row(r) = pts.row(i).cast<float>();
    out.is_ground[static_cast<std::size_t>(r++)] = 0;
  }
  for (int i : g) {
    out.positions.row(r) = pts.row(i).cast<float>();
    out.is_ground[static_cast<std::size_t>(r++)] = 1;
  }
  return out;
}

}  // namespace podom
