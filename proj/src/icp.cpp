#include "podom/icp.hpp"

#include <cmath>
#include <string>

#include <Eigen/SVD>

#include "podom/errors.hpp"
#include "podom/spatial_grid.hpp"

namespace podom {

void IcpConfig::validate() const {
  if (max_iterations < 1) throw ConfigError("icp: max_iterations must be >= 1");
  if (!(convergence_tol > 0.0)) throw ConfigError("icp: convergence_tol must be positive");
  if (!(max_correspondence_distance > 0.0)) throw ConfigError("icp: max_correspondence_distance must be positive");
  validate_pose(init);
}

Pose best_fit(const PointsD& src, const PointsD& dst) {
  if (src.rows() != dst.rows()) {
    throw IcpError("best_fit: " + std::to_string(src.rows()) + " source vs " + std::to_string(dst.rows()) +
                   " target points");
  }
  if (src.rows() < 3) throw IcpError("best_fit: need at least 3 correspondences");
  const Eigen::RowVector3d cs = src.colwise().mean(), cd = dst.colwise().mean();
  const Mat3 h = (src.rowwise() - cs).transpose() * (dst.rowwise() - cd);
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  if (!(s(0) > 0.0) || s(1) <= 1e-12 * s(0)) throw IcpError("best_fit: degenerate (collinear or coincident) points");
  const Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
  Pose p;
  p.rotation = v * d * u.transpose();
  p.translation = cd.transpose() - p.rotation * cs.transpose();
  return p;
}

namespace {

struct Matches {
  PointsD src;
  PointsD dst;
  // every source point counts, unmatched ones at the cutoff distance, which
  // makes the value monotone under ICP steps
  double rms = 0.0;
};

Matches match(const PointsD& src, const Pose& pose, const SpatialGrid& grid, double max_dist) {
  std::vector<int> si, di;
  double sum_sq = 0.0;
  for (Eigen::Index i = 0; i < src.rows(); ++i) {
    const Vec3 q = pose.apply(src.row(i).transpose());
    double d2 = 0.0;
    const int j = grid.nearest(q, max_dist, &d2);
    if (j < 0) continue;
    si.push_back(static_cast<int>(i));
    di.push_back(j);
    sum_sq += d2;
  }
  if (si.empty()) throw IcpError("icp: no correspondences within " + std::to_string(max_dist) + " m");
  Matches m;
  m.src.resize(static_cast<Eigen::Index>(si.size()), 3);
  m.dst.resize(static_cast<Eigen::Index>(si.size()), 3);
  for (std::size_t k = 0; k < si.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    m.src.row(r) = pose.apply(src.row(si[k]).transpose()).transpose();
    m.dst.row(r) = grid.points().row(di[k]);
  }
  const double unmatched = static_cast<double>(src.rows() - static_cast<Eigen::Index>(si.size()));
  m.rms = std::sqrt((sum_sq + unmatched * max_dist * max_dist) / static_cast<double>(src.rows()));
  return m;
}

}  // namespace

IcpResult icp(const PointsD& src, const PointsD& dst, const IcpConfig& cfg) {
  cfg.validate();
  if (src.rows() == 0 || dst.rows() == 0) throw IcpError("icp: empty cloud");
  const SpatialGrid grid(dst, cfg.max_correspondence_distance);

  IcpResult r;
  r.pose = cfg.init;
  Matches cur = match(src, r.pose, grid, cfg.max_correspondence_distance);
  r.rms_history.push_back(cur.rms);
  while (r.iterations_used < cfg.max_iterations) {
    ++r.iterations_used;
    if (cur.src.rows() < 3) break;
    Pose step;
    try {
      step = best_fit(cur.src, cur.dst);
    } catch (const IcpError&) {
      break;  // too few distinct matches to constrain a rigid fit
    }
    const Pose candidate = compose(step, r.pose);
    Matches next = match(src, candidate, grid, cfg.max_correspondence_distance);
    if (next.rms > cur.rms) {
      // keep the better estimate; a rise within the tolerance is numerical noise at the optimum
      r.converged = next.rms - cur.rms < cfg.convergence_tol;
      break;
    }
    const double change = cur.rms - next.rms;
    r.pose = candidate;
    cur = std::move(next);
    r.rms_history.push_back(cur.rms);
    if (std::abs(change) < cfg.convergence_tol) {
      r.converged = true;
      break;
    }
  }
  r.rms_error = cur.rms;
  r.correspondences = static_cast<int>(cur.src.rows());
  return r;
}

IcpResult refine_detailed(const FramePair& pair, const Pose& estimate, IcpConfig cfg) {
  cfg.init = estimate;
  return icp(pair.source.positions_d(), pair.target.positions_d(), cfg);
}

Pose refine(const FramePair& pair, const Pose& estimate, IcpConfig cfg) {
  return refine_detailed(pair, estimate, std::move(cfg)).pose;
}

}  // namespace podom
