#pragma once

#include <vector>

#include "podom/geometry.hpp"
#include "podom/point_cloud.hpp"

namespace podom {

struct IcpConfig {
  int max_iterations = 50;
  /// Stop once the RMS correspondence error changes by less than this (m).
  double convergence_tol = 1e-6;
  /// Correspondences farther apart than this are ignored (m).
  double max_correspondence_distance = 1.0;
  Pose init;

  void validate() const;
};

struct IcpResult {
  Pose pose;
  /// Truncated RMS distance: sources without a match within the cutoff
  /// count as lying at the cutoff.
  double rms_error = 0.0;
  int iterations_used = 0;
  bool converged = false;
  /// RMS error of every accepted estimate, starting with the initial pose.
  std::vector<double> rms_history;
  int correspondences = 0;
};

/// Least-squares rigid transform mapping src rows onto dst rows (SVD of the
/// cross-covariance with a determinant correction against reflections).
/// Throws IcpError for mismatched counts, fewer than 3 points or a
/// rank < 2 configuration.
Pose best_fit(const PointsD& src, const PointsD& dst);

/// Point-to-point ICP. The returned pose maps src coordinates into dst
/// coordinates and already includes cfg.init. A step that raises the RMS
/// error is rejected and ends the run (converged only if the rise is below
/// the tolerance). Throws IcpError when an iteration finds no correspondence.
IcpResult icp(const PointsD& src, const PointsD& dst, const IcpConfig& cfg = {});

/// ICP on the pair's clouds, started from `estimate`.
Pose refine(const FramePair& pair, const Pose& estimate, IcpConfig cfg = {});
IcpResult refine_detailed(const FramePair& pair, const Pose& estimate, IcpConfig cfg = {});

}  // namespace podom
