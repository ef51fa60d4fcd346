#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "podom/geometry.hpp"

namespace podom {

/// Trajectories are frame -> world poses (the layout of KITTI pose files).

/// RMSE of translation differences after re-anchoring both trajectories so
/// frame 0 is the identity. No global alignment is fitted.
double ate(std::span<const Pose> est, std::span<const Pose> gt);

struct RelativeErrors {
  double mean_rte = 0.0;  // meters
  double mean_rre = 0.0;  // degrees
};

/// Per frame E = gt^-1 * est; RTE = |t(E)|, RRE = angle of R(E).
RelativeErrors relative_errors(std::span<const Pose> est_rel, std::span<const Pose> gt_rel);

struct DriftConfig {
  std::vector<double> lengths{100, 200, 300, 400, 500, 600, 700, 800};
  /// Segments start at every `step`-th frame.
  int step = 1;
};

struct LengthDrift {
  double length = 0.0;
  int segments = 0;
  double t_err = 0.0;  // percent
  double r_err = 0.0;  // degrees per 100 m
};

struct Drift {
  /// One row per configured length, including those without segments.
  std::vector<LengthDrift> per_length;
  double t_rel = 0.0;  // percent
  double r_rel = 0.0;  // degrees per 100 m
  /// False when no length had a segment (trajectory too short); t_rel and
  /// r_rel are then 0 and serialize as null.
  bool valid = false;
};

/// Segment drift over ground-truth arc lengths: for each start frame and
/// length L, the first frame whose arc length from the start reaches L closes
/// the segment. Errors are averaged per length, then across lengths that had
/// at least one segment.
Drift kitti_drift(std::span<const Pose> est, std::span<const Pose> gt, const DriftConfig& cfg = {});

/// Cumulative ground-truth path length per frame.
std::vector<double> path_lengths(std::span<const Pose> poses);

struct TrajectoryReport {
  double ate_rmse = 0.0;
  double mean_rte = 0.0;
  double mean_rre = 0.0;
  Drift drift;
  int frames = 0;
};

/// Frame i -> i+1 relative motions in the label convention
/// (T = P_{i+1}^-1 * P_i maps frame-i coordinates into frame i+1).
std::vector<Pose> consecutive_motions(std::span<const Pose> frame_to_world);

TrajectoryReport evaluate_trajectory(std::span<const Pose> est, std::span<const Pose> gt,
                                     const DriftConfig& cfg = {});

nlohmann::json report_to_json(const TrajectoryReport& r);
void write_report_json(const std::filesystem::path& path, const TrajectoryReport& r);
void write_drift_csv(const std::filesystem::path& path, const Drift& d);

}  // namespace podom
