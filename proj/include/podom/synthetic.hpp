#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "podom/geometry.hpp"
#include "podom/kitti_io.hpp"

namespace podom {

/// Procedural street scene driven by a smooth planar trajectory. Scans are
/// drawn from a fixed world point set, so consecutive frames overlap.
struct SyntheticConfig {
  int n_frames = 50;
  int points_per_scan = 30000;
  double scan_range = 60.0;    // meters, half-width of the visible square
  double speed_min = 0.6;      // meters per frame
  double speed_max = 1.4;
  double yaw_rate_max = 0.06;  // radians per frame
  double sensor_height = 1.73;
  double noise_sigma = 0.01;   // meters
  double world_density = 3.0;  // points per square meter of ground
  int n_objects = 400;
  std::uint64_t seed = 0;
};

struct SyntheticSequence {
  std::vector<RawScan> scans;
  std::vector<Pose> lidar_poses;  // frame -> world (lidar frame, frame 0 = identity)
  Pose calib;                     // lidar -> camera
};

/// KITTI-like lidar -> camera extrinsic.
Pose kitti_like_calib();

SyntheticSequence make_synthetic_sequence(const SyntheticConfig& cfg);

/// Writes the sequence in KITTI layout under root: sequences/<seq>/velodyne,
/// sequences/<seq>/calib.txt and poses/<seq>.txt (camera-frame poses).
void write_synthetic_sequence(const std::filesystem::path& root, const std::string& seq,
                              const SyntheticSequence& data);

}  // namespace podom
