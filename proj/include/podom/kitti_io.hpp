#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "podom/geometry.hpp"
#include "podom/point_cloud.hpp"

namespace podom {

using ScanPoints = Eigen::Matrix<float, Eigen::Dynamic, 4, Eigen::RowMajor>;

/// One velodyne sweep: x, y, z in meters and reflectance.
struct RawScan {
  ScanPoints points;
  int frame_index = 0;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
};

/// Reads a KITTI velodyne .bin file (little-endian float32 x4 per point).
RawScan read_scan(const std::filesystem::path& path, int frame_index = 0);
void write_scan(const std::filesystem::path& path, const RawScan& scan);

/// Reads a KITTI poses/NN.txt file: 12 numbers per line, row-major [R|t].
/// Rotations are projected onto SO(3) after parsing.
std::vector<Pose> read_poses(const std::filesystem::path& path);
void write_poses(const std::filesystem::path& path, const std::vector<Pose>& poses);

/// Reads the `Tr:` entry (lidar -> camera) of a KITTI calib.txt.
Pose read_calib(const std::filesystem::path& path);
void write_calib(const std::filesystem::path& path, const Pose& tr);

/// calib^-1 * cam_pose * calib: a camera-frame pose expressed in the lidar frame.
Pose lidar_frame_pose(const Pose& cam_pose, const Pose& calib);

/// Lazily loaded KITTI sequence: scans are read on demand from scan_paths.
struct SequenceData {
  std::string name;
  std::vector<std::filesystem::path> scan_paths;
  std::vector<Pose> global_poses;  // camera frame, frame -> world
  Pose calib;                      // lidar -> camera

  std::size_t size() const { return scan_paths.size(); }
  RawScan scan(std::size_t i) const { return read_scan(scan_paths.at(i), static_cast<int>(i)); }
  /// Frame -> world poses in the lidar frame (or camera frame when
  /// use_calibration is false).
  std::vector<Pose> lidar_poses(bool use_calibration = true) const;
};

/// Loads <root>/sequences/<seq>/{velodyne/*.bin,calib.txt} and
/// <root>/poses/<seq>.txt. Throws IoError when counts disagree.
SequenceData load_sequence(const std::filesystem::path& root, const std::string& seq);

/// Relative labels T_i = G_{i+1} G_i^-1 with G_i = P_i^-1 for consecutive
/// frame -> world poses P_i.
std::vector<Pose> relative_labels(const std::vector<Pose>& frame_to_world);

inline constexpr char kPairCacheMagic[4] = {'P', 'O', 'D', 'M'};
inline constexpr std::uint32_t kPairCacheVersion = 1;

/// Pair cache layout (all little-endian):
///   "PODM" | u32 version | u32 record count |
///   per record: source block, target block, 6 x f64 label, u16 weight
///   block: u32 point count | count x 3 x f32 | count x u8 ground flag
void write_pair_cache(const std::filesystem::path& path, const std::vector<FramePair>& pairs);
std::vector<FramePair> read_pair_cache(const std::filesystem::path& path);

}  // namespace podom
