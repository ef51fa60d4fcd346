#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "podom/geometry.hpp"

namespace podom {

using PointsF = Eigen::Matrix<float, Eigen::Dynamic, 3, Eigen::RowMajor>;
using PointsD = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Sampled network input: positions in meters plus per-point ground flags.
struct PointCloud {
  PointsF positions;
  std::vector<std::uint8_t> is_ground;

  std::size_t size() const { return static_cast<std::size_t>(positions.rows()); }
  std::size_t ground_count() const;

  /// Positions of the points whose ground flag equals `ground`, as doubles.
  PointsD select(bool ground) const;
  PointsD positions_d() const { return positions.cast<double>(); }
};

/// Cloud with every position mapped through `pose` (flags kept).
PointCloud transform_cloud(const PointCloud& cloud, const Pose& pose);

/// Source/target clouds of one consecutive frame pair. The label maps source
/// coordinates into target coordinates.
struct FramePair {
  PointCloud source;
  PointCloud target;
  EulerPose label;
  std::uint16_t weight = 1;
};

}  // namespace podom
