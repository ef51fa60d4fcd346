#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "podom/point_cloud.hpp"

namespace podom {

/// Uniform hash grid over a fixed point set. Radius queries look at the
/// cells overlapping the query ball; results are exact.
class SpatialGrid {
 public:
  SpatialGrid(const PointsD& points, double cell_size);

  /// Indices of points with squared distance <= radius^2, sorted by
  /// (distance, index).
  std::vector<int> radius_search(const Eigen::Vector3d& q, double radius) const;

  /// Nearest point within max_dist; returns -1 if none. Ties go to the
  /// lowest index.
  int nearest(const Eigen::Vector3d& q, double max_dist, double* dist_sq = nullptr) const;

  const PointsD& points() const { return points_; }

 private:
  using Key = std::int64_t;
  Key key(std::int64_t ix, std::int64_t iy, std::int64_t iz) const;
  std::int64_t cell_of(double v) const;

  PointsD points_;
  double cell_;
  std::unordered_map<Key, std::vector<int>> cells_;
};

/// k nearest neighbours of every query point, by brute force over `ref`.
/// Row q holds indices sorted by (distance, index).
std::vector<std::vector<int>> knn_brute_force(const PointsD& queries, const PointsD& ref, int k);

}  // namespace podom
