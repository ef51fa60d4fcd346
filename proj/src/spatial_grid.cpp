#include "podom/spatial_grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "podom/errors.hpp"

namespace podom {

SpatialGrid::SpatialGrid(const PointsD& points, double cell_size) : points_(points), cell_(cell_size) {
  if (!(cell_size > 0.0)) throw Error("SpatialGrid: cell size must be positive");
  for (int i = 0; i < static_cast<int>(points_.rows()); ++i) {
    cells_[key(cell_of(points_(i, 0)), cell_of(points_(i, 1)), cell_of(points_(i, 2)))].push_back(i);
  }
}

std::int64_t SpatialGrid::cell_of(double v) const {
  return static_cast<std::int64_t>(std::floor(v / cell_));
}

SpatialGrid::Key SpatialGrid::key(std::int64_t ix, std::int64_t iy, std::int64_t iz) const {
  // 21 bits per axis is plenty for metric scenes at sub-meter cells.
  constexpr std::int64_t kMask = (std::int64_t{1} << 21) - 1;
  return ((ix & kMask) << 42) | ((iy & kMask) << 21) | (iz & kMask);
}

std::vector<int> SpatialGrid::radius_search(const Eigen::Vector3d& q, double radius) const {
  std::vector<std::pair<double, int>> hits;
  const double r2 = radius * radius;
  const auto lo_x = cell_of(q.x() - radius), hi_x = cell_of(q.x() + radius);
  const auto lo_y = cell_of(q.y() - radius), hi_y = cell_of(q.y() + radius);
  const auto lo_z = cell_of(q.z() - radius), hi_z = cell_of(q.z() + radius);
  for (auto ix = lo_x; ix <= hi_x; ++ix) {
    for (auto iy = lo_y; iy <= hi_y; ++iy) {
      for (auto iz = lo_z; iz <= hi_z; ++iz) {
        const auto it = cells_.find(key(ix, iy, iz));
        if (it == cells_.end()) continue;
        for (int i : it->second) {
          const double d = (points_.row(i).transpose() - q).squaredNorm();
          if (d <= r2) hits.emplace_back(d, i);
        }
      }
    }
  }
  std::sort(hits.begin(), hits.end());
  std::vector<int> out;
  out.reserve(hits.size());
  for (const auto& h : hits) out.push_back(h.second);
  return out;
}

int SpatialGrid::nearest(const Eigen::Vector3d& q, double max_dist, double* dist_sq) const {
  int best = -1;
  double best_d = max_dist * max_dist;
  const auto lo_x = cell_of(q.x() - max_dist), hi_x = cell_of(q.x() + max_dist);
  const auto lo_y = cell_of(q.y() - max_dist), hi_y = cell_of(q.y() + max_dist);
  const auto lo_z = cell_of(q.z() - max_dist), hi_z = cell_of(q.z() + max_dist);
  for (auto ix = lo_x; ix <= hi_x; ++ix) {
    for (auto iy = lo_y; iy <= hi_y; ++iy) {
      for (auto iz = lo_z; iz <= hi_z; ++iz) {
        const auto it = cells_.find(key(ix, iy, iz));
        if (it == cells_.end()) continue;
        for (int i : it->second) {
          const double d = (points_.row(i).transpose() - q).squaredNorm();
          if (d < best_d || (d == best_d && (best < 0 || i < best))) {
            best_d = d;
            best = i;
          }
        }
      }
    }
  }
  if (dist_sq != nullptr) *dist_sq = best_d;
  return best;
}

std::vector<std::vector<int>> knn_brute_force(const PointsD& queries, const PointsD& ref, int k) {
  const int n = static_cast<int>(ref.rows());
  if (k > n) {
    throw Error("knn: k = " + std::to_string(k) + " exceeds reference size " + std::to_string(n));
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(queries.rows()));
  std::vector<std::pair<double, int>> d(static_cast<std::size_t>(n));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    for (int i = 0; i < n; ++i) {
      d[static_cast<std::size_t>(i)] = {(ref.row(i) - queries.row(q)).squaredNorm(), i};
    }
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    auto& row = out[static_cast<std::size_t>(q)];
    row.reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) row.push_back(d[static_cast<std::size_t>(j)].second);
  }
  return out;
}

}  // namespace podom
