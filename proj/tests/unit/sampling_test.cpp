#include "podom/sampling.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <random>
#include <numeric>
#include <set>
#include <tuple>

#include "podom/spatial_grid.hpp"
#include "unit/test_util.hpp"

namespace podom {
namespace {

/// Exhaustive greedy maximin: at every step scan all unselected candidates
/// against every selected point.
std::vector<int> greedy_oracle(const PointsD& pts, int k, int first) {
  const int n = static_cast<int>(pts.rows());
  std::vector<int> sel{first};
  while (static_cast<int>(sel.size()) < k) {
    int best = -1;
    double best_d = -1;
    for (int c = 0; c < n; ++c) {
      if (std::find(sel.begin(), sel.end(), c) != sel.end()) continue;
      double m = std::numeric_limits<double>::infinity();
      for (int s : sel) m = std::min(m, (pts.row(c) - pts.row(s)).squaredNorm());
      if (m > best_d) {
        best_d = m;
        best = c;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

PointsD random_points(std::mt19937_64& rng, int n, double scale = 10.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  PointsD p(n, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return p;
}

TEST(Fps, MatchesExhaustiveOracleForSmallSets) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12);
    const int k = 1 + static_cast<int>(rng() % static_cast<unsigned>(n));
    PointsD pts = random_points(rng, n);
    if (trial % 4 == 0) pts = pts.array().round();  // integer grid forces ties
    EXPECT_EQ(farthest_point_sample(pts, k), greedy_oracle(pts, k, 0)) << "trial " << trial;
  }
}

TEST(Fps, PlantedTwoDimensionalPoints) {
  PointsD pts(8, 3);
  pts << 0, 0, 0,  1, 0, 0,  10, 0, 0,  0, 10, 0,  10, 10, 0,  5, 5, 0,  9, 1, 0,  1, 9, 0;
  // From index 0 the farthest point is (10,10); then (10,0) and (0,10) tie
  // at 100 and the lower index wins.
  EXPECT_EQ(farthest_point_sample(pts, 3), (std::vector<int>{0, 4, 2}));
  EXPECT_EQ(farthest_point_sample(pts, 3), greedy_oracle(pts, 3, 0));
}

TEST(Fps, TrivialCases) {
  std::mt19937_64 rng(12);
  const PointsD pts = random_points(rng, 20);
  EXPECT_EQ(farthest_point_sample(pts, 1), std::vector<int>{0});
  auto all = farthest_point_sample(pts, 20);
  std::sort(all.begin(), all.end());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(all[static_cast<std::size_t>(i)], i);
  EXPECT_TRUE(farthest_point_sample(pts, 0).empty());
  EXPECT_THROW(farthest_point_sample(pts, 21), SamplingError);
}

TEST(Fps, NoDuplicatesAndExactLength) {
  std::mt19937_64 rng(13);
  const PointsD pts = random_points(rng, 500);
  const auto idx = farthest_point_sample(pts, 137, FpsSeed::random(5));
  EXPECT_EQ(idx.size(), 137u);
  EXPECT_EQ(std::set<int>(idx.begin(), idx.end()).size(), 137u);
  EXPECT_EQ(idx, farthest_point_sample(pts, 137, FpsSeed::random(5)));
}

TEST(Fps, MinPairwiseDistanceIsNonIncreasingInK) {
  std::mt19937_64 rng(14);
  const PointsD pts = random_points(rng, 200);
  const auto order = farthest_point_sample(pts, 200);
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 2; k <= 200; ++k) {
    const auto idx = farthest_point_sample(pts, k);
    ASSERT_TRUE(std::equal(idx.begin(), idx.end(), order.begin()));  // prefix property
    double m = std::numeric_limits<double>::infinity();
    for (int a = 0; a < k; ++a) {
      for (int b = a + 1; b < k; ++b) m = std::min(m, (pts.row(idx[a]) - pts.row(idx[b])).squaredNorm());
    }
    EXPECT_LE(m, prev);
    prev = m;
  }
}

TEST(Fps, NearestCentroidSeedIgnoresStorageOrder) {
  std::mt19937_64 rng(15);
  const PointsD pts = random_points(rng, 60);
  std::vector<int> perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointsD shuffled(60, 3);
  for (int i = 0; i < 60; ++i) shuffled.row(i) = pts.row(perm[static_cast<std::size_t>(i)]);
  const auto a = farthest_point_sample(pts, 15, FpsSeed::nearest_centroid());
  const auto b = farthest_point_sample(shuffled, 15, FpsSeed::nearest_centroid());
  for (int i = 0; i < 15; ++i) EXPECT_EQ(perm[static_cast<std::size_t>(b[static_cast<std::size_t>(i)])], a[static_cast<std::size_t>(i)]);
}

RawScan scan_from(const PointsD& pts) {
  RawScan s;
  s.points.resize(pts.rows(), 4);
  s.points.leftCols<3>() = pts.cast<float>();
  s.points.col(3).setZero();
  return s;
}

TEST(RangeFilter, KeepsAndRemoves) {
  PointsD pts(4, 3);
  pts << 49, 0, 0,  60, 0, 0,  0, -50, 5,  0, 0, 100;
  const RawScan out = range_filter(scan_from(pts), 50.0);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out.points(0, 0), 49.0f);
  EXPECT_EQ(out.points(1, 1), -50.0f);
  EXPECT_EQ(out.points(2, 2), 100.0f);  // vertical axis is not limited
  EXPECT_EQ(range_filter(scan_from(pts), std::numeric_limits<double>::infinity()).size(), 4u);
  PointsD far(1, 3);
  far << 70, 70, 0;
  EXPECT_THROW(range_filter(scan_from(far), 50.0), SamplingError);
  EXPECT_THROW(range_filter(scan_from(pts), 0.0), SamplingError);
}

PointsD plane_with_pillars(std::mt19937_64& rng, int n_plane, int n_pillar) {
  std::uniform_real_distribution<double> u(-20, 20), h(0.5, 3.0), jitter(-0.02, 0.02);
  PointsD p(n_plane + n_pillar, 3);
  for (int i = 0; i < n_plane; ++i) p.row(i) << u(rng), u(rng), -1.7 + jitter(rng);
  for (int i = 0; i < n_pillar; ++i) {
    const double cx = (i % 4) * 5.0 - 7.5, cy = (i % 3) * 5.0 - 5.0;
    p.row(n_plane + i) << cx + jitter(rng), cy + jitter(rng), -1.7 + h(rng);
  }
  return p;
}

TEST(GroundSegmentation, FlatPlaneWithPillars) {
  std::mt19937_64 rng(16);
  const PointsD pts = plane_with_pillars(rng, 1000, 100);
  const auto seg = segment_ground(pts);
  ASSERT_TRUE(seg.plane_found);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(seg.is_ground[static_cast<std::size_t>(i)], 1) << i;
  for (int i = 1000; i < 1100; ++i) {
    const bool near = std::abs(pts(i, 2) + 1.7) <= 0.15 + 0.05;
    if (!near) EXPECT_EQ(seg.is_ground[static_cast<std::size_t>(i)], 0) << i;
  }
  EXPECT_NEAR(seg.plane[2], 1.0, 1e-3);
  EXPECT_NEAR(seg.plane[3], 1.7, 0.01);
  // every flagged point lies within threshold of the plane
  for (int i = 0; i < 1100; ++i) {
    if (seg.is_ground[static_cast<std::size_t>(i)]) {
      EXPECT_LE(std::abs(seg.plane.head<3>().dot(pts.row(i).transpose()) + seg.plane[3]), 0.15);
    }
  }
}

TEST(GroundSegmentation, RandomSphereHasNoGround) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0, 1);
  PointsD pts(800, 3);
  for (int i = 0; i < 800; ++i) {
    Eigen::Vector3d v(n(rng), n(rng), n(rng));
    pts.row(i) = 10.0 * v.normalized().transpose();
  }
  const auto seg = segment_ground(pts);
  EXPECT_FALSE(seg.plane_found);
  EXPECT_EQ(seg.ground_count(), 0u);
}

TEST(GroundSegmentation, PlaneOnlyIsAllGroundAndTooFewThrows) {
  std::mt19937_64 rng(18);
  const PointsD pts = plane_with_pillars(rng, 300, 0);
  EXPECT_EQ(segment_ground(pts).ground_count(), 300u);
  EXPECT_THROW(segment_ground(pts.topRows(49)), SamplingError);
}

TEST(GroundSegmentation, SteepPlaneIsRejected) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(-10, 10);
  PointsD pts(400, 3);
  for (int i = 0; i < 400; ++i) {  // 45 degree ramp
    const double x = u(rng), y = u(rng);
    pts.row(i) << x, y, x;
  }
  EXPECT_EQ(segment_ground(pts).ground_count(), 0u);
}

PointsD street_scene(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-45, 45), h(0.0, 4.0), j(-0.3, 0.3);
  PointsD pts = plane_with_pillars(rng, 6000, 0);
  PointsD out(6000 + 4000, 3);
  out.topRows(6000) = pts;
  for (int i = 0; i < 4000; ++i) {  // clustered obstacles
    const double cx = ((i / 200) % 5) * 8.0 - 16.0, cy = ((i / 1000) % 4) * 8.0 - 12.0;
    out.row(6000 + i) << cx + j(rng), cy + j(rng), -1.2 + h(rng);
  }
  return out;
}

TEST(SampleFrame, ExactCountsOrderingAndDeterminism) {
  std::mt19937_64 rng(20);
  const RawScan scan = scan_from(street_scene(rng));
  SamplerConfig cfg;
  cfg.n_nonground = 800;
  cfg.n_ground = 400;
  const PointCloud a = sample_frame(scan, cfg);
  ASSERT_EQ(a.size(), 1200u);
  EXPECT_EQ(a.ground_count(), 400u);
  for (int i = 0; i < 800; ++i) EXPECT_EQ(a.is_ground[static_cast<std::size_t>(i)], 0);
  EXPECT_TRUE(a.positions.allFinite());
  const PointCloud b = sample_frame(scan, cfg);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_EQ(a.is_ground, b.is_ground);
}

TEST(SampleFrame, FullSizedConfigs) {
  std::mt19937_64 rng(21);
  PointsD big(30000, 3);
  std::uniform_real_distribution<double> u(-45, 45), h(-1.0, 3.0);
  for (int i = 0; i < 15000; ++i) big.row(i) << u(rng), u(rng), -1.7;
  for (int i = 15000; i < 30000; ++i) big.row(i) << u(rng), u(rng), h(rng);
  const RawScan scan = scan_from(big);
  SamplerConfig small;
  small.n_nonground = 4000;
  small.n_ground = 2000;
  EXPECT_EQ(sample_frame(scan, small).size(), 6000u);
  EXPECT_EQ(sample_frame(scan, SamplerConfig{}).size(), 12000u);
}

TEST(SampleFrame, DeficitFilledByReplacement) {
  std::mt19937_64 rng(22);
  const RawScan scan = scan_from(plane_with_pillars(rng, 500, 40));
  SamplerConfig cfg;
  cfg.n_nonground = 100;
  cfg.n_ground = 200;
  const PointCloud out = sample_frame(scan, cfg);
  EXPECT_EQ(out.size(), 300u);
  EXPECT_EQ(out.ground_count(), 200u);
}

TEST(SampleFrame, ExactClassSizeKeepsEveryPoint) {
  std::mt19937_64 rng(23);
  const PointsD pts = plane_with_pillars(rng, 500, 0);
  PointsD all(560, 3);
  all.topRows(500) = pts;
  for (int i = 0; i < 60; ++i) all.row(500 + i) << i * 0.5, 3.0, 2.0 + i * 0.01;
  SamplerConfig cfg;
  const auto seg = segment_ground(all, [&] {
    GroundConfig g = cfg.ground;
    g.seed = cfg.ground.seed ^ (cfg.seed * 0x9E3779B97F4A7C15ULL);
    return g;
  }());
  cfg.n_nonground = static_cast<int>(560 - seg.ground_count());
  cfg.n_ground = 10;
  const PointCloud out = sample_frame(scan_from(all), cfg);
  std::set<std::tuple<float, float, float>> got, want;
  for (int i = 0; i < cfg.n_nonground; ++i) got.insert({out.positions(i, 0), out.positions(i, 1), out.positions(i, 2)});
  for (int i = 0; i < 560; ++i) {
    if (!seg.is_ground[static_cast<std::size_t>(i)]) {
      want.insert({static_cast<float>(all(i, 0)), static_cast<float>(all(i, 1)), static_cast<float>(all(i, 2))});
    }
  }
  EXPECT_EQ(got, want);
}

TEST(SampleFrame, EmptyClassThrows) {
  std::mt19937_64 rng(24);
  const RawScan scan = scan_from(plane_with_pillars(rng, 300, 0));
  SamplerConfig cfg;
  cfg.n_nonground = 10;
  cfg.n_ground = 10;
  EXPECT_THROW(sample_frame(scan, cfg), SamplingError);
}

double mean_nn_distance(const PointsD& pts) {
  SpatialGrid grid(pts, 2.0);
  const auto nn = knn_brute_force(pts, pts, 2);
  double s = 0;
  for (int i = 0; i < static_cast<int>(pts.rows()); ++i) s += (pts.row(i) - pts.row(nn[static_cast<std::size_t>(i)][1])).norm();
  return s / static_cast<double>(pts.rows());
}

TEST(SampleFrame, GroundPointsAreSparserThanNonGround) {
  std::mt19937_64 rng(25);
  const RawScan scan = scan_from(street_scene(rng));
  SamplerConfig cfg;
  cfg.n_nonground = 800;
  cfg.n_ground = 400;
  const PointCloud out = sample_frame(scan, cfg);
  EXPECT_GT(mean_nn_distance(out.select(true)), mean_nn_distance(out.select(false)));
}

TEST(SpatialGrid, RadiusAndNearestMatchBruteForce) {
  std::mt19937_64 rng(26);
  const PointsD pts = random_points(rng, 400, 5.0);
  SpatialGrid grid(pts, 0.7);
  for (int q = 0; q < 50; ++q) {
    const Eigen::Vector3d c = random_points(rng, 1, 6.0).row(0).transpose();
    std::vector<std::pair<double, int>> all;
    for (int i = 0; i < 400; ++i) all.push_back({(pts.row(i).transpose() - c).squaredNorm(), i});
    std::sort(all.begin(), all.end());
    std::vector<int> want;
    for (auto [d, i] : all) {
      if (d <= 1.5 * 1.5) want.push_back(i);
    }
    EXPECT_EQ(grid.radius_search(c, 1.5), want);
    const int nn = grid.nearest(c, 100.0);
    EXPECT_EQ(nn, all[0].second);
    const auto knn = knn_brute_force(c.transpose(), pts, 5);
    for (int k = 0; k < 5; ++k) EXPECT_EQ(knn[0][static_cast<std::size_t>(k)], all[static_cast<std::size_t>(k)].second);
  }
  EXPECT_EQ(grid.nearest(Eigen::Vector3d(100, 100, 100), 1.0), -1);
}

}  // namespace
}  // namespace podom
