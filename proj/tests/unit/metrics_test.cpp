#include "podom/metrics.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>

#include "unit/test_util.hpp"

namespace podom {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// 50 frames driving roughly 10 m per frame with gentle turns and bumps.
std::vector<Pose> drive(std::mt19937_64& rng, int n = 50, double step = 10.0) {
  std::normal_distribution<double> small(0.0, 1.0);
  std::vector<Pose> out{Pose{}};
  for (int i = 1; i < n; ++i) {
    Pose rel;
    rel.rotation = (Eigen::AngleAxisd(0.05 * small(rng), Vec3::UnitY()) *
                    Eigen::AngleAxisd(0.01 * small(rng), Vec3::UnitX()))
                       .toRotationMatrix();
    rel.translation = Vec3(0.1 * small(rng), 0.05 * small(rng), step * (1.0 + 0.1 * small(rng)));
    out.push_back(compose(out.back(), rel));
  }
  return out;
}

// Estimate with per-step errors compounding along the path.
std::vector<Pose> perturb(std::mt19937_64& rng, const std::vector<Pose>& gt, double level) {
  std::normal_distribution<double> z(0.0, level);
  std::vector<Pose> est{gt.front()};
  for (std::size_t i = 1; i < gt.size(); ++i) {
    Pose step = compose(inverse(gt[i - 1]), gt[i]);
    step.rotation = step.rotation * Eigen::AngleAxisd(z(rng), Vec3(z(rng), 1.0, z(rng)).normalized()).toRotationMatrix();
    step.translation += Vec3(z(rng), z(rng), z(rng));
    est.push_back(compose(est.back(), step));
  }
  return est;
}

// angle of a rotation through its quaternion
double quat_angle_deg(const Mat3& r) {
  const Eigen::Quaterniond q(r);
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w())) / kDeg;
}

double oracle_ate(const std::vector<Pose>& est, const std::vector<Pose>& gt) {
  const Mat4 e0 = est[0].matrix().inverse(), g0 = gt[0].matrix().inverse();
  double s = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    s += ((e0 * est[i].matrix()).block<3, 1>(0, 3) - (g0 * gt[i].matrix()).block<3, 1>(0, 3)).squaredNorm();
  }
  return std::sqrt(s / static_cast<double>(est.size()));
}

struct OracleRow {
  int segments = 0;
  double t = 0.0, r = 0.0;
};

// Enumerates every (start, end) pair and walks the path explicitly.
OracleRow oracle_drift(const std::vector<Pose>& est, const std::vector<Pose>& gt, double len) {
  OracleRow row;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = i + 1; j < gt.size(); ++j) {
      double arc = 0.0;
      for (std::size_t k = i + 1; k <= j; ++k) arc += (gt[k].matrix().block<3, 1>(0, 3) - gt[k - 1].matrix().block<3, 1>(0, 3)).norm();
      if (arc < len) continue;
      const Mat4 dg = gt[i].matrix().inverse() * gt[j].matrix();
      const Mat4 de = est[i].matrix().inverse() * est[j].matrix();
      const Mat4 err = de.inverse() * dg;
      row.t += err.block<3, 1>(0, 3).norm() / len;
      row.r += quat_angle_deg(err.block<3, 3>(0, 0)) / len;
      ++row.segments;
      break;
    }
  }
  if (row.segments > 0) {
    row.t *= 100.0 / row.segments;
    row.r *= 100.0 / row.segments;
  }
  return row;
}

TEST(Ate, ZeroForIdenticalTrajectories) {
  std::mt19937_64 rng(1);
  const auto gt = drive(rng);
  EXPECT_EQ(ate(gt, gt), 0.0);
}

TEST(Ate, ConstantOffsetAfterFirstFrame) {
  std::mt19937_64 rng(2);
  const auto gt = drive(rng);
  auto est = gt;
  for (std::size_t i = 1; i < est.size(); ++i) est[i].translation += Vec3(0.6, 0.0, 0.8);
  const double n = static_cast<double>(gt.size());
  EXPECT_NEAR(ate(est, gt), std::sqrt((n - 1) / n), 1e-12);
}

TEST(Ate, MatchesMatrixOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto gt = drive(rng);
    auto est = perturb(rng, gt, 0.01);
    // anchoring must remove a shared starting pose
    const Pose w = testing::random_pose(rng);
    for (auto& p : gt) p = compose(w, p);
    EXPECT_NEAR(ate(est, gt), oracle_ate(est, gt), 1e-9);
  }
  EXPECT_THROW(ate(std::vector<Pose>(3), std::vector<Pose>(4)), MetricsError);
}

TEST(RelativeErrors, PureYawOffset) {
  Pose gt;
  gt.translation = Vec3(0.0, 0.0, 1.0);
  Pose est = gt;
  est.rotation = Eigen::AngleAxisd(1.0 * kDeg, Vec3::UnitY()).toRotationMatrix();
  const auto r = relative_errors(std::vector<Pose>{est}, std::vector<Pose>{gt});
  EXPECT_NEAR(r.mean_rre, 1.0, 1e-9);
  EXPECT_NEAR(r.mean_rte, 0.0, 1e-15);
}

TEST(RelativeErrors, MatchesQuaternionOracle) {
  std::mt19937_64 rng(4);
  std::vector<Pose> est, gt;
  double rte = 0.0, rre = 0.0;
  for (int i = 0; i < 200; ++i) {
    est.push_back(testing::random_pose(rng, 0.3, 2.0));
    gt.push_back(testing::random_pose(rng, 0.3, 2.0));
    const Mat4 e = gt.back().matrix().inverse() * est.back().matrix();
    rte += e.block<3, 1>(0, 3).norm();
    rre += quat_angle_deg(e.block<3, 3>(0, 0));
  }
  const auto r = relative_errors(est, gt);
  EXPECT_NEAR(r.mean_rte, rte / 200, 1e-9);
  EXPECT_NEAR(r.mean_rre, rre / 200, 1e-9);
  const auto zero = relative_errors(gt, gt);
  EXPECT_EQ(zero.mean_rte, 0.0);
  EXPECT_NEAR(zero.mean_rre, 0.0, 1e-12);
  EXPECT_THROW(relative_errors(est, std::span(gt).first(3)), MetricsError);
}

TEST(Drift, LinearScaleErrorIsOnePercent) {
  std::vector<Pose> gt, est;
  for (int i = 0; i <= 800; ++i) {
    Pose g;
    g.translation = Vec3(0.0, 0.0, i);
    gt.push_back(g);
    g.translation *= 1.01;
    est.push_back(g);
  }
  const Drift d = kitti_drift(est, gt);
  ASSERT_TRUE(d.valid);
  for (const auto& row : d.per_length) {
    EXPECT_EQ(row.segments, 801 - static_cast<int>(row.length));
    EXPECT_NEAR(row.t_err, 1.0, 1e-9);
    EXPECT_EQ(row.r_err, 0.0);
  }
  EXPECT_NEAR(d.t_rel, 1.0, 1e-9);
}

TEST(Drift, MatchesSegmentEnumerationOracle) {
  std::mt19937_64 rng(5);
  const auto gt = drive(rng);
  const auto est = perturb(rng, gt, 0.005);
  const Drift d = kitti_drift(est, gt);
  ASSERT_TRUE(d.valid);
  double t_sum = 0.0, r_sum = 0.0;
  int used = 0;
  for (const auto& row : d.per_length) {
    const OracleRow o = oracle_drift(est, gt, row.length);
    EXPECT_EQ(row.segments, o.segments) << row.length;
    EXPECT_NEAR(row.t_err, o.t, 1e-9) << row.length;
    EXPECT_NEAR(row.r_err, o.r, 1e-9) << row.length;
    if (o.segments > 0) {
      t_sum += o.t;
      r_sum += o.r;
      ++used;
    }
  }
  EXPECT_GT(used, 2);
  EXPECT_NEAR(d.t_rel, t_sum / used, 1e-9);
  EXPECT_NEAR(d.r_rel, r_sum / used, 1e-9);
}

TEST(Drift, InvariantToSharedRigidMotion) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto gt = drive(rng);
    auto est = perturb(rng, gt, 0.01);
    const Drift before = kitti_drift(est, gt);
    const TrajectoryReport rep_before = evaluate_trajectory(est, gt);
    const Pose w = testing::random_pose(rng, std::numbers::pi, 100.0);
    for (auto& p : gt) p = compose(w, p);
    for (auto& p : est) p = compose(w, p);
    const Drift after = kitti_drift(est, gt);
    EXPECT_NEAR(after.t_rel, before.t_rel, 1e-9);
    EXPECT_NEAR(after.r_rel, before.r_rel, 1e-9);
    const TrajectoryReport rep_after = evaluate_trajectory(est, gt);
    EXPECT_NEAR(rep_after.ate_rmse, rep_before.ate_rmse, 1e-9);
    EXPECT_NEAR(rep_after.mean_rte, rep_before.mean_rte, 1e-9);
    EXPECT_NEAR(rep_after.mean_rre, rep_before.mean_rre, 1e-9);
  }
}

TEST(Drift, ShortTrajectoryHasNoSegments) {
  std::mt19937_64 rng(7);
  const auto gt = drive(rng, 10, 1.0);
  const Drift d = kitti_drift(gt, gt);
  EXPECT_FALSE(d.valid);
  EXPECT_EQ(d.t_rel, 0.0);
  for (const auto& row : d.per_length) EXPECT_EQ(row.segments, 0);
  TrajectoryReport r;
  r.drift = d;
  EXPECT_TRUE(report_to_json(r)["t_rel_percent"].is_null());
  DriftConfig bad;
  bad.step = 0;
  EXPECT_THROW(kitti_drift(gt, gt, bad), ConfigError);
}

TEST(Report, ZeroIffIdentical) {
  std::mt19937_64 rng(8);
  const auto gt = drive(rng);
  const auto same = evaluate_trajectory(gt, gt);
  EXPECT_LE(same.ate_rmse, 1e-12);
  EXPECT_LE(same.mean_rte, 1e-12);
  EXPECT_LE(same.mean_rre, 1e-12);
  EXPECT_LE(same.drift.t_rel, 1e-12);
  EXPECT_LE(same.drift.r_rel, 1e-12);
  const auto est = perturb(rng, gt, 1e-3);
  const auto diff = evaluate_trajectory(est, gt);
  EXPECT_GT(diff.ate_rmse, 0.0);
  EXPECT_GT(diff.mean_rte, 0.0);
  EXPECT_GT(diff.mean_rre, 0.0);
  EXPECT_GT(diff.drift.t_rel, 0.0);
  EXPECT_GT(diff.drift.r_rel, 0.0);
}

TEST(Report, ConsecutiveMotionsFollowLabelConvention) {
  std::mt19937_64 rng(9);
  const auto traj = drive(rng, 10);
  const auto rel = consecutive_motions(traj);
  ASSERT_EQ(rel.size(), 9u);
  for (std::size_t i = 0; i < rel.size(); ++i) {
    // a point fixed in the world, seen from frame i, lands on its frame i+1 coordinates
    const Vec3 world(3.0, -1.0, 20.0);
    const Vec3 in_i = inverse(traj[i]).apply(world), in_next = inverse(traj[i + 1]).apply(world);
    EXPECT_LE((rel[i].apply(in_i) - in_next).norm(), 1e-9);
  }
}

TEST(Report, WritesJsonAndCsv) {
  std::mt19937_64 rng(10);
  const auto gt = drive(rng);
  const auto rep = evaluate_trajectory(perturb(rng, gt, 0.01), gt);
  const auto dir = testing::temp_dir("metrics");
  write_report_json(dir / "report.json", rep);
  write_drift_csv(dir / "drift.csv", rep.drift);
  std::ifstream js(dir / "report.json");
  const auto j = nlohmann::json::parse(js);
  EXPECT_DOUBLE_EQ(j["ate_rmse_m"].get<double>(), rep.ate_rmse);
  EXPECT_DOUBLE_EQ(j["t_rel_percent"].get<double>(), rep.drift.t_rel);
  EXPECT_EQ(j["per_length"].size(), 8u);
  std::ifstream csv(dir / "drift.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 9);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace podom
