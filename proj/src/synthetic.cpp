#include "podom/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "podom/errors.hpp"

namespace podom {

Pose kitti_like_calib() {
  Pose p;
  p.rotation << 0, -1, 0,
                0, 0, -1,
                1, 0, 0;
  p.translation = Vec3(-0.004, -0.076, -0.272);
  return p;
}

namespace {

Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }
Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }

std::vector<Pose> make_trajectory(const SyntheticConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Pose> world(static_cast<std::size_t>(cfg.n_frames));
  double x = 0, y = 0, heading = 0;
  double speed = 0.5 * (cfg.speed_min + cfg.speed_max), yaw_rate = 0;
  const double phase = u(rng) * 3.0;
  for (int i = 0; i < cfg.n_frames; ++i) {
    const double pitch = 0.004 * std::sin(0.3 * i + phase);
    const double roll = 0.003 * std::cos(0.23 * i + 2 * phase);
    Pose& p = world[static_cast<std::size_t>(i)];
    p.rotation = rot_z(heading) * rot_y(pitch) * rot_x(roll);
    p.translation = Vec3(x, y, cfg.sensor_height);
    speed = std::clamp(speed + 0.15 * u(rng), cfg.speed_min, cfg.speed_max);
    // occasional sharp turns give the label distribution a tail
    const double target = (rng() % 12 == 0) ? cfg.yaw_rate_max * u(rng) : 0.2 * cfg.yaw_rate_max * u(rng);
    yaw_rate = std::clamp(0.5 * yaw_rate + 0.5 * target, -cfg.yaw_rate_max, cfg.yaw_rate_max);
    x += speed * std::cos(heading);
    y += speed * std::sin(heading);
    heading += yaw_rate;
  }
  return world;
}

std::vector<Vec3> make_world(const SyntheticConfig& cfg, const std::vector<Pose>& path, std::mt19937_64& rng) {
  double x0 = 1e18, x1 = -1e18, y0 = 1e18, y1 = -1e18;
  for (const auto& p : path) {
    x0 = std::min(x0, p.translation.x());
    x1 = std::max(x1, p.translation.x());
    y0 = std::min(y0, p.translation.y());
    y1 = std::max(y1, p.translation.y());
  }
  const double m = cfg.scan_range * 1.5;
  x0 -= m, x1 += m, y0 -= m, y1 += m;
  std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1), u01(0.0, 1.0);
  std::vector<Vec3> pts;
  const auto n_ground = static_cast<std::size_t>(cfg.world_density * (x1 - x0) * (y1 - y0));
  pts.reserve(n_ground * 2);
  for (std::size_t i = 0; i < n_ground; ++i) pts.emplace_back(ux(rng), uy(rng), 0.0);

  const double area = (x1 - x0) * (y1 - y0);
  const int n_objects = static_cast<int>(cfg.n_objects * area / (240.0 * 240.0)) + 1;
  std::uniform_real_distribution<double> size(0.4, 6.0), height(0.5, 7.0), ang(0, 2 * std::numbers::pi);
  for (int k = 0; k < n_objects; ++k) {
    const Vec3 c(ux(rng), uy(rng), 0.0);
    bool on_road = false;
    for (const auto& p : path) {
      if (std::hypot(p.translation.x() - c.x(), p.translation.y() - c.y()) < 6.0) {
        on_road = true;
        break;
      }
    }
    if (on_road) continue;
    const double w = size(rng), l = size(rng), h = height(rng), a = ang(rng);
    const Mat3 r = rot_z(a);
    const double surface = 2 * (w + l) * h + w * l;
    const auto n = static_cast<int>(surface * cfg.world_density * 2.0);
    for (int i = 0; i < n; ++i) {
      // pick a face proportionally to its area
      double s = u01(rng) * surface;
      Vec3 local;
      const double z = u01(rng) * h;
      if ((s -= w * l) < 0) {
        local = Vec3((u01(rng) - 0.5) * w, (u01(rng) - 0.5) * l, h);
      } else if ((s -= 2 * w * h) < 0) {
        local = Vec3((u01(rng) - 0.5) * w, (u01(rng) < 0.5 ? -0.5 : 0.5) * l, z);
      } else {
        local = Vec3((u01(rng) < 0.5 ? -0.5 : 0.5) * w, (u01(rng) - 0.5) * l, z);
      }
      pts.push_back(c + r * local);
    }
  }
  return pts;
}

}  // namespace

SyntheticSequence make_synthetic_sequence(const SyntheticConfig& cfg) {
  if (cfg.n_frames < 2) throw ConfigError("synthetic: need at least 2 frames");
  if (cfg.points_per_scan <= 0) throw ConfigError("synthetic: points_per_scan must be positive");
  if (!(cfg.speed_min > 0.0 && cfg.speed_max >= cfg.speed_min)) throw ConfigError("synthetic: bad speed range");
  std::mt19937_64 rng(cfg.seed);
  const std::vector<Pose> path = make_trajectory(cfg, rng);
  const std::vector<Vec3> world = make_world(cfg, path, rng);

  SyntheticSequence out;
  out.calib = kitti_like_calib();
  const Pose anchor_inv = inverse(path.front());
  for (int i = 0; i < cfg.n_frames; ++i) {
    const Pose& pose = path[static_cast<std::size_t>(i)];
    out.lidar_poses.push_back(compose(anchor_inv, pose));
    const Pose to_local = inverse(pose);
    std::vector<Vec3> visible;
    for (const auto& w : world) {
      const Vec3 q = to_local.apply(w);
      if (std::abs(q.x()) <= cfg.scan_range && std::abs(q.y()) <= cfg.scan_range) visible.push_back(q);
    }
    std::mt19937_64 frng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(i));
    const std::size_t n = std::min(visible.size(), static_cast<std::size_t>(cfg.points_per_scan));
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, visible.size() - 1);
      std::swap(visible[k], visible[pick(frng)]);
    }
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    std::uniform_real_distribution<float> refl(0.0f, 1.0f);
    RawScan scan;
    scan.frame_index = i;
    scan.points.resize(static_cast<Eigen::Index>(n), 4);
    for (std::size_t k = 0; k < n; ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      for (int d = 0; d < 3; ++d) scan.points(r, d) = static_cast<float>(visible[k][d] + noise(frng));
      scan.points(r, 3) = refl(frng);
    }
    out.scans.push_back(std::move(scan));
  }
  return out;
}

void write_synthetic_sequence(const std::filesystem::path& root, const std::string& seq,
                              const SyntheticSequence& data) {
  namespace fs = std::filesystem;
  const fs::path seq_dir = root / "sequences" / seq;
  fs::create_directories(seq_dir / "velodyne");
  fs::create_directories(root / "poses");
  for (std::size_t i = 0; i < data.scans.size(); ++i) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i << ".bin";
    write_scan(seq_dir / "velodyne" / name.str(), data.scans[i]);
  }
  write_calib(seq_dir / "calib.txt", data.calib);
  const Pose calib_inv = inverse(data.calib);
  std::vector<Pose> cam;
  cam.reserve(data.lidar_poses.size());
  for (const auto& p : data.lidar_poses) cam.push_back(compose(compose(data.calib, p), calib_inv));
  write_poses(root / "poses" / (seq + ".txt"), cam);
}

}  // namespace podom
