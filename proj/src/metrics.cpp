#include "podom/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include <fmt/format.h>

#include "podom/errors.hpp"

namespace podom {

namespace {

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw MetricsError(std::string(what) + ": " + std::to_string(a) + " estimated vs " + std::to_string(b) +
                       " ground-truth poses");
  }
}

}  // namespace

double ate(std::span<const Pose> est, std::span<const Pose> gt) {
  require_same_length(est.size(), gt.size(), "ate");
  if (est.empty()) throw MetricsError("ate: empty trajectory");
  const Pose est0 = inverse(est.front()), gt0 = inverse(gt.front());
  double sum = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const Vec3 d = compose(est0, est[i]).translation - compose(gt0, gt[i]).translation;
    sum += d.squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(est.size()));
}

RelativeErrors relative_errors(std::span<const Pose> est_rel, std::span<const Pose> gt_rel) {
  require_same_length(est_rel.size(), gt_rel.size(), "relative_errors");
  RelativeErrors r;
  if (est_rel.empty()) return r;
  for (std::size_t i = 0; i < est_rel.size(); ++i) {
    const Pose e = compose(inverse(gt_rel[i]), est_rel[i]);
    r.mean_rte += e.translation.norm();
    r.mean_rre += rotation_angle_between(gt_rel[i].rotation, est_rel[i].rotation) * kRadToDeg;
  }
  r.mean_rte /= static_cast<double>(est_rel.size());
  r.mean_rre /= static_cast<double>(est_rel.size());
  return r;
}

std::vector<double> path_lengths(std::span<const Pose> poses) {
  std::vector<double> d(poses.size(), 0.0);
  for (std::size_t i = 1; i < poses.size(); ++i) {
    d[i] = d[i - 1] + (poses[i].translation - poses[i - 1].translation).norm();
  }
  return d;
}

Drift kitti_drift(std::span<const Pose> est, std::span<const Pose> gt, const DriftConfig& cfg) {
  require_same_length(est.size(), gt.size(), "kitti_drift");
  if (cfg.step < 1) throw ConfigError("kitti_drift: step must be >= 1");
  for (double l : cfg.lengths) {
    if (!(l > 0.0)) throw ConfigError("kitti_drift: segment lengths must be positive");
  }
  const std::vector<double> dist = path_lengths(gt);
  Drift out;
  for (double len : cfg.lengths) {
    LengthDrift row;
    row.length = len;
    for (std::size_t first = 0; first < gt.size(); first += static_cast<std::size_t>(cfg.step)) {
      std::size_t last = first;
      while (last < gt.size() && dist[last] < dist[first] + len) ++last;
      if (last >= gt.size()) break;  // later starts reach even less far
      const Pose dg = compose(inverse(gt[first]), gt[last]);
      const Pose de = compose(inverse(est[first]), est[last]);
      const Pose err = compose(inverse(de), dg);
      row.t_err += err.translation.norm() / len;
      row.r_err += rotation_angle_between(de.rotation, dg.rotation) / len;
      ++row.segments;
    }
    if (row.segments > 0) {
      row.t_err = 100.0 * row.t_err / row.segments;
      row.r_err = 100.0 * kRadToDeg * row.r_err / row.segments;
    }
    out.per_length.push_back(row);
  }
  int used = 0;
  for (const auto& row : out.per_length) {
    if (row.segments == 0) continue;
    out.t_rel += row.t_err;
    out.r_rel += row.r_err;
    ++used;
  }
  if (used > 0) {
    out.t_rel /= used;
    out.r_rel /= used;
    out.valid = true;
  }
  return out;
}

std::vector<Pose> consecutive_motions(std::span<const Pose> frame_to_world) {
  std::vector<Pose> rel;
  for (std::size_t i = 0; i + 1 < frame_to_world.size(); ++i) {
    rel.push_back(compose(inverse(frame_to_world[i + 1]), frame_to_world[i]));
  }
  return rel;
}

TrajectoryReport evaluate_trajectory(std::span<const Pose> est, std::span<const Pose> gt, const DriftConfig& cfg) {
  require_same_length(est.size(), gt.size(), "evaluate_trajectory");
  TrajectoryReport r;
  r.frames = static_cast<int>(est.size());
  r.ate_rmse = ate(est, gt);
  const auto e = consecutive_motions(est), g = consecutive_motions(gt);
  const auto rel = relative_errors(e, g);
  r.mean_rte = rel.mean_rte;
  r.mean_rre = rel.mean_rre;
  r.drift = kitti_drift(est, gt, cfg);
  return r;
}

nlohmann::json report_to_json(const TrajectoryReport& r) {
  nlohmann::json lengths = nlohmann::json::array();
  for (const auto& row : r.drift.per_length) {
    lengths.push_back({{"length_m", row.length},
                       {"segments", row.segments},
                       {"t_err_percent", row.t_err},
                       {"r_err_deg_per_100m", row.r_err}});
  }
  nlohmann::json j{{"frames", r.frames},
                   {"ate_rmse_m", r.ate_rmse},
                   {"mean_rte_m", r.mean_rte},
                   {"mean_rre_deg", r.mean_rre},
                   {"per_length", lengths}};
  j["t_rel_percent"] = r.drift.valid ? nlohmann::json(r.drift.t_rel) : nlohmann::json(nullptr);
  j["r_rel_deg_per_100m"] = r.drift.valid ? nlohmann::json(r.drift.r_rel) : nlohmann::json(nullptr);
  return j;
}

void write_report_json(const std::filesystem::path& path, const TrajectoryReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << report_to_json(r).dump(2) << '\n';
}

void write_drift_csv(const std::filesystem::path& path, const Drift& d) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "length_m,segments,t_err_percent,r_err_deg_per_100m\n";
  for (const auto& row : d.per_length) {
    out << fmt::format("{},{},{},{}\n", row.length, row.segments, row.t_err, row.r_err);
  }
}

}  // namespace podom
