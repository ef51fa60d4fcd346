#include "podom/kitti_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "binary_io.hpp"

namespace podom {

namespace fs = std::filesystem;

RawScan read_scan(const fs::path& path, int frame_index) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw IoError("cannot stat scan file: " + path.string());
  if (bytes == 0) throw IoError("empty scan file: " + path.string());
  if (bytes % 16 != 0) {
    throw IoError("scan file length " + std::to_string(bytes) +
                  " is not a multiple of 16 bytes: " + path.string());
  }
  const auto n = static_cast<Eigen::Index>(bytes / 16);
  RawScan scan;
  scan.frame_index = frame_index;
  scan.points.resize(n, 4);
  detail::BinaryReader in(path);
  in.get_bytes(scan.points.data(), static_cast<std::size_t>(bytes));
  if constexpr (std::endian::native == std::endian::big) {
    for (Eigen::Index i = 0; i < scan.points.size(); ++i) {
      scan.points.data()[i] = detail::to_little(scan.points.data()[i]);
    }
  }
  if (!scan.points.allFinite()) throw IoError("non-finite coordinate in " + path.string());
  return scan;
}

void write_scan(const fs::path& path, const RawScan& scan) {
  detail::BinaryWriter out(path);
  for (Eigen::Index i = 0; i < scan.points.size(); ++i) out.put(scan.points.data()[i]);
  out.finish();
}

namespace {

Pose parse_pose_row(const std::vector<double>& v) {
  Pose p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = v[static_cast<std::size_t>(r * 4 + c)];
    p.translation[r] = v[static_cast<std::size_t>(r * 4 + 3)];
  }
  if (!p.rotation.allFinite() || !p.translation.allFinite()) {
    throw IoError("non-finite pose entry");
  }
  if (!is_valid_rotation(p.rotation, 1e-3)) throw IoError("pose rotation block is not a rotation");
  return orthonormalize(p);
}

std::string format_pose_row(const Pose& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << p.rotation(r, c) << ' ';
    os << p.translation[r];
    if (r < 2) os << ' ';
  }
  return os.str();
}

}  // namespace

std::vector<Pose> read_poses(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pose file: " + path.string());
  std::vector<Pose> poses;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::vector<double> v;
    double x;
    while (ls >> x) v.push_back(x);
    if (!ls.eof() || v.size() != 12) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": expected 12 numbers per line");
    }
    poses.push_back(parse_pose_row(v));
  }
  return poses;
}

void write_poses(const fs::path& path, const std::vector<Pose>& poses) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& p : poses) out << format_pose_row(p) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Pose read_calib(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open calibration file: " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("Tr:", 0) != 0) continue;
    std::istringstream ls(line.substr(3));
    std::vector<double> v;
    double x;
    while (ls >> x) v.push_back(x);
    if (v.size() != 12) throw IoError("Tr: entry must hold 12 numbers in " + path.string());
    return parse_pose_row(v);
  }
  throw IoError("no Tr: entry in " + path.string());
}

void write_calib(const fs::path& path, const Pose& tr) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "Tr: " << format_pose_row(tr) << '\n';
}

Pose lidar_frame_pose(const Pose& cam_pose, const Pose& calib) {
  return compose(inverse(calib), compose(cam_pose, calib));
}

std::vector<Pose> SequenceData::lidar_poses(bool use_calibration) const {
  if (!use_calibration) return global_poses;
  std::vector<Pose> out;
  out.reserve(global_poses.size());
  for (const auto& p : global_poses) out.push_back(lidar_frame_pose(p, calib));
  return out;
}

SequenceData load_sequence(const fs::path& root, const std::string& seq) {
  SequenceData data;
  data.name = seq;
  const fs::path seq_dir = root / "sequences" / seq;
  const fs::path velo_dir = seq_dir / "velodyne";
  if (!fs::is_directory(velo_dir)) throw IoError("missing directory: " + velo_dir.string());
  for (const auto& entry : fs::directory_iterator(velo_dir)) {
    if (entry.path().extension() == ".bin") data.scan_paths.push_back(entry.path());
  }
  std::sort(data.scan_paths.begin(), data.scan_paths.end());
  data.global_poses = read_poses(root / "poses" / (seq + ".txt"));
  data.calib = read_calib(seq_dir / "calib.txt");
  if (data.scan_paths.size() != data.global_poses.size()) {
    throw IoError("sequence " + seq + ": " + std::to_string(data.scan_paths.size()) +
                  " scans but " + std::to_string(data.global_poses.size()) + " poses");
  }
  return data;
}

std::vector<Pose> relative_labels(const std::vector<Pose>& frame_to_world) {
  std::vector<Pose> out;
  if (frame_to_world.size() < 2) return out;
  out.reserve(frame_to_world.size() - 1);
  for (std::size_t i = 0; i + 1 < frame_to_world.size(); ++i) {
    out.push_back(relative_transform(inverse(frame_to_world[i]), inverse(frame_to_world[i + 1])));
  }
  return out;
}

namespace {

void write_block(detail::BinaryWriter& out, const PointCloud& c) {
  if (c.is_ground.size() != c.size()) throw IoError("ground flag count mismatch");
  out.put(static_cast<std::uint32_t>(c.size()));
  for (Eigen::Index i = 0; i < c.positions.size(); ++i) out.put(c.positions.data()[i]);
  out.put_bytes(c.is_ground.data(), c.is_ground.size());
}

PointCloud read_block(detail::BinaryReader& in) {
  PointCloud c;
  const auto n = in.get<std::uint32_t>();
  c.positions.resize(n, 3);
  for (Eigen::Index i = 0; i < c.positions.size(); ++i) c.positions.data()[i] = in.get<float>();
  c.is_ground.resize(n);
  in.get_bytes(c.is_ground.data(), n);
  for (auto f : c.is_ground) {
    if (f > 1) throw IoError("corrupt ground flag in " + in.path().string());
  }
  return c;
}

}  // namespace

void write_pair_cache(const fs::path& path, const std::vector<FramePair>& pairs) {
  detail::BinaryWriter out(path);
  out.put_bytes(kPairCacheMagic, 4);
  out.put(kPairCacheVersion);
  out.put(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& p : pairs) {
    for (double v : p.label.as_array()) {
      if (!std::isfinite(v)) throw IoError("refusing to cache a non-finite label");
    }
    write_block(out, p.source);
    write_block(out, p.target);
    for (double v : p.label.as_array()) out.put(v);
    out.put(p.weight);
  }
  out.finish();
}

std::vector<FramePair> read_pair_cache(const fs::path& path) {
  detail::BinaryReader in(path);
  char magic[4];
  in.get_bytes(magic, 4);
  if (std::memcmp(magic, kPairCacheMagic, 4) != 0) {
    throw IoError("bad pair-cache magic in " + path.string());
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kPairCacheVersion) {
    throw IoError("unsupported pair-cache version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  std::vector<FramePair> pairs;
  pairs.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    FramePair p;
    p.source = read_block(in);
    p.target = read_block(in);
    std::array<double, 6> label{};
    for (auto& v : label) v = in.get<double>();
    p.label = EulerPose::from_array(label);
    p.weight = in.get<std::uint16_t>();
    pairs.push_back(std::move(p));
  }
  if (!in.at_end()) throw IoError("pair-cache record count mismatch (trailing data) in " + path.string());
  return pairs;
}

}  // namespace podom
