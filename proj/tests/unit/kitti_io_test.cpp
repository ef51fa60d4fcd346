#include "podom/kitti_io.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>

#include "unit/test_util.hpp"

namespace podom {
namespace {

namespace fs = std::filesystem;

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void append_f32(std::vector<unsigned char>& b, std::uint32_t bits) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

TEST(KittiIo, ReadScanFromHandAssembledBytes) {
  const auto dir = testing::temp_dir("scan");
  // 1.0f = 0x3F800000, -2.5f = 0xC0200000, 0.5f = 0x3F000000, 100.0f = 0x42C80000
  std::vector<unsigned char> b;
  for (std::uint32_t bits : {0x3F800000u, 0xC0200000u, 0x3F000000u, 0x00000000u,
                             0x42C80000u, 0x3F800000u, 0xC0200000u, 0x3F000000u}) {
    append_f32(b, bits);
  }
  ASSERT_EQ(b.size(), 32u);
  write_bytes(dir / "a.bin", b);
  const RawScan s = read_scan(dir / "a.bin");
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.points(0, 0), 1.0f);
  EXPECT_EQ(s.points(0, 1), -2.5f);
  EXPECT_EQ(s.points(0, 2), 0.5f);
  EXPECT_EQ(s.points(0, 3), 0.0f);
  EXPECT_EQ(s.points(1, 0), 100.0f);
  EXPECT_EQ(s.points(1, 3), 0.5f);
}

TEST(KittiIo, ReadScanErrors) {
  const auto dir = testing::temp_dir("scan_err");
  write_bytes(dir / "empty.bin", {});
  EXPECT_THROW(read_scan(dir / "empty.bin"), IoError);
  write_bytes(dir / "odd.bin", std::vector<unsigned char>(20, 0));
  EXPECT_THROW(read_scan(dir / "odd.bin"), IoError);
  EXPECT_THROW(read_scan(dir / "missing.bin"), IoError);
  std::vector<unsigned char> nan_bytes;
  append_f32(nan_bytes, 0x7FC00000u);
  for (int i = 0; i < 3; ++i) append_f32(nan_bytes, 0);
  write_bytes(dir / "nan.bin", nan_bytes);
  EXPECT_THROW(read_scan(dir / "nan.bin"), IoError);
}

TEST(KittiIo, ScanWriteReadRoundtrip) {
  const auto dir = testing::temp_dir("scan_rt");
  RawScan s;
  s.points.resize(100, 4);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-50, 50);
  for (Eigen::Index i = 0; i < s.points.size(); ++i) s.points.data()[i] = u(rng);
  write_scan(dir / "s.bin", s);
  EXPECT_EQ(read_scan(dir / "s.bin").points, s.points);
}

TEST(KittiIo, ReadPoses) {
  const auto dir = testing::temp_dir("poses");
  {
    std::ofstream out(dir / "p.txt");
    out << "1 0 0 0 0 1 0 0 0 0 1 0\n";
    out << "1 0 0 1 0 1 0 2 0 0 1 3\n";
  }
  const auto poses = read_poses(dir / "p.txt");
  ASSERT_EQ(poses.size(), 2u);
  EXPECT_LT(testing::max_abs_diff(poses[0].matrix(), Mat4::Identity()), 1e-15);
  EXPECT_EQ(poses[1].translation, Vec3(1, 2, 3));
  EXPECT_LT((poses[1].rotation - Mat3::Identity()).norm(), 1e-15);
}

TEST(KittiIo, ReadPosesMalformed) {
  const auto dir = testing::temp_dir("poses_bad");
  {
    std::ofstream out(dir / "short.txt");
    out << "1 0 0 0 0 1 0 0 0 0 1\n";
  }
  EXPECT_THROW(read_poses(dir / "short.txt"), IoError);
  {
    std::ofstream out(dir / "text.txt");
    out << "1 0 0 0 0 1 0 0 0 0 1 x\n";
  }
  EXPECT_THROW(read_poses(dir / "text.txt"), IoError);
}

TEST(KittiIo, PosesWriteReadRoundtrip) {
  const auto dir = testing::temp_dir("poses_rt");
  std::mt19937_64 rng(2);
  std::vector<Pose> poses;
  for (int i = 0; i < 20; ++i) poses.push_back(testing::random_pose(rng));
  write_poses(dir / "p.txt", poses);
  const auto back = read_poses(dir / "p.txt");
  ASSERT_EQ(back.size(), poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    EXPECT_LT(testing::max_abs_diff(back[i].matrix(), poses[i].matrix()), 1e-12);
  }
}

TEST(KittiIo, CalibAndLidarFramePose) {
  const auto dir = testing::temp_dir("calib");
  {
    std::ofstream out(dir / "calib.txt");
    out << "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n";
    out << "Tr: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
  }
  const Pose tr = read_calib(dir / "calib.txt");
  Mat3 expected;
  expected << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  EXPECT_LT((tr.rotation - expected).norm(), 1e-15);

  std::mt19937_64 rng(3);
  const Pose cam = testing::random_pose(rng);
  EXPECT_LT(testing::max_abs_diff(lidar_frame_pose(cam, Pose::identity()).matrix(), cam.matrix()), 1e-12);
  EXPECT_LT(testing::max_abs_diff(lidar_frame_pose(Pose::identity(), tr).matrix(), Mat4::Identity()), 1e-12);

  // pure-rotation calib, pure-translation pose: result is R^T t
  Pose trans;
  trans.translation = Vec3(0, 0, 2);  // camera forward
  const Pose lidar = lidar_frame_pose(trans, tr);
  const Vec3 oracle = (tr.matrix().inverse() * trans.matrix() * tr.matrix()).topRightCorner<3, 1>();
  EXPECT_LT((lidar.translation - oracle).norm(), 1e-12);
  EXPECT_LT((lidar.translation - Vec3(2, 0, 0)).norm(), 1e-12);  // lidar forward is +x
  EXPECT_LT((lidar.rotation - Mat3::Identity()).norm(), 1e-12);
}

TEST(KittiIo, RelativeLabelsSatisfyDuality) {
  std::mt19937_64 rng(4);
  std::vector<Pose> frame_to_world{Pose::identity()};
  for (int i = 0; i < 50; ++i) frame_to_world.push_back(compose(frame_to_world.back(), testing::random_pose(rng, 0.1, 2.0)));
  const auto rel = relative_labels(frame_to_world);
  ASSERT_EQ(rel.size(), 50u);
  const auto g = accumulate(rel);
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_LT(testing::max_abs_diff(inverse(g[i]).matrix(), frame_to_world[i].matrix()), 1e-6);
  }
  // label maps frame-i coordinates into frame-(i+1) coordinates
  const Vec3 world(3, -1, 2);
  const Vec3 in_i = inverse(frame_to_world[10]).apply(world);
  const Vec3 in_next = inverse(frame_to_world[11]).apply(world);
  EXPECT_LT((rel[10].apply(in_i) - in_next).norm(), 1e-9);
}

PointCloud random_cloud(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<float> u(-40, 40);
  PointCloud c;
  c.positions.resize(n, 3);
  c.is_ground.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < c.positions.size(); ++i) c.positions.data()[i] = u(rng);
  for (auto& f : c.is_ground) f = static_cast<std::uint8_t>(rng() % 2);
  return c;
}

FramePair random_pair(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> a(-0.2, 0.2), t(-2, 2);
  FramePair p;
  p.source = random_cloud(rng, 1 + static_cast<int>(rng() % 50));
  p.target = random_cloud(rng, 1 + static_cast<int>(rng() % 50));
  p.label = {a(rng), a(rng), a(rng), t(rng), t(rng), t(rng)};
  p.weight = static_cast<std::uint16_t>(1 + rng() % 1000);
  return p;
}

void expect_same(const FramePair& a, const FramePair& b) {
  EXPECT_EQ(a.source.positions, b.source.positions);
  EXPECT_EQ(a.source.is_ground, b.source.is_ground);
  EXPECT_EQ(a.target.positions, b.target.positions);
  EXPECT_EQ(a.target.is_ground, b.target.is_ground);
  EXPECT_EQ(a.label.as_array(), b.label.as_array());
  EXPECT_EQ(a.weight, b.weight);
}

TEST(KittiIo, PairCacheRoundtrip) {
  const auto dir = testing::temp_dir("cache");
  write_pair_cache(dir / "empty.podm", {});
  EXPECT_TRUE(read_pair_cache(dir / "empty.podm").empty());

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<FramePair> pairs;
    const int n = static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) pairs.push_back(random_pair(rng));
    write_pair_cache(dir / "c.podm", pairs);
    const auto back = read_pair_cache(dir / "c.podm");
    ASSERT_EQ(back.size(), pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) expect_same(pairs[i], back[i]);
  }
}

TEST(KittiIo, PairCacheLayoutIsBitExact) {
  const auto dir = testing::temp_dir("cache_layout");
  FramePair p;
  p.source.positions.resize(1, 3);
  p.source.positions << 1.0f, 2.0f, 3.0f;
  p.source.is_ground = {1};
  p.target.positions.resize(0, 3);
  p.label = {0, 0, 0, 1.0, 0, 0};
  p.weight = 7;
  write_pair_cache(dir / "one.podm", {p});
  std::ifstream in(dir / "one.podm", std::ios::binary);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // 4 magic + 4 version + 4 count + (4 + 12 + 1) + 4 + 48 + 2
  ASSERT_EQ(b.size(), 83u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "PODM");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[12], 1);      // source count
  EXPECT_EQ(b[16 + 3], 0x3F);  // 1.0f high byte
  EXPECT_EQ(b[28], 1);      // ground flag
  EXPECT_EQ(b[29], 0);      // target count
  EXPECT_EQ(b[81], 7);      // weight low byte
}

TEST(KittiIo, PairCacheRejectsCorruption) {
  const auto dir = testing::temp_dir("cache_bad");
  std::mt19937_64 rng(6);
  write_pair_cache(dir / "c.podm", {random_pair(rng)});
  std::vector<unsigned char> bytes;
  {
    std::ifstream in(dir / "c.podm", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto magic = bytes;
  magic[0] = 'X';
  write_bytes(dir / "magic.podm", magic);
  EXPECT_THROW(read_pair_cache(dir / "magic.podm"), IoError);

  auto version = bytes;
  version[4] = 9;
  write_bytes(dir / "version.podm", version);
  EXPECT_THROW(read_pair_cache(dir / "version.podm"), IoError);

  auto more = bytes;
  more[8] = 2;  // claims two records, stores one
  write_bytes(dir / "count_hi.podm", more);
  EXPECT_THROW(read_pair_cache(dir / "count_hi.podm"), IoError);

  auto fewer = bytes;
  fewer[8] = 0;  // claims zero records, stores one
  write_bytes(dir / "count_lo.podm", fewer);
  EXPECT_THROW(read_pair_cache(dir / "count_lo.podm"), IoError);
}

TEST(KittiIo, RealKittiSequenceWhenAvailable) {
  const char* root = std::getenv("PODOM_KITTI_ROOT");
  if (root == nullptr) GTEST_SKIP() << "PODOM_KITTI_ROOT not set";
  const auto poses = read_poses(fs::path(root) / "poses" / "00.txt");
  ASSERT_FALSE(poses.empty());
  EXPECT_LT(testing::max_abs_diff(poses[0].matrix(), Mat4::Identity()), 1e-6);
  const auto scan = read_scan(fs::path(root) / "sequences" / "00" / "velodyne" / "000000.bin");
  EXPECT_GE(scan.size(), 100000u);
  EXPECT_LE(scan.size(), 130000u);
}

}  // namespace
}  // namespace podom
