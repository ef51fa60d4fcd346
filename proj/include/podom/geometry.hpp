#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "podom/errors.hpp"

namespace podom {

using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;

/// Tolerance used to reject inputs that are not rotations at all. KITTI pose
/// files carry ~7 significant digits, so this is looser than the 1e-9 the
/// algebra itself preserves.
inline constexpr double kRotationCheckTol = 1e-6;

/// Rigid transform x' = R x + t.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose from_matrix(const Mat4& m);
  Mat4 matrix() const;

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

bool is_valid_rotation(const Mat3& r, double tol = kRotationCheckTol);
/// Throws InvalidPoseError when the rotation block is not in SO(3).
void validate_pose(const Pose& p, double tol = kRotationCheckTol);

/// a * b in homogeneous-matrix semantics.
Pose compose(const Pose& a, const Pose& b);
Pose inverse(const Pose& p);

/// Projects the rotation block onto SO(3) (polar decomposition via SVD).
Pose orthonormalize(const Pose& p);
Mat3 nearest_rotation(const Mat3& m);

/// T with T * g_prev = g_next, i.e. g_next * g_prev^-1. Both arguments are
/// maps from the first frame's coordinates into frame i's coordinates.
Pose relative_transform(const Pose& g_prev, const Pose& g_next);

/// Chains relative poses: out[0] = I, out[i + 1] = rel[i] * out[i].
/// Rotations are re-projected onto SO(3) every kReorthoInterval compositions.
std::vector<Pose> accumulate(std::span<const Pose> rel);

/// Running composition with the same re-orthonormalization policy as
/// accumulate().
class PoseAccumulator {
 public:
  static constexpr std::size_t kReorthoInterval = 100;

  void push(const Pose& rel);
  const Pose& current() const { return current_; }
  std::size_t count() const { return count_; }

 private:
  Pose current_;
  std::size_t count_ = 0;
};

/// Rotation angle of a rotation matrix, radians, in [0, pi].
double rotation_angle(const Mat3& r);

/// Angle of a^T * b from the chord |a - b|_F = 2 sqrt(2) sin(angle / 2).
/// Exactly zero for equal inputs.
double rotation_angle_between(const Mat3& a, const Mat3& b);

/// Euler parameterization. Rotation is R = Rz(roll) * Ry(yaw) * Rx(pitch),
/// which in the KITTI camera frame (x right, y down, z forward) puts yaw about
/// the vertical axis. Yaw is the middle angle and the one that can hit gimbal
/// lock.
struct EulerPose {
  double pitch = 0.0;  // alpha, about x
  double yaw = 0.0;    // beta, about y
  double roll = 0.0;   // gamma, about z
  double tx = 0.0;
  double ty = 0.0;
  double tz = 0.0;

  /// (pitch, yaw, roll, tx, ty, tz)
  std::array<double, 6> as_array() const { return {pitch, yaw, roll, tx, ty, tz}; }
  static EulerPose from_array(const std::array<double, 6>& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }
  Vec3 rotation_part() const { return {pitch, yaw, roll}; }
  Vec3 translation_part() const { return {tx, ty, tz}; }
};

/// Minimum distance of the middle angle from +-pi/2 accepted by pose_to_euler.
inline constexpr double kGimbalMargin = 1e-6;

Mat3 euler_to_rotation(double pitch, double yaw, double roll);
Pose euler_to_pose(const EulerPose& e);
/// Throws DegenerateAngleError when |yaw| >= pi/2 - kGimbalMargin.
EulerPose pose_to_euler(const Pose& p);

/// Per-component affine normalization of the six label values.
struct LabelNormalizer {
  std::array<double, 6> mean{0, 0, 0, 0, 0, 0};
  std::array<double, 6> scale{1, 1, 1, 1, 1, 1};

  /// Throws InvalidStatsError unless every scale is finite and > 0.
  void validate() const;
  std::array<double, 6> normalize(const EulerPose& e) const;
  EulerPose denormalize(const std::array<double, 6>& v) const;

  /// Z-score statistics (population std). Components with zero spread get
  /// scale 1 so the map stays invertible.
  static LabelNormalizer fit(std::span<const EulerPose> labels);
};

}  // namespace podom
