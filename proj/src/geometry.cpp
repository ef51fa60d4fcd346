#include "podom/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/SVD>

namespace podom {

Pose Pose::from_matrix(const Mat4& m) {
  Pose p;
  p.rotation = m.topLeftCorner<3, 3>();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

bool is_valid_rotation(const Mat3& r, double tol) {
  if (!r.allFinite()) return false;
  const double ortho = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

void validate_pose(const Pose& p, double tol) {
  if (!is_valid_rotation(p.rotation, tol)) {
    throw InvalidPoseError("pose rotation is not orthonormal with det +1");
  }
  if (!p.translation.allFinite()) {
    throw InvalidPoseError("pose translation is not finite");
  }
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

Pose inverse(const Pose& p) {
  Pose out;
  out.rotation = p.rotation.transpose();
  out.translation = -(out.rotation * p.translation);
  return out;
}

Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

Pose orthonormalize(const Pose& p) {
  return {nearest_rotation(p.rotation), p.translation};
}

Pose relative_transform(const Pose& g_prev, const Pose& g_next) {
  validate_pose(g_prev);
  validate_pose(g_next);
  return compose(g_next, inverse(g_prev));
}

void PoseAccumulator::push(const Pose& rel) {
  current_ = compose(rel, current_);
  if (++count_ % kReorthoInterval == 0) current_ = orthonormalize(current_);
}

std::vector<Pose> accumulate(std::span<const Pose> rel) {
  std::vector<Pose> out;
  out.reserve(rel.size() + 1);
  PoseAccumulator acc;
  out.push_back(acc.current());
  for (const Pose& r : rel) {
    acc.push(r);
    out.push_back(acc.current());
  }
  return out;
}

double rotation_angle(const Mat3& r) {
  // same angle as acos((trace - 1) / 2), without its loss of precision near 0
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0));
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  const double s = (a - b).norm() / (2.0 * std::numbers::sqrt2);
  return 2.0 * std::asin(std::min(1.0, s));
}

Mat3 euler_to_rotation(double pitch, double yaw, double roll) {
  const Mat3 rx = Eigen::AngleAxisd(pitch, Vec3::UnitX()).toRotationMatrix();
  const Mat3 ry = Eigen::AngleAxisd(yaw, Vec3::UnitY()).toRotationMatrix();
  const Mat3 rz = Eigen::AngleAxisd(roll, Vec3::UnitZ()).toRotationMatrix();
  return rz * ry * rx;
}

Pose euler_to_pose(const EulerPose& e) {
  return {euler_to_rotation(e.pitch, e.yaw, e.roll), Vec3(e.tx, e.ty, e.tz)};
}

EulerPose pose_to_euler(const Pose& p) {
  validate_pose(p);
  const Mat3& r = p.rotation;
  // R = Rz(g) Ry(b) Rx(a): R20 = -sin b, R21 = cos b sin a, R22 = cos b cos a,
  // R10 = sin g cos b, R00 = cos g cos b.
  const double cos_yaw = std::hypot(r(0, 0), r(1, 0));
  const double yaw = std::atan2(-r(2, 0), cos_yaw);
  if (std::abs(yaw) >= std::numbers::pi / 2 - kGimbalMargin) {
    throw DegenerateAngleError("yaw too close to +-pi/2 for a unique Euler decomposition");
  }
  EulerPose e;
  e.yaw = yaw;
  e.pitch = std::atan2(r(2, 1), r(2, 2));
  e.roll = std::atan2(r(1, 0), r(0, 0));
  e.tx = p.translation.x();
  e.ty = p.translation.y();
  e.tz = p.translation.z();
  return e;
}

void LabelNormalizer::validate() const {
  for (std::size_t i = 0; i < 6; ++i) {
    if (!std::isfinite(mean[i]) || !std::isfinite(scale[i]) || scale[i] <= 0.0) {
      throw InvalidStatsError("label normalizer component " + std::to_string(i) +
                              " has a non-positive or non-finite scale");
    }
  }
}

std::array<double, 6> LabelNormalizer::normalize(const EulerPose& e) const {
  validate();
  const auto v = e.as_array();
  std::array<double, 6> out{};
  for (std::size_t i = 0; i < 6; ++i) out[i] = (v[i] - mean[i]) / scale[i];
  return out;
}

EulerPose LabelNormalizer::denormalize(const std::array<double, 6>& v) const {
  validate();
  std::array<double, 6> out{};
  for (std::size_t i = 0; i < 6; ++i) out[i] = v[i] * scale[i] + mean[i];
  return EulerPose::from_array(out);
}

LabelNormalizer LabelNormalizer::fit(std::span<const EulerPose> labels) {
  if (labels.empty()) throw InvalidStatsError("cannot fit a normalizer on zero labels");
  LabelNormalizer n;
  const double count = static_cast<double>(labels.size());
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (const auto& l : labels) sum += l.as_array()[i];
    const double mean = sum / count;
    double sq = 0.0;
    for (const auto& l : labels) {
      const double d = l.as_array()[i] - mean;
      sq += d * d;
    }
    const double sd = std::sqrt(sq / count);
    n.mean[i] = mean;
    n.scale[i] = sd > 0.0 ? sd : 1.0;
  }
  return n;
}

}  // namespace podom
