#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

namespace skelsplat {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

// Row-major N x 3 point array; rows are points.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using MatX = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecX = Eigen::VectorXd;

inline constexpr double kPi = 3.14159265358979323846;

/// Rigid transform x -> R x + t.
struct Rigid {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
  Rigid compose(const Rigid& inner) const {  // this ∘ inner
    return {rotation * inner.rotation, rotation * inner.translation + translation};
  }
  Rigid inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }
  static Rigid identity() { return {}; }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline bool is_unit(const Quat& q, double tol = 1e-6) { return std::abs(q.norm() - 1.0) <= tol; }

/// Quaternion stored as (w, x, y, z) in a Vec4 (the Gaussian attribute layout).
inline Quat to_quat(const Vec4& wxyz) { return Quat(wxyz[0], wxyz[1], wxyz[2], wxyz[3]); }
inline Vec4 to_wxyz(const Quat& q) { return Vec4(q.w(), q.x(), q.y(), q.z()); }

/// Rotation matrix of a (not necessarily normalized) quaternion after normalization.
inline Mat3 rotation_of(const Vec4& wxyz) { return to_quat(wxyz).normalized().toRotationMatrix(); }

/// Left-multiplication matrix: (a ⊗ b) = left_mul(a) * b in wxyz layout.
inline Eigen::Matrix4d left_mul(const Vec4& a) {
  const double w = a[0], x = a[1], y = a[2], z = a[3];
  Eigen::Matrix4d m;
  m << w, -x, -y, -z,
       x,  w, -z,  y,
       y,  z,  w, -x,
       z, -y,  x,  w;
  return m;
}

/// Right-multiplication matrix: (a ⊗ b) = right_mul(b) * a.
inline Eigen::Matrix4d right_mul(const Vec4& b) {
  const double w = b[0], x = b[1], y = b[2], z = b[3];
  Eigen::Matrix4d m;
  m << w, -x, -y, -z,
       x,  w,  z, -y,
       y, -z,  w,  x,
       z,  y, -x,  w;
  return m;
}

inline Vec4 quat_mul(const Vec4& a, const Vec4& b) { return left_mul(a) * b; }

/// Exponential map of a rotation vector to a unit quaternion (wxyz).
inline Vec4 quat_exp(const Vec3& v) {
  const double theta = v.norm();
  double s;  // sin(theta/2)/theta
  if (theta < 1e-6) {
    s = 0.5 - theta * theta / 48.0;
  } else {
    s = std::sin(0.5 * theta) / theta;
  }
  return Vec4(std::cos(0.5 * theta), s * v[0], s * v[1], s * v[2]);
}

/// Jacobian d quat_exp(v) / d v, 4 x 3.
inline Eigen::Matrix<double, 4, 3> quat_exp_jacobian(const Vec3& v) {
  const double theta = v.norm();
  double s, ds_over_theta;
  if (theta < 1e-4) {
    s = 0.5 - theta * theta / 48.0;
    ds_over_theta = -1.0 / 24.0 + theta * theta / 960.0;
  } else {
    s = std::sin(0.5 * theta) / theta;
    ds_over_theta = (0.5 * theta * std::cos(0.5 * theta) - std::sin(0.5 * theta)) /
                    (theta * theta * theta);
  }
  Eigen::Matrix<double, 4, 3> j;
  j.row(0) = -0.5 * s * v.transpose();
  j.bottomRows<3>() = s * Mat3::Identity() + ds_over_theta * v * v.transpose();
  return j;
}

/// Axis-angle vector of a unit quaternion (log map).
inline Vec3 quat_log(const Quat& q_in) {
  Quat q = q_in.w() < 0 ? Quat(-q_in.w(), -q_in.x(), -q_in.y(), -q_in.z()) : q_in;
  Eigen::AngleAxisd aa(q);
  return aa.angle() * aa.axis();
}

/// Nearest rotation (orthogonal polar factor with det +1) of a 3x3 matrix.
inline Mat3 polar_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  Mat3 r = u * v.transpose();
  if (r.determinant() < 0) {
    u.col(2) *= -1.0;
    r = u * v.transpose();
  }
  return r;
}

}  // namespace skelsplat
