#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>
#include <cmath>

#include "ipnet/errors.hpp"

namespace ipnet {

using Eigen::Matrix3d;
using Eigen::Matrix4d;
using Eigen::Vector3d;

inline Matrix3d skew(const Vector3d& v) {
  Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

// Axis-angle 3-vector, angle = norm, zero vector = identity rotation.
using RotationVector = Vector3d;

/// Unit quaternion in Hamilton convention, (w, x, y, z) ordering.
/// As q_w_b it rotates body-frame vectors into the world frame.
/// The norm is kept at 1: constructors and products renormalize as soon as
/// drift exceeds 1e-12.
class UnitQuaternion {
 public:
  UnitQuaternion() : w_(1), x_(0), y_(0), z_(0) {}

  UnitQuaternion(double w, double x, double y, double z) : w_(w), x_(x), y_(y), z_(z) {
    if (!std::isfinite(w) || !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
      throw NumericError("UnitQuaternion: non-finite component");
    }
    const double n2 = w_ * w_ + x_ * x_ + y_ * y_ + z_ * z_;
    if (n2 < 1e-24) {
      throw NumericError("UnitQuaternion: near-zero norm");
    }
    renormalize(n2);
  }

  static UnitQuaternion identity() { return UnitQuaternion(); }

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

  Vector3d vec() const { return {x_, y_, z_}; }

  double norm() const { return std::sqrt(w_ * w_ + x_ * x_ + y_ * y_ + z_ * z_); }

  UnitQuaternion conjugate() const {
    UnitQuaternion q;
    q.w_ = w_;
    q.x_ = -x_;
    q.y_ = -y_;
    q.z_ = -z_;
    return q;
  }

  UnitQuaternion inverse() const { return conjugate(); }

  Matrix3d rotation_matrix() const {
    Matrix3d r;
    const double ww = w_ * w_, xx = x_ * x_, yy = y_ * y_, zz = z_ * z_;
    r(0, 0) = ww + xx - yy - zz;
    r(0, 1) = 2 * (x_ * y_ - w_ * z_);
    r(0, 2) = 2 * (x_ * z_ + w_ * y_);
    r(1, 0) = 2 * (x_ * y_ + w_ * z_);
    r(1, 1) = ww - xx + yy - zz;
    r(1, 2) = 2 * (y_ * z_ - w_ * x_);
    r(2, 0) = 2 * (x_ * z_ - w_ * y_);
    r(2, 1) = 2 * (y_ * z_ + w_ * x_);
    r(2, 2) = ww - xx - yy + zz;
    return r;
  }

 private:
  void renormalize(double n2) {
    if (std::abs(n2 - 1.0) > 2e-12) {
      const double inv = 1.0 / std::sqrt(n2);
      w_ *= inv;
      x_ *= inv;
      y_ *= inv;
      z_ *= inv;
    }
  }

  friend UnitQuaternion quat_multiply(const UnitQuaternion&, const UnitQuaternion&);

  double w_, x_, y_, z_;
};

/// Hamilton product a ⊗ b.
inline UnitQuaternion quat_multiply(const UnitQuaternion& a, const UnitQuaternion& b) {
  UnitQuaternion q;
  q.w_ = a.w_ * b.w_ - a.x_ * b.x_ - a.y_ * b.y_ - a.z_ * b.z_;
  q.x_ = a.w_ * b.x_ + a.x_ * b.w_ + a.y_ * b.z_ - a.z_ * b.y_;
  q.y_ = a.w_ * b.y_ - a.x_ * b.z_ + a.y_ * b.w_ + a.z_ * b.x_;
  q.z_ = a.w_ * b.z_ + a.x_ * b.y_ - a.y_ * b.x_ + a.z_ * b.w_;
  q.renormalize(q.w_ * q.w_ + q.x_ * q.x_ + q.y_ * q.y_ + q.z_ * q.z_);
  return q;
}

inline UnitQuaternion operator*(const UnitQuaternion& a, const UnitQuaternion& b) {
  return quat_multiply(a, b);
}

/// SO(3) exponential map. Series expansion below ‖v‖ = 1e-8.
inline UnitQuaternion quat_from_rotvec(const RotationVector& v) {
  if (!v.allFinite()) {
    throw NumericError("quat_from_rotvec: non-finite input");
  }
  const double theta = v.norm();
  double w, k;  // q = (w, k*v)
  if (theta < 1e-8) {
    const double t2 = theta * theta;
    w = 1.0 - t2 / 8.0;
    k = 0.5 - t2 / 48.0;
  } else {
    w = std::cos(0.5 * theta);
    k = std::sin(0.5 * theta) / theta;
  }
  return UnitQuaternion(w, k * v.x(), k * v.y(), k * v.z());
}

/// Inverse of quat_from_rotvec on the angle range [0, π]. The sign is fixed
/// so w ≥ 0 before taking the log; identity maps to the zero vector.
inline RotationVector quat_log(const UnitQuaternion& q) {
  double w = q.w();
  Vector3d v = q.vec();
  if (w < 0) {
    w = -w;
    v = -v;
  }
  const double n = v.norm();
  if (n < 1e-12) {
    // First-order chart around identity: log ≈ 2 v / w.
    return 2.0 * v / w;
  }
  const double theta = 2.0 * std::atan2(n, w);
  return v * (theta / n);
}

/// R(q)·v without forming the rotation matrix.
inline Vector3d quat_rotate(const UnitQuaternion& q, const Vector3d& v) {
  const Vector3d u = q.vec();
  const Vector3d t = 2.0 * u.cross(v);
  return v + q.w() * t + u.cross(t);
}

/// Spherical-linear interpolation, shortest arc, u in [0, 1].
inline UnitQuaternion slerp(const UnitQuaternion& a, const UnitQuaternion& b, double u) {
  double dot = a.w() * b.w() + a.x() * b.x() + a.y() * b.y() + a.z() * b.z();
  double sign = 1.0;
  if (dot < 0) {
    dot = -dot;
    sign = -1.0;
  }
  double wa, wb;
  if (dot > 1.0 - 1e-10) {
    wa = 1.0 - u;
    wb = u;
  } else {
    const double theta = std::acos(std::min(dot, 1.0));
    const double s = std::sin(theta);
    wa = std::sin((1.0 - u) * theta) / s;
    wb = std::sin(u * theta) / s;
  }
  wb *= sign;
  return UnitQuaternion(wa * a.w() + wb * b.w(), wa * a.x() + wb * b.x(),
                        wa * a.y() + wb * b.y(), wa * a.z() + wb * b.z());
}

/// 4×4 left-multiplication matrix: quat_left(q)·p = q ⊗ p, (w,x,y,z) layout.
inline Matrix4d quat_left(const UnitQuaternion& q) {
  Matrix4d m;
  const Vector3d v = q.vec();
  m(0, 0) = q.w();
  m.block<1, 3>(0, 1) = -v.transpose();
  m.block<3, 1>(1, 0) = v;
  m.block<3, 3>(1, 1) = q.w() * Matrix3d::Identity() + skew(v);
  return m;
}

/// 4×4 right-multiplication matrix: quat_right(q)·p = p ⊗ q.
inline Matrix4d quat_right(const UnitQuaternion& q) {
  Matrix4d m;
  const Vector3d v = q.vec();
  m(0, 0) = q.w();
  m.block<1, 3>(0, 1) = -v.transpose();
  m.block<3, 1>(1, 0) = v;
  m.block<3, 3>(1, 1) = q.w() * Matrix3d::Identity() - skew(v);
  return m;
}

/// Right Jacobian of SO(3): exp(φ + δ) ≈ exp(φ) ⊗ exp(Jr(φ)·δ).
inline Matrix3d so3_right_jacobian(const Vector3d& phi) {
  const double theta = phi.norm();
  const Matrix3d px = skew(phi);
  if (theta < 1e-6) {
    return Matrix3d::Identity() - 0.5 * px + (1.0 / 6.0) * px * px;
  }
  const double t2 = theta * theta;
  return Matrix3d::Identity() - (1.0 - std::cos(theta)) / t2 * px +
         (theta - std::sin(theta)) / (t2 * theta) * px * px;
}

/// Inverse of the right Jacobian.
inline Matrix3d so3_right_jacobian_inv(const Vector3d& phi) {
  const double theta = phi.norm();
  const Matrix3d px = skew(phi);
  double c;
  if (theta < 1e-6) {
    c = 1.0 / 12.0 + theta * theta / 720.0;
  } else {
    c = 1.0 / (theta * theta) -
        (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Matrix3d::Identity() + 0.5 * px + c * px * px;
}

}  // namespace ipnet
