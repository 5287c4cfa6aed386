#pragma once

// Projective-geometry kernel: points, rigid poses, the pinhole camera, the
// cross-ratio, two-view triangulation and least-squares quadratic fitting.
//
// Conventions: pixel origin top-left, x right, y down. Camera frame x right,
// y down, z forward.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/QR>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "conepose/error.hpp"

namespace conepose {

using Point2 = Eigen::Vector2d;
using Point3 = Eigen::Vector3d;

/// Squared-distance floor below which a cross-ratio denominator is treated
/// as corrupt input.
inline constexpr double kCrossRatioEpsilon = 1e-12;

/// Rotation followed by translation, p' = R p + t.
struct RigidPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidPose identity() { return {}; }

  static RigidPose from_translation(const Eigen::Vector3d& t) {
    RigidPose pose;
    pose.translation = t;
    return pose;
  }

  Point3 apply(const Point3& p) const { return rotation * p + translation; }

  /// (*this) after `inner`: x -> this(inner(x)).
  RigidPose compose(const RigidPose& inner) const {
    RigidPose out;
    out.rotation = rotation * inner.rotation;
    out.translation = rotation * inner.translation + translation;
    return out;
  }

  RigidPose inverse() const {
    RigidPose out;
    out.rotation = rotation.transpose();
    out.translation = -(out.rotation * translation);
    return out;
  }

  bool is_valid(double tol = 1e-9) const {
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }

  /// Projects the rotation back onto SO(3); keeps long chains of compositions
  /// from drifting.
  void reorthonormalize() {
    Eigen::Quaterniond q(rotation);
    rotation = q.normalized().toRotationMatrix();
  }
};

inline Point3 transform(const RigidPose& pose, const Point3& p) { return pose.apply(p); }

/// Rotation matrix for an axis-angle vector (direction = axis, norm = angle).
inline Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& omega) {
  const double angle = omega.norm();
  if (angle < 1e-300) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, omega / angle).toRotationMatrix();
}

/// Rotation about the camera y axis (image-down); positive angle turns +z
/// towards +x.
inline Eigen::Matrix3d rotation_about_y(double angle) {
  return Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitY()).toRotationMatrix();
}

/// Pinhole intrinsics without distortion.
struct CameraModel {
  double fx = 600.0;
  double fy = 600.0;
  double cx = 800.0;
  double cy = 400.0;
  int width = 1600;
  int height = 800;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw Error(Errc::InvalidArgument, "focal lengths must be positive");
    if (width <= 0 || height <= 0) throw Error(Errc::InvalidArgument, "image dimensions must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      throw Error(Errc::InvalidArgument, "principal point outside the sensor");
  }

  /// Camera-frame point to pixel. The result may lie outside the sensor.
  Point2 project(const Point3& p) const {
    if (!(p.z() > 0.0)) throw Error(Errc::NonPositiveDepth, "point at z=" + std::to_string(p.z()));
    return {cx + fx * p.x() / p.z(), cy + fy * p.y() / p.z()};
  }

  /// Camera-frame point at depth `z` on the ray through `pixel`.
  Point3 backproject(const Point2& pixel, double z) const {
    return {(pixel.x() - cx) / fx * z, (pixel.y() - cy) / fy * z, z};
  }

  /// Unnormalized ray direction (z = 1) through `pixel`.
  Eigen::Vector3d ray(const Point2& pixel) const { return backproject(pixel, 1.0); }

  bool contains(const Point2& pixel) const {
    return pixel.x() >= 0.0 && pixel.x() < width && pixel.y() >= 0.0 && pixel.y() < height;
  }
};

inline Point2 project(const CameraModel& cam, const Point3& p) { return cam.project(p); }

/// (Δ13/Δ14)/(Δ23/Δ24) for four points in 2 or 3 dimensions.
template <int Dim>
double cross_ratio(const Eigen::Matrix<double, Dim, 1>& p1, const Eigen::Matrix<double, Dim, 1>& p2,
                   const Eigen::Matrix<double, Dim, 1>& p3, const Eigen::Matrix<double, Dim, 1>& p4) {
  static_assert(Dim == 2 || Dim == 3, "cross-ratio is defined here for 2D or 3D points");
  const double d14 = (p1 - p4).squaredNorm();
  const double d23 = (p2 - p3).squaredNorm();
  const double d24 = (p2 - p4).squaredNorm();
  if (d14 < kCrossRatioEpsilon || d23 < kCrossRatioEpsilon || d24 < kCrossRatioEpsilon)
    throw Error(Errc::DegenerateConfiguration, "coincident points in cross-ratio");
  const double d13 = (p1 - p3).norm();
  return (d13 / std::sqrt(d14)) / (std::sqrt(d23) / std::sqrt(d24));
}

/// Minimum angle between back-projected rays before triangulation gives up.
inline constexpr double kParallelRayAngle = 1e-8;

/// Midpoint of the common perpendicular between the two viewing rays,
/// expressed in the left camera frame. `left_to_right` maps left-frame points
/// into the right frame.
inline Point3 triangulate_two_view(const CameraModel& cam_left, const CameraModel& cam_right,
                                   const RigidPose& left_to_right, const Point2& uv_left,
                                   const Point2& uv_right) {
  const Eigen::Vector3d origin_l = Eigen::Vector3d::Zero();
  const Eigen::Vector3d dir_l = cam_left.ray(uv_left).normalized();
  const Eigen::Matrix3d rt = left_to_right.rotation.transpose();
  const Eigen::Vector3d origin_r = -(rt * left_to_right.translation);
  const Eigen::Vector3d dir_r = (rt * cam_right.ray(uv_right)).normalized();

  const double sin_angle = dir_l.cross(dir_r).norm();
  if (sin_angle < kParallelRayAngle) throw Error(Errc::ParallelRays, "viewing rays are parallel");

  // Solve for s, u minimizing |origin_l + s dir_l - origin_r - u dir_r|.
  const Eigen::Vector3d w0 = origin_l - origin_r;
  const double b = dir_l.dot(dir_r);
  const double d = dir_l.dot(w0);
  const double e = dir_r.dot(w0);
  const double denom = 1.0 - b * b;
  const double s = (b * e - d) / denom;
  const double u = (e - b * d) / denom;
  return 0.5 * ((origin_l + s * dir_l) + (origin_r + u * dir_r));
}

struct QuadraticFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  double operator()(double x) const { return (a * x + b) * x + c; }
};

/// Least-squares y = a x^2 + b x + c.
inline QuadraticFit fit_quadratic(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(Errc::InvalidArgument, "xs and ys differ in length");
  if (xs.size() < 3) throw Error(Errc::InsufficientPoints, "need at least 3 points");

  const auto n = static_cast<Eigen::Index>(xs.size());
  // Center and scale the abscissae so the Vandermonde system stays well
  // conditioned for data far from the origin.
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(n);
  double scale = 0.0;
  for (double x : xs) scale = std::max(scale, std::abs(x - mean));
  if (!(scale > 0.0)) throw Error(Errc::SingularSystem, "all abscissae coincide");

  Eigen::MatrixXd design(n, 3);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = (xs[static_cast<std::size_t>(i)] - mean) / scale;
    design(i, 0) = u * u;
    design(i, 1) = u;
    design(i, 2) = 1.0;
    rhs(i) = ys[static_cast<std::size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < 3) throw Error(Errc::SingularSystem, "fewer than 3 distinct abscissae");
  const Eigen::Vector3d coef = qr.solve(rhs);

  // Undo the substitution u = (x - mean) / scale.
  const double ka = coef(0) / (scale * scale);
  const double kb = coef(1) / scale;
  QuadraticFit fit;
  fit.a = ka;
  fit.b = kb - 2.0 * ka * mean;
  fit.c = ka * mean * mean - kb * mean + coef(2);
  return fit;
}

}  // namespace conepose
