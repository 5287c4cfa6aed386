#pragma once

// Parametric traffic cone and its 7 canonical keypoints.
//
// Keypoint order: apex, left upper stripe, left lower stripe, left base,
// right upper stripe, right lower stripe, right base. The model frame sits
// at the base center with y up the cone axis; all keypoints lie in z = 0.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "conepose/error.hpp"
#include "conepose/geometry.hpp"

namespace conepose {

inline constexpr int kNumKeypoints = 7;

/// Cross-ratio of each cone arm measured on the physical cone.
inline constexpr double kReferenceCrossRatio = 1.3940842428872968;

enum class ColorClass : std::uint8_t { blue = 0, yellow = 1, orange = 2 };

inline std::string to_string(ColorClass c) {
  switch (c) {
    case ColorClass::blue: return "blue";
    case ColorClass::yellow: return "yellow";
    case ColorClass::orange: return "orange";
  }
  return "unknown";
}

inline ColorClass color_from_string(const std::string& s) {
  if (s == "blue") return ColorClass::blue;
  if (s == "yellow") return ColorClass::yellow;
  if (s == "orange") return ColorClass::orange;
  throw Error(Errc::InvalidArgument, "unknown color class '" + s + "'");
}

/// Arm parameter t3 that puts the cross-ratio at `cr` for a given t2.
constexpr double stripe_t3_for(double cr, double t2) { return cr * t2 / (cr - 1.0 + t2); }

struct ConeGeometry {
  double height = 0.325;
  double base_halfwidth = 0.114;
  double t2 = 0.4;
  double t3 = stripe_t3_for(kReferenceCrossRatio, 0.4);
  ColorClass color = ColorClass::yellow;

  void validate() const {
    if (!(height > 0.0)) throw Error(Errc::InvalidArgument, "cone height must be positive");
    if (!(base_halfwidth > 0.0)) throw Error(Errc::InvalidArgument, "cone base half-width must be positive");
    if (!(0.0 < t2 && t2 < t3 && t3 < 1.0)) throw Error(Errc::InvalidArgument, "need 0 < t2 < t3 < 1");
  }
};

enum class KeypointFrame : std::uint8_t { patch, image };

/// Index pairs mirrored across the cone axis.
constexpr int mirror_index(int i) {
  constexpr std::array<int, kNumKeypoints> m{0, 4, 5, 6, 1, 2, 3};
  return m[static_cast<std::size_t>(i)];
}

struct KeypointSet {
  std::array<Point2, kNumKeypoints> points{};
  KeypointFrame frame = KeypointFrame::patch;

  Point2& operator[](int i) { return points[static_cast<std::size_t>(i)]; }
  const Point2& operator[](int i) const { return points[static_cast<std::size_t>(i)]; }

  /// Flat (x1, y1, ..., x7, y7) regression target.
  Eigen::Matrix<double, 14, 1> to_vector() const {
    Eigen::Matrix<double, 14, 1> v;
    for (int i = 0; i < kNumKeypoints; ++i) {
      v(2 * i) = (*this)[i].x();
      v(2 * i + 1) = (*this)[i].y();
    }
    return v;
  }

  static KeypointSet from_vector(const Eigen::Matrix<double, 14, 1>& v, KeypointFrame frame) {
    KeypointSet out;
    out.frame = frame;
    for (int i = 0; i < kNumKeypoints; ++i) out[i] = {v(2 * i), v(2 * i + 1)};
    return out;
  }
};

using ModelPoints = std::array<Point3, kNumKeypoints>;

inline ModelPoints canonical_keypoints(const ConeGeometry& g) {
  g.validate();
  const Point3 apex(0.0, g.height, 0.0);
  const Point3 left_base(-g.base_halfwidth, 0.0, 0.0);
  const Point3 right_base(g.base_halfwidth, 0.0, 0.0);
  auto along = [](const Point3& from, const Point3& to, double t) -> Point3 { return from + t * (to - from); };
  return {apex,
          along(apex, left_base, g.t2),
          along(apex, left_base, g.t3),
          left_base,
          along(apex, right_base, g.t2),
          along(apex, right_base, g.t3),
          right_base};
}

inline double model_cross_ratio(const ConeGeometry& g) {
  const ModelPoints p = canonical_keypoints(g);
  return cross_ratio<3>(p[0], p[1], p[2], p[3]);
}

/// Camera<-model rotation for a cone standing upright (model y against image
/// y) whose silhouette plane faces the camera center.
inline Eigen::Matrix3d facing_rotation(const Point3& base_in_camera) {
  const Eigen::Matrix3d upright = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();
  return rotation_about_y(std::atan2(base_in_camera.x(), base_in_camera.z())) * upright;
}

/// Ground-truth pose of an upright cone whose base sits at `base_in_camera`.
inline RigidPose facing_pose(const Point3& base_in_camera) {
  RigidPose pose;
  pose.rotation = facing_rotation(base_in_camera);
  pose.translation = base_in_camera;
  return pose;
}

/// Exact image keypoints of a cone at `base_in_camera`.
inline KeypointSet project_cone(const CameraModel& cam, const Point3& base_in_camera, const ConeGeometry& g) {
  const RigidPose pose = facing_pose(base_in_camera);
  const ModelPoints model = canonical_keypoints(g);
  KeypointSet out;
  out.frame = KeypointFrame::image;
  for (int i = 0; i < kNumKeypoints; ++i) out[i] = cam.project(pose.apply(model[static_cast<std::size_t>(i)]));
  return out;
}

/// Vertical pixel extent from apex to the base midpoint.
inline double apparent_height(const KeypointSet& image_kps) {
  const double base_mid_y = 0.5 * (image_kps[3].y() + image_kps[6].y());
  return base_mid_y - image_kps[0].y();
}

}  // namespace conepose
