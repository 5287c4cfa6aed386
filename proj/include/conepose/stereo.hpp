#pragma once

// Stereo shortcut: carry a left-frame detection into the right image through
// the mono estimate, then triangulate the index-matched keypoints.

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/error.hpp"
#include "conepose/geometry.hpp"
#include "conepose/patch.hpp"
#include "conepose/synthetic.hpp"

namespace conepose {

struct StereoRig {
  CameraModel left;
  CameraModel right;
  RigidPose left_to_right;

  StereoRig(const CameraModel& l, const CameraModel& r, const RigidPose& l2r) : left(l), right(r), left_to_right(l2r) {
    left.validate();
    right.validate();
    if (!l2r.is_valid(1e-6)) throw Error(Errc::InvalidArgument, "left_to_right is not a rigid transform");
    if (!(baseline() > 0.0)) throw Error(Errc::InvalidArgument, "stereo baseline must be positive");
  }

  /// Identical cameras, right camera `baseline` meters along +x of the left.
  static StereoRig horizontal(const CameraModel& cam, double baseline) {
    return {cam, cam, RigidPose::from_translation({-baseline, 0.0, 0.0})};
  }

  double baseline() const { return left_to_right.translation.norm(); }
};

/// Exact right-image keypoints of a cone standing at `left_position` and
/// facing the left camera.
inline KeypointSet project_cone_right(const StereoRig& rig, const Point3& left_position, const ConeGeometry& g) {
  const RigidPose pose = rig.left_to_right.compose(facing_pose(left_position));
  const ModelPoints model = canonical_keypoints(g);
  KeypointSet out;
  out.frame = KeypointFrame::image;
  for (int i = 0; i < kNumKeypoints; ++i) {
    const Point3 p = pose.apply(model[static_cast<std::size_t>(i)]);
    if (!(p.z() > 0.0)) throw Error(Errc::BehindRightCamera, "cone behind the right camera");
    out[i] = rig.right.project(p);
  }
  return out;
}

inline BBox propagate_bbox(const StereoRig& rig, const Point3& mono_position, const BBox& bbox_left,
                           const ConeGeometry& g) {
  if (!(mono_position.z() > 0.0)) throw Error(Errc::InvalidArgument, "mono position must be in front of the camera");
  if (!(rig.left_to_right.apply(mono_position).z() > 0.0))
    throw Error(Errc::BehindRightCamera, "cone behind the right camera");

  // Recover the detector margin from how much bbox_left exceeds the tight
  // keypoint box of the mono estimate.
  const BBox tight = keypoint_bbox(project_cone(rig.left, mono_position, g), 0.0);
  double margin = 0.0;
  if (tight.w > 0.0 && tight.h > 0.0)
    margin = std::max(0.0, 0.25 * (bbox_left.w / tight.w + bbox_left.h / tight.h - 2.0));

  const BBox out = keypoint_bbox(project_cone_right(rig, mono_position, g), margin);
  if (!overlaps_frame(rig.right, out)) throw Error(Errc::OutOfRightFrame, "propagated box misses the right image");
  return out;
}

namespace detail {

inline double median(std::vector<double> v) {
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

inline constexpr int kMinStereoPairs = 3;

/// Cone base position in the left frame: every keypoint pair is triangulated,
/// moved onto the base through its known model offset and the componentwise
/// median taken.
inline Point3 stereo_refine(const StereoRig& rig, const KeypointSet& kps_left, const KeypointSet& kps_right,
                            const ConeGeometry& g = {}) {
  std::vector<Point3> points;
  std::vector<int> index;
  for (int i = 0; i < kNumKeypoints; ++i) {
    try {
      points.push_back(triangulate_two_view(rig.left, rig.right, rig.left_to_right, kps_left[i], kps_right[i]));
      index.push_back(i);
    } catch (const Error& e) {
      if (e.code() != Errc::ParallelRays) throw;
    }
  }
  if (static_cast<int>(points.size()) < kMinStereoPairs)
    throw Error(Errc::InsufficientPairs, std::to_string(points.size()) + " usable keypoint pairs");

  // The facing yaw depends on the answer, so start from the median of the raw
  // points (near the cone axis) and iterate; the map is a strong contraction
  // because the offsets are small next to the range.
  std::vector<double> xs, zs;
  for (const Point3& p : points) {
    xs.push_back(p.x());
    zs.push_back(p.z());
  }
  Point3 base(detail::median(xs), 0.0, detail::median(zs));
  const ModelPoints model = canonical_keypoints(g);
  for (int iter = 0; iter < 20; ++iter) {
    const Eigen::Matrix3d R = facing_rotation(base);
    std::array<std::vector<double>, 3> coords;
    for (std::size_t k = 0; k < points.size(); ++k) {
      const Point3 b = points[k] - R * model[static_cast<std::size_t>(index[k])];
      for (int c = 0; c < 3; ++c) coords[static_cast<std::size_t>(c)].push_back(b(c));
    }
    const Point3 next(detail::median(coords[0]), detail::median(coords[1]), detail::median(coords[2]));
    const double change = (next - base).norm();
    base = next;
    if (change < 1e-13) break;
  }
  return base;
}

}  // namespace conepose
