#pragma once

// Per-frame pipeline: simulated detection, patch crop, keypoint regression,
// image-frame mapping and robust PnP for every cone of a scene.

#include <charconv>
#include <functional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/error.hpp"
#include "conepose/keypoint_loss.hpp"
#include "conepose/patch.hpp"
#include "conepose/pnp.hpp"
#include "conepose/regressor.hpp"
#include "conepose/stereo.hpp"
#include "conepose/synthetic.hpp"

namespace conepose {

enum class ObservationSource : std::uint8_t { mono, stereo };

inline std::string to_string(ObservationSource s) { return s == ObservationSource::mono ? "mono" : "stereo"; }

struct ConeObservation {
  int cone_index = 0;
  Point3 position = Point3::Zero();  // left camera frame
  ColorClass color = ColorClass::yellow;
  double mean_reproj_error = 0.0;
  int inlier_count = 0;
  ObservationSource source = ObservationSource::mono;
};

struct SkippedCone {
  int cone_index = 0;
  Errc reason = Errc::InvalidArgument;
  std::string message;
};

struct FrameResult {
  std::vector<ConeObservation> observations;
  std::vector<SkippedCone> skipped;
};

/// Patch-frame 14-vector for a rendered sample.
using KeypointPredictor = std::function<Vec14(const PatchSample&)>;

/// Returns the exact annotation: the perfect-regressor stub.
inline KeypointPredictor annotated_predictor() {
  return [](const PatchSample& s) { return s.keypoints.to_vector(); };
}

/// The net must outlive the returned predictor.
template <typename S>
KeypointPredictor net_predictor(const KeypointNet<S>& net) {
  return [&net](const PatchSample& s) { return net.forward(s.patch); };
}

struct PipelineOptions {
  ConeGeometry model;  // geometry assumed by the solver
  RansacConfig ransac;
  RenderOptions render;
};

/// Pose from image-frame keypoints. When a corrupted apex or base defeats the
/// height-based guess, a fronto-parallel fit seeds the search instead.
inline PnPResult solve_cone(const CameraModel& cam, const KeypointSet& image_kps, const ConeGeometry& model,
                            const RansacConfig& ransac) {
  const ModelPoints pts = canonical_keypoints(model);
  auto initial_pose = [&]() -> RigidPose {
    try {
      return depth_init(cam, image_kps, model);
    } catch (const Error& e) {
      if (e.code() != Errc::DegenerateKeypoints) throw;
    }
    // Leave-one-out fits, starting with all points.
    for (int skip = -1; skip < kNumKeypoints; ++skip) {
      PointMask mask = kAllPoints;
      if (skip >= 0) mask[static_cast<std::size_t>(skip)] = false;
      try {
        return similarity_init(cam, pts, image_kps.points, mask);
      } catch (const Error&) {
      }
    }
    throw Error(Errc::DegenerateKeypoints, "no usable initial pose");
  };
  return ransac_pnp(cam, pts, image_kps.points, initial_pose(), ransac);
}

inline KeypointSet predict_image_keypoints(const KeypointPredictor& predict, const PatchSample& sample) {
  const Vec14 v = predict(sample);
  if (!v.allFinite()) throw Error(Errc::DivergedLoss, "regressor produced non-finite keypoints");
  return patch_to_image(sample.bbox, KeypointSet::from_vector(v, KeypointFrame::patch));
}

inline FrameResult estimate_frame(const ScenePlan& scene, const KeypointPredictor& predict,
                                  const PipelineOptions& opt = {}) {
  if (scene.cones.empty()) throw Error(Errc::EmptyScene, "scene has no cones");
  RenderOptions render = opt.render;
  render.augment = false;
  FrameResult out;
  for (std::size_t i = 0; i < scene.cones.size(); ++i) {
    const PlacedCone& cone = scene.cones[i];
    const int index = static_cast<int>(i);
    try {
      const PatchSample sample = render_patch(scene.camera, cone.position, cone.geometry, mix_seed(scene.seed, i), render);
      const KeypointSet kps = predict_image_keypoints(predict, sample);
      const PnPResult pnp = solve_cone(scene.camera, kps, opt.model, opt.ransac);
      if (!(pnp.position.z() > 0.0)) throw Error(Errc::BehindCamera, "estimated position behind camera");
      out.observations.push_back(
          {index, pnp.position, cone.geometry.color, pnp.mean_reproj_error, pnp.inlier_count(), ObservationSource::mono});
    } catch (const Error& e) {
      out.skipped.push_back({index, e.code(), e.what()});
    }
  }
  return out;
}

/// Mono estimate in the left view, box propagated into the right view, a
/// second regression there and triangulation of the keypoint pairs.
inline FrameResult estimate_frame_stereo(const ScenePlan& scene, const StereoRig& rig, const KeypointPredictor& predict,
                                         const PipelineOptions& opt = {}) {
  if (scene.cones.empty()) throw Error(Errc::EmptyScene, "scene has no cones");
  RenderOptions render = opt.render;
  render.augment = false;
  FrameResult out;
  for (std::size_t i = 0; i < scene.cones.size(); ++i) {
    const PlacedCone& cone = scene.cones[i];
    const int index = static_cast<int>(i);
    try {
      const PatchSample left = render_patch(rig.left, cone.position, cone.geometry, mix_seed(scene.seed, i), render);
      const KeypointSet kps_left = predict_image_keypoints(predict, left);
      const PnPResult mono = solve_cone(rig.left, kps_left, opt.model, opt.ransac);
      const BBox box_right = propagate_bbox(rig, mono.position, left.bbox, opt.model);
      const RigidPose pose_right = rig.left_to_right.compose(facing_pose(cone.position));
      const PatchSample right =
          render_patch_posed(rig.right, pose_right, cone.geometry, box_right, mix_seed(scene.seed, i) ^ 0x5157, render);
      const KeypointSet kps_right = predict_image_keypoints(predict, right);
      const Point3 p = stereo_refine(rig, kps_left, kps_right, opt.model);
      if (!(p.z() > 0.0)) throw Error(Errc::BehindCamera, "triangulated position behind camera");
      out.observations.push_back(
          {index, p, cone.geometry.color, mono.mean_reproj_error, mono.inlier_count(), ObservationSource::stereo});
    } catch (const Error& e) {
      out.skipped.push_back({index, e.code(), e.what()});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV output: header row, comma separated, "\n" line ends, shortest
// round-trip decimal formatting independent of the locale.

class CsvWriter {
 public:
  CsvWriter(std::ostream& os, std::initializer_list<std::string_view> header) : os_(os) {
    for (auto h : header) field(h);
    end_row();
  }

  CsvWriter& field(std::string_view s) {
    sep();
    os_ << s;
    return *this;
  }

  CsvWriter& field(double v) {
    sep();
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    os_.write(buf, ptr - buf);
    return *this;
  }

  template <typename I>
    requires std::is_integral_v<I>
  CsvWriter& field(I v) {
    sep();
    char buf[24];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    os_.write(buf, ptr - buf);
    return *this;
  }

  void end_row() {
    os_ << '\n';
    first_ = true;
  }

 private:
  void sep() {
    if (!first_) os_ << ',';
    first_ = false;
  }

  std::ostream& os_;
  bool first_ = true;
};

inline void write_observations_csv(std::ostream& os, const FrameResult& r) {
  CsvWriter csv(os, {"cone_index", "x", "y", "z", "color", "mean_reproj_error", "inlier_count", "source"});
  for (const auto& o : r.observations) {
    csv.field(o.cone_index).field(o.position.x()).field(o.position.y()).field(o.position.z());
    csv.field(to_string(o.color)).field(o.mean_reproj_error).field(o.inlier_count).field(to_string(o.source));
    csv.end_row();
  }
}

inline void write_skipped_csv(std::ostream& os, const std::vector<SkippedCone>& skipped,
                              std::string_view index_name = "cone_index") {
  CsvWriter csv(os, {index_name, "reason"});
  for (const auto& s : skipped) {
    csv.field(s.cone_index).field(to_string(s.reason));
    csv.end_row();
  }
}

}  // namespace conepose
