#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "conepose/pipeline.hpp"
#include "conepose/stereo.hpp"

using namespace conepose;

namespace {

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::InvalidArgument;
}

const CameraModel kCam{600.0, 600.0, 800.0, 400.0, 1600, 800};
const ConeGeometry kCone{};
const StereoRig kRig = StereoRig::horizontal(kCam, 0.5);

}  // namespace

TEST(StereoRig, Construction) {
  EXPECT_DOUBLE_EQ(kRig.baseline(), 0.5);
  EXPECT_EQ(code_of([] { StereoRig::horizontal(kCam, 0.0); }), Errc::InvalidArgument);
  RigidPose skewed = RigidPose::from_translation({-0.5, 0, 0});
  skewed.rotation(0, 1) = 0.3;
  EXPECT_EQ(code_of([&] { StereoRig(kCam, kCam, skewed); }), Errc::InvalidArgument);
  CameraModel bad = kCam;
  bad.fy = -1;
  EXPECT_EQ(code_of([&] { StereoRig(kCam, bad, RigidPose::from_translation({-0.5, 0, 0})); }), Errc::InvalidArgument);
}

TEST(PropagateBbox, DisparityShiftsCenter) {
  const Point3 pos(0, 0, 6);
  const BBox left = simulate_detection(kCam, pos, kCone);
  const BBox right = propagate_bbox(kRig, pos, left, kCone);
  EXPECT_NEAR(right.center().x(), 750.0, 1e-9);
  EXPECT_NEAR(right.w, left.w, 1e-9);
  EXPECT_NEAR(right.h, left.h, 1e-9);
  EXPECT_NEAR(left.center().x(), 800.0, 1e-9);
}

TEST(PropagateBbox, KeepsMarginFraction) {
  const Point3 pos(0.3, 0.5, 7);
  for (double margin : {0.0, 0.1, 0.3}) {
    const BBox left = simulate_detection(kCam, pos, kCone, margin);
    const BBox right = propagate_bbox(kRig, pos, left, kCone);
    const BBox expect = keypoint_bbox(project_cone_right(kRig, pos, kCone), margin);
    EXPECT_NEAR(right.x, expect.x, 1e-9);
    EXPECT_NEAR(right.y, expect.y, 1e-9);
    EXPECT_NEAR(right.w, expect.w, 1e-9);
    EXPECT_NEAR(right.h, expect.h, 1e-9);
  }
}

TEST(PropagateBbox, CoversTrueRightKeypoints) {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const ScenePlan scene = generate_scene(2, 15, 4, kCam, kCone, seed);
    for (const auto& cone : scene.cones) {
      const KeypointSet kl = project_cone(kCam, cone.position, kCone);
      const PnPResult mono = solve_cone(kCam, kl, kCone, {});
      const BBox left = simulate_detection(kCam, cone.position, kCone);
      BBox right;
      try {
        right = propagate_bbox(kRig, mono.position, left, kCone);
      } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::OutOfRightFrame);
        continue;
      }
      for (const Point2& p : project_cone_right(kRig, cone.position, kCone).points) EXPECT_TRUE(right.contains(p));
      ++checked;
    }
  }
  EXPECT_GT(checked, 700);
}

TEST(PropagateBbox, Errors) {
  const BBox box{0, 0, 10, 10};
  RigidPose toed = RigidPose::from_translation({-0.5, 0, -3});
  const StereoRig behind(kCam, kCam, toed);
  EXPECT_EQ(code_of([&] { propagate_bbox(behind, {0, 0.5, 2}, box, kCone); }), Errc::BehindRightCamera);
  EXPECT_EQ(code_of([&] { propagate_bbox(kRig, {0, 0.5, -2}, box, kCone); }), Errc::InvalidArgument);
  // Far to the right of the right camera's field of view.
  EXPECT_EQ(code_of([&] { propagate_bbox(kRig, {-9, 0.5, 5}, box, kCone); }), Errc::OutOfRightFrame);
}

TEST(StereoRefine, ExactRecovery) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Point3 pos(rng.uniform(-2, 2), 0.5, rng.uniform(2, 15));
    const Point3 p =
        stereo_refine(kRig, project_cone(kCam, pos, kCone), project_cone_right(kRig, pos, kCone), kCone);
    EXPECT_LT((p - pos).norm(), 1e-9);
  }
}

TEST(StereoRefine, AgreesWithMono) {
  const Point3 pos(0.8, 0.5, 7.5);
  const KeypointSet kl = project_cone(kCam, pos, kCone);
  const Point3 st = stereo_refine(kRig, kl, project_cone_right(kRig, pos, kCone), kCone);
  EXPECT_LT((st - solve_cone(kCam, kl, kCone, {}).position).norm(), 1e-6);
}

TEST(StereoRefine, ParallelPairsDroppedThenInsufficient) {
  const Point3 pos(0, 0.5, 6);
  const KeypointSet kl = project_cone(kCam, pos, kCone);
  KeypointSet kr = project_cone_right(kRig, pos, kCone);
  // Zero-disparity pairs have parallel rays.
  for (int i : {0, 1, 2}) kr[i] = kl[i];
  EXPECT_LT((stereo_refine(kRig, kl, kr, kCone) - pos).norm(), 1e-9);
  for (int i : {3, 4}) kr[i] = kl[i];
  EXPECT_EQ(code_of([&] { stereo_refine(kRig, kl, kr, kCone); }), Errc::InsufficientPairs);
}

TEST(StereoRefine, MedianBeatsMeanUnderOneCorruptPair) {
  Rng rng(2);
  const Point3 pos(0.2, 0.5, 6);
  const KeypointSet exact_l = project_cone(kCam, pos, kCone);
  const KeypointSet exact_r = project_cone_right(kRig, pos, kCone);
  const RigidPose truth = facing_pose(pos);
  const ModelPoints model = canonical_keypoints(kCone);
  auto mean_estimate = [&](const KeypointSet& kl, const KeypointSet& kr) {
    Point3 acc = Point3::Zero();
    for (int i = 0; i < kNumKeypoints; ++i)
      acc += triangulate_two_view(kCam, kCam, kRig.left_to_right, kl[i], kr[i]) -
             truth.rotation * model[static_cast<std::size_t>(i)];
    return Point3(acc / kNumKeypoints);
  };
  double clean = 0, med = 0, mean = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    KeypointSet kl = exact_l, kr = exact_r;
    for (int i = 0; i < kNumKeypoints; ++i) {
      kl[i] += Point2(rng.normal(0, 0.3), rng.normal(0, 0.3));
      kr[i] += Point2(rng.normal(0, 0.3), rng.normal(0, 0.3));
    }
    clean += (stereo_refine(kRig, kl, kr, kCone) - pos).norm() / trials;
    const int bad = static_cast<int>(rng.below(7));
    kr[bad] += Point2(20, 0);
    med += (stereo_refine(kRig, kl, kr, kCone) - pos).norm() / trials;
    mean += (mean_estimate(kl, kr) - pos).norm() / trials;
  }
  EXPECT_LE(med, 3.0 * clean);
  EXPECT_GT(mean, med);
}

TEST(StereoRefine, MedianBreakdownWithThreeCorruptPairs) {
  Rng rng(3);
  const Point3 pos(-0.4, 0.5, 5);
  const ModelPoints model = canonical_keypoints(kCone);
  for (int t = 0; t < 100; ++t) {
    KeypointSet kl = project_cone(kCam, pos, kCone), kr = project_cone_right(kRig, pos, kCone);
    for (int i = 0; i < kNumKeypoints; ++i) kr[i] += Point2(rng.normal(0, 0.5), rng.normal(0, 0.5));
    std::vector<int> idx{0, 1, 2, 3, 4, 5, 6};
    rng.shuffle(idx.begin(), idx.end());
    for (int c = 0; c < 3; ++c) {
      kl[idx[static_cast<std::size_t>(c)]] += Point2(rng.uniform(-80, 80), rng.uniform(-80, 80));
      kr[idx[static_cast<std::size_t>(c)]] += Point2(rng.uniform(-80, 80), rng.uniform(-80, 80));
    }
    // At convergence stereo_refine's orientation is the facing rotation of
    // its own answer; compare the clean pairs' base estimates in that frame.
    const Point3 est = stereo_refine(kRig, kl, kr, kCone);
    std::vector<Point3> raw;
    for (int i = 0; i < kNumKeypoints; ++i)
      raw.push_back(triangulate_two_view(kCam, kCam, kRig.left_to_right, kl[i], kr[i]));
    const Eigen::Matrix3d R = facing_rotation(est);
    Point3 worst = Point3::Zero();
    for (int c = 3; c < kNumKeypoints; ++c) {
      const int i = idx[static_cast<std::size_t>(c)];
      const Point3 base = raw[static_cast<std::size_t>(i)] - R * model[static_cast<std::size_t>(i)];
      worst = worst.cwiseMax((base - pos).cwiseAbs());
    }
    const Point3 err = (est - pos).cwiseAbs();
    for (int k = 0; k < 3; ++k) EXPECT_LE(err(k), worst(k) + 1e-9) << "trial " << t << " axis " << k;
  }
}

TEST(StereoRefine, BeatsMonoAtSixMeters) {
  Rng rng(4);
  const Point3 pos(0, 0.5, 6);
  const KeypointSet exact_l = project_cone(kCam, pos, kCone);
  const KeypointSet exact_r = project_cone_right(kRig, pos, kCone);
  double mono = 0, stereo = 0;
  const int trials = 500;
  for (int t = 0; t < trials; ++t) {
    KeypointSet kl = exact_l, kr = exact_r;
    for (int i = 0; i < kNumKeypoints; ++i) {
      kl[i] += Point2(rng.normal(0, 1), rng.normal(0, 1));
      kr[i] += Point2(rng.normal(0, 1), rng.normal(0, 1));
    }
    mono += std::abs(solve_cone(kCam, kl, kCone, {}).position.z() - pos.z()) / trials;
    stereo += std::abs(stereo_refine(kRig, kl, kr, kCone).z() - pos.z()) / trials;
  }
  EXPECT_LT(stereo, mono);
}

TEST(StereoFrame, PipelineRecoversScene) {
  const ScenePlan scene = generate_scene(3, 8, 6, kCam, kCone, 17);
  const FrameResult r = estimate_frame_stereo(scene, kRig, annotated_predictor());
  for (const auto& o : r.observations) {
    EXPECT_EQ(o.source, ObservationSource::stereo);
    EXPECT_LT((o.position - scene.cones[static_cast<std::size_t>(o.cone_index)].position).norm(), 1e-6);
  }
  EXPECT_EQ(r.observations.size() + r.skipped.size(), scene.cones.size());
  EXPECT_GE(r.observations.size(), 3u);
}
