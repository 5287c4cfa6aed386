#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/geometry.hpp"
#include "conepose/random.hpp"

using namespace conepose;

namespace {

CameraModel desk_camera() { return {600.0, 600.0, 800.0, 400.0, 1600, 800}; }

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

RigidPose random_pose(Rng& rng) {
  RigidPose p;
  p.rotation = rotation_from_axis_angle({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
  p.translation = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  return p;
}

}  // namespace

TEST(Project, OpticalAxisHitsPrincipalPoint) {
  const Point2 uv = project(desk_camera(), {0, 0, 5});
  EXPECT_DOUBLE_EQ(uv.x(), 800.0);
  EXPECT_DOUBLE_EQ(uv.y(), 400.0);
}

TEST(Project, LateralOffset) {
  const Point2 uv = project(desk_camera(), {1, 0, 5});
  EXPECT_DOUBLE_EQ(uv.x(), 920.0);
  EXPECT_DOUBLE_EQ(uv.y(), 400.0);
}

TEST(Project, BehindCameraRejected) {
  EXPECT_EQ(code_of([] { project(desk_camera(), {0, 0, -1}); }), Errc::NonPositiveDepth);
  EXPECT_EQ(code_of([] { project(desk_camera(), {0, 0, 0}); }), Errc::NonPositiveDepth);
}

TEST(Project, BackprojectRoundTrip) {
  Rng rng(11);
  const CameraModel cam = desk_camera();
  for (int i = 0; i < 1000; ++i) {
    const Point2 px(rng.uniform(-200, 1800), rng.uniform(-200, 1000));
    const double z = rng.uniform(0.1, 50);
    const Point2 back = cam.project(cam.backproject(px, z));
    EXPECT_NEAR((back - px).norm(), 0.0, 1e-9);
  }
}

TEST(Camera, ValidateRejectsBadIntrinsics) {
  CameraModel c = desk_camera();
  c.fx = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::InvalidArgument);
  c = desk_camera();
  c.cx = 1600;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::InvalidArgument);
  c = desk_camera();
  c.cy = -1;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::InvalidArgument);
  EXPECT_NO_THROW(desk_camera().validate());
}

TEST(Transform, Identity) {
  const Point3 p = transform(RigidPose::identity(), {1, 2, 3});
  EXPECT_EQ(p, Point3(1, 2, 3));
}

TEST(Transform, PureTranslation) {
  const Point3 p = transform(RigidPose::from_translation({0, 0, 6}), Point3::Zero());
  EXPECT_EQ(p, Point3(0, 0, 6));
}

TEST(Transform, QuarterYaw) {
  RigidPose pose;
  pose.rotation = rotation_about_y(std::numbers::pi / 2);
  // By hand: R_y(90deg) = [[0,0,1],[0,1,0],[-1,0,0]] sends x to -z.
  const Point3 p = transform(pose, {1, 0, 0});
  EXPECT_NEAR((p - Point3(0, 0, -1)).norm(), 0.0, 1e-12);
}

TEST(RigidPose, InverseUndoes) {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const RigidPose p = random_pose(rng);
    const Point3 x(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    EXPECT_NEAR((p.inverse().apply(p.apply(x)) - x).norm(), 0.0, 1e-12);
    EXPECT_NEAR((p.compose(p.inverse()).apply(x) - x).norm(), 0.0, 1e-12);
  }
}

TEST(RigidPose, ComposeOrder) {
  Rng rng(6);
  const RigidPose a = random_pose(rng);
  const RigidPose b = random_pose(rng);
  const Point3 x(0.3, -0.2, 1.1);
  EXPECT_NEAR((a.compose(b).apply(x) - a.apply(b.apply(x))).norm(), 0.0, 1e-12);
}

TEST(RigidPose, ThousandCompositionsStayOrthonormal) {
  Rng rng(7);
  RigidPose acc;
  for (int i = 0; i < 1000; ++i) acc = acc.compose(random_pose(rng));
  EXPECT_TRUE(acc.is_valid(1e-9));
  acc.reorthonormalize();
  EXPECT_TRUE(acc.is_valid(1e-12));
}

TEST(CrossRatio, EquallySpacedCollinear) {
  const Eigen::Vector2d p1(0, 0), p2(1, 0), p3(2, 0), p4(3, 0);
  EXPECT_NEAR(cross_ratio<2>(p1, p2, p3, p4), 4.0 / 3.0, 1e-15);
}

TEST(CrossRatio, ConeLeftArm) {
  const ModelPoints m = canonical_keypoints(ConeGeometry{});
  EXPECT_NEAR(cross_ratio<3>(m[0], m[1], m[2], m[3]), 1.3940842428872968, 1e-6);
}

TEST(CrossRatio, CoincidentPointsRejected) {
  const Eigen::Vector2d a(1, 1), b(2, 2), c(3, 3);
  EXPECT_EQ(code_of([&] { cross_ratio<2>(a, b, c, a); }), Errc::DegenerateConfiguration);
  EXPECT_EQ(code_of([&] { cross_ratio<2>(a, b, b, c); }), Errc::DegenerateConfiguration);
  EXPECT_EQ(code_of([&] { cross_ratio<2>(a, b, c, b); }), Errc::DegenerateConfiguration);
}

TEST(CrossRatio, ProjectiveInvariance) {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    CameraModel cam{rng.uniform(200, 2000), rng.uniform(200, 2000), rng.uniform(0, 1599), rng.uniform(0, 799), 1600, 800};
    const Point3 origin(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(4, 20));
    const Point3 dir = Point3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized();
    double t[4] = {0, rng.uniform(0.1, 0.4), rng.uniform(0.5, 0.8), rng.uniform(0.9, 1.5)};
    Point3 p[4];
    Point2 q[4];
    for (int i = 0; i < 4; ++i) {
      p[i] = origin + t[i] * dir;
      q[i] = cam.project(p[i]);
    }
    const double c3 = cross_ratio<3>(p[0], p[1], p[2], p[3]);
    const double c2 = cross_ratio<2>(q[0], q[1], q[2], q[3]);
    ASSERT_LT(std::abs(c2 - c3), 1e-9) << "trial " << trial;
  }
}

TEST(CrossRatio, ProjectedConeArm) {
  const ModelPoints m = canonical_keypoints(ConeGeometry{});
  const RigidPose pose = facing_pose({0.7, 0.5, 6.0});
  const CameraModel cam = desk_camera();
  Point2 q[4];
  for (int i = 0; i < 4; ++i) q[i] = cam.project(pose.apply(m[static_cast<std::size_t>(i)]));
  EXPECT_NEAR(cross_ratio<2>(q[0], q[1], q[2], q[3]), cross_ratio<3>(m[0], m[1], m[2], m[3]), 1e-9);
}

TEST(CrossRatio, ScaleInvariance) {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    Point3 p[4];
    for (auto& x : p) x = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Point3 center(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double s = rng.uniform(0.1, 10);
    Point3 q[4];
    for (int i = 0; i < 4; ++i) q[i] = center + s * (p[i] - center);
    const double a = cross_ratio<3>(p[0], p[1], p[2], p[3]);
    const double b = cross_ratio<3>(q[0], q[1], q[2], q[3]);
    EXPECT_LT(std::abs(a - b), 1e-12 * std::max(1.0, std::abs(a)));
  }
}

class Triangulation : public ::testing::Test {
 protected:
  CameraModel cam = desk_camera();
  RigidPose l2r = RigidPose::from_translation({-0.5, 0, 0});
};

TEST_F(Triangulation, RecoversExactPoint) {
  const Point3 p(0.2, 0.1, 6);
  const Point3 r = triangulate_two_view(cam, cam, l2r, cam.project(p), cam.project(l2r.apply(p)));
  EXPECT_NEAR((r - p).norm(), 0.0, 1e-9);
}

TEST_F(Triangulation, RecoversUnderRotatedRig) {
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    RigidPose rig;
    rig.rotation = rotation_from_axis_angle({rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)});
    rig.translation = {rng.uniform(-0.7, -0.2), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
    const Point3 p(rng.uniform(-2, 2), rng.uniform(-0.5, 1), rng.uniform(3, 20));
    const Point3 r = triangulate_two_view(cam, cam, rig, cam.project(p), cam.project(rig.apply(p)));
    EXPECT_NEAR((r - p).norm(), 0.0, 1e-8);
  }
}

TEST_F(Triangulation, ZeroDisparityIsParallel) {
  const Point2 uv(900, 420);
  EXPECT_EQ(code_of([&] { triangulate_two_view(cam, cam, l2r, uv, uv); }), Errc::ParallelRays);
}

TEST_F(Triangulation, OnePixelDisparityError) {
  // The right camera sits at +x, so a larger disparity means a smaller
  // right-image x.
  const Point3 p(0, 0, 6);
  const Point2 uv_l = cam.project(p), uv_r = cam.project(l2r.apply(p));
  const double expected = 36.0 / (600.0 * 0.5);
  const Point3 nearer = triangulate_two_view(cam, cam, l2r, uv_l, uv_r - Point2(1, 0));
  EXPECT_GE(nearer.z(), 5.7);
  EXPECT_LE(nearer.z(), 6.0);
  EXPECT_NEAR(6.0 - nearer.z(), expected, 0.02);
  const Point3 farther = triangulate_two_view(cam, cam, l2r, uv_l, uv_r + Point2(1, 0));
  EXPECT_GE(farther.z(), 6.0);
  EXPECT_LE(farther.z(), 6.3);
  EXPECT_NEAR(farther.z() - 6.0, expected, 0.02);
}

TEST(FitQuadratic, ExactParabola) {
  const std::vector<double> xs{0, 1, 2, 3}, ys{0, 1, 4, 9};
  const QuadraticFit f = fit_quadratic(xs, ys);
  EXPECT_NEAR(f.a, 1, 1e-9);
  EXPECT_NEAR(f.b, 0, 1e-9);
  EXPECT_NEAR(f.c, 0, 1e-9);
}

TEST(FitQuadratic, CollinearDegeneratesToLine) {
  const std::vector<double> xs{0, 1, 2, 3}, ys{1, 2, 3, 4};
  const QuadraticFit f = fit_quadratic(xs, ys);
  EXPECT_NEAR(f.a, 0, 1e-9);
  EXPECT_NEAR(f.b, 1, 1e-9);
  EXPECT_NEAR(f.c, 1, 1e-9);
}

TEST(FitQuadratic, Errors) {
  const std::vector<double> two{1, 2};
  EXPECT_EQ(code_of([&] { fit_quadratic(two, two); }), Errc::InsufficientPoints);
  const std::vector<double> xs{1, 1, 2, 2}, ys{0, 1, 2, 3};
  EXPECT_EQ(code_of([&] { fit_quadratic(xs, ys); }), Errc::SingularSystem);
  const std::vector<double> same{3, 3, 3}, y3{1, 2, 3};
  EXPECT_EQ(code_of([&] { fit_quadratic(same, y3); }), Errc::SingularSystem);
}

TEST(FitQuadratic, FarFromOriginStaysAccurate) {
  std::vector<double> xs, ys;
  for (int i = 0; i < 20; ++i) {
    const double x = 1000.0 + 0.5 * i;
    xs.push_back(x);
    ys.push_back(0.02 * x * x - 3.0 * x + 7.0);
  }
  const QuadraticFit f = fit_quadratic(xs, ys);
  for (double x : xs) EXPECT_NEAR(f(x), 0.02 * x * x - 3.0 * x + 7.0, 1e-6);
}

TEST(FitQuadratic, NoisyGeneratorWithinThreeSigma) {
  // Coefficient standard errors from the exact normal-equation covariance.
  const double a0 = 0.004, b0 = 0.01, c0 = 0.05, sigma = 0.02;
  const int n = 100;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i)] = 3.0 + 0.12 * i;
  Eigen::MatrixXd X(n, 3);
  for (int i = 0; i < n; ++i) {
    const double x = xs[static_cast<std::size_t>(i)];
    X.row(i) << x * x, x, 1.0;
  }
  const Eigen::Matrix3d cov = sigma * sigma * (X.transpose() * X).inverse();
  int outside = 0;
  Rng rng(41);
  const int reps = 200;
  for (int r = 0; r < reps; ++r) {
    std::vector<double> ys(n);
    for (int i = 0; i < n; ++i) {
      const double x = xs[static_cast<std::size_t>(i)];
      ys[static_cast<std::size_t>(i)] = a0 * x * x + b0 * x + c0 + rng.normal(0, sigma);
    }
    const QuadraticFit f = fit_quadratic(xs, ys);
    if (std::abs(f.a - a0) > 3 * std::sqrt(cov(0, 0)) || std::abs(f.b - b0) > 3 * std::sqrt(cov(1, 1)) ||
        std::abs(f.c - c0) > 3 * std::sqrt(cov(2, 2)))
      ++outside;
  }
  // Three marginal 3-sigma bands jointly miss about 0.8% of the time.
  EXPECT_LE(outside, 8);
}

TEST(FitQuadratic, BeatsRandomTriples) {
  Rng rng(42);
  std::vector<double> xs, ys;
  for (int i = 0; i < 30; ++i) {
    const double x = rng.uniform(2, 20);
    xs.push_back(x);
    ys.push_back(0.003 * x * x + 0.02 * x + rng.normal(0, 0.1));
  }
  auto sse = [&](double a, double b, double c) {
    double s = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += std::pow(ys[i] - ((a * xs[i] + b) * xs[i] + c), 2);
    return s;
  };
  const QuadraticFit f = fit_quadratic(xs, ys);
  const double best = sse(f.a, f.b, f.c);
  for (int k = 0; k < 100; ++k) {
    const double a = f.a + rng.normal(0, 0.001), b = f.b + rng.normal(0, 0.02), c = f.c + rng.normal(0, 0.1);
    EXPECT_LE(best, sse(a, b, c) + 1e-12);
  }
}
