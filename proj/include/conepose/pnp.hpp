#pragma once

// Pose of a single cone from its seven 2D-3D correspondences: a similar-
// triangles depth guess, Levenberg-Marquardt refinement and an exhaustive
// minimal-subset consensus search.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/error.hpp"
#include "conepose/geometry.hpp"

namespace conepose {

using ImagePoints = std::array<Point2, kNumKeypoints>;
using PointMask = std::array<bool, kNumKeypoints>;

inline constexpr PointMask kAllPoints{true, true, true, true, true, true, true};

struct PnPResult {
  RigidPose pose;  // camera <- model
  Point3 position = Point3::Zero();
  double mean_reproj_error = 0.0;  // over the points in inlier_mask
  std::array<double, kNumKeypoints> per_point_residuals{};
  PointMask inlier_mask = kAllPoints;
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_history;  // cost after each accepted step, starting with the initial cost

  int inlier_count() const {
    int n = 0;
    for (bool b : inlier_mask) n += b ? 1 : 0;
    return n;
  }
};

struct RansacConfig {
  int subset_size = 4;
  double inlier_threshold = 2.0;
  int min_inliers = 5;

  void validate() const {
    if (subset_size < 4 || subset_size > kNumKeypoints)
      throw Error(Errc::InvalidArgument, "subset_size must be in [4, 7]");
    if (!(inlier_threshold > 0.0)) throw Error(Errc::InvalidArgument, "inlier_threshold must be positive");
    if (min_inliers < subset_size || min_inliers > kNumKeypoints)
      throw Error(Errc::InvalidArgument, "min_inliers must be in [subset_size, 7]");
  }
};

/// Smallest apex-to-base extent, in pixels, that still yields a usable depth.
inline constexpr double kMinApparentHeight = 2.0;

inline RigidPose depth_init(const CameraModel& cam, const KeypointSet& image_kps, const ConeGeometry& g) {
  const double h = apparent_height(image_kps);
  if (!(h >= kMinApparentHeight))
    throw Error(Errc::DegenerateKeypoints, "apparent height " + std::to_string(h) + " px");
  const double z0 = cam.fy * g.height / h;
  const Point2 base_mid = 0.5 * (image_kps[3] + image_kps[6]);
  return facing_pose(cam.backproject(base_mid, z0));
}

/// Least-squares fronto-parallel fit u - cx = fx (p + s X), v - cy = fy (q - s Y)
/// over the masked points; the scale s is the inverse depth of the base.
inline RigidPose similarity_init(const CameraModel& cam, const ModelPoints& model, const ImagePoints& image,
                                 const PointMask& mask = kAllPoints) {
  Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (!mask[i]) continue;
    const Eigen::Vector3d ru(model[i].x(), 1.0, 0.0), rv(-model[i].y(), 0.0, 1.0);
    const double u = (image[i].x() - cam.cx) / cam.fx, v = (image[i].y() - cam.cy) / cam.fy;
    A += ru * ru.transpose() + rv * rv.transpose();
    b += ru * u + rv * v;
  }
  const Eigen::Vector3d x = A.ldlt().solve(b);
  if (!x.allFinite() || !(x(0) > 0.0)) throw Error(Errc::DegenerateKeypoints, "no positive scale fits the keypoints");
  const double z0 = 1.0 / x(0);
  return facing_pose(Point3(x(1) * z0, x(2) * z0, z0));
}

inline std::array<double, kNumKeypoints> reprojection_error(const CameraModel& cam, const RigidPose& pose,
                                                            const ModelPoints& model, const ImagePoints& image) {
  std::array<double, kNumKeypoints> out{};
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Point3 pc = pose.apply(model[i]);
    if (!(pc.z() > 0.0)) throw Error(Errc::BehindCamera, "model point " + std::to_string(i + 1) + " behind camera");
    out[i] = (cam.project(pc) - image[i]).norm();
  }
  return out;
}

namespace detail {

inline bool in_front(const RigidPose& pose, const ModelPoints& model) {
  for (const Point3& p : model)
    if (!(pose.apply(p).z() > 0.0)) return false;
  return true;
}

inline double pnp_cost(const CameraModel& cam, const RigidPose& pose, const ModelPoints& model,
                       const ImagePoints& image, const PointMask& mask) {
  double cost = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i)
    if (mask[i]) cost += (cam.project(pose.apply(model[i])) - image[i]).squaredNorm();
  return cost;
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

}  // namespace detail

inline constexpr int kLmMaxIterations = 100;
inline constexpr double kLmStepTolerance = 1e-10;
inline constexpr double kLmCostTolerance = 1e-12;
inline constexpr double kLmInitialDamping = 1e-3;

/// Minimizes the summed squared reprojection error over the points in
/// `use_mask`. The pose is updated as R <- exp(w) R, t <- t + dt.
inline PnPResult refine_lm(const CameraModel& cam, const ModelPoints& model, const ImagePoints& image,
                           const RigidPose& init, const std::optional<PointMask>& use_mask = std::nullopt) {
  const PointMask mask = use_mask.value_or(kAllPoints);
  int used = 0;
  for (bool b : mask) used += b ? 1 : 0;
  if (used < 4) throw Error(Errc::InsufficientPoints, "need at least 4 correspondences");
  if (!detail::in_front(init, model)) throw Error(Errc::BehindCamera, "initial pose puts the cone behind the camera");

  PnPResult result;
  RigidPose pose = init;
  double cost = detail::pnp_cost(cam, pose, model, image, mask);
  result.cost_history.push_back(cost);
  double lambda = kLmInitialDamping;

  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  bool jacobian_stale = true;
  Mat6 H;
  Vec6 g;
  while (result.iterations < kLmMaxIterations) {
    if (jacobian_stale) {
      H.setZero();
      g.setZero();
      for (std::size_t i = 0; i < model.size(); ++i) {
        if (!mask[i]) continue;
        const Point3 rotated = pose.rotation * model[i];
        const Point3 pc = rotated + pose.translation;
        const double iz = 1.0 / pc.z();
        Eigen::Matrix<double, 2, 3> dproj;
        dproj << cam.fx * iz, 0.0, -cam.fx * pc.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * pc.y() * iz * iz;
        Eigen::Matrix<double, 2, 6> J;
        J.leftCols<3>() = -dproj * detail::skew(rotated);
        J.rightCols<3>() = dproj;
        const Point2 r = cam.project(pc) - image[i];
        H.noalias() += J.transpose() * J;
        g.noalias() += J.transpose() * r;
      }
      jacobian_stale = false;
    }
    ++result.iterations;

    Mat6 A = H;
    for (int k = 0; k < 6; ++k) A(k, k) += lambda * std::max(H(k, k), 1e-12);
    const Vec6 step = A.ldlt().solve(-g);
    if (!step.allFinite() || step.norm() < kLmStepTolerance) {
      result.converged = step.allFinite();
      break;
    }

    RigidPose candidate;
    candidate.rotation = rotation_from_axis_angle(step.head<3>()) * pose.rotation;
    candidate.translation = pose.translation + step.tail<3>();
    const bool valid = detail::in_front(candidate, model);
    const double new_cost = valid ? detail::pnp_cost(cam, candidate, model, image, mask) : 0.0;
    if (valid && new_cost < cost) {
      const double decrease = cost - new_cost;
      pose = candidate;
      cost = new_cost;
      result.cost_history.push_back(cost);
      lambda *= 0.1;
      jacobian_stale = true;
      if (decrease < kLmCostTolerance) {
        result.converged = true;
        break;
      }
    } else {
      lambda *= 10.0;
      if (lambda > 1e16) {
        // No descent direction left at any damping: a stationary point.
        result.converged = true;
        break;
      }
    }
  }

  pose.reorthonormalize();
  result.pose = pose;
  result.position = pose.translation;
  result.per_point_residuals = reprojection_error(cam, pose, model, image);
  result.inlier_mask = mask;
  double sum = 0.0;
  for (std::size_t i = 0; i < model.size(); ++i)
    if (mask[i]) sum += result.per_point_residuals[i];
  result.mean_reproj_error = sum / used;
  return result;
}

/// Every `k`-of-7 index subset in lexicographic order.
inline std::vector<PointMask> keypoint_subsets(int k) {
  std::vector<PointMask> out;
  for (unsigned bits = 0; bits < (1u << kNumKeypoints); ++bits) {
    if (std::popcount(bits) != k) continue;
    PointMask m{};
    for (int i = 0; i < kNumKeypoints; ++i) m[static_cast<std::size_t>(i)] = (bits >> i) & 1u;
    out.push_back(m);
  }
  std::sort(out.begin(), out.end(), [](const PointMask& a, const PointMask& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(), std::greater<>());
  });
  return out;
}

/// Exhaustive consensus: refine every minimal subset from `init` and from the
/// subset's own fronto-parallel fit, keep the candidate with the most inliers
/// (ties broken by lower inlier residual), then refine on that inlier set.
inline PnPResult ransac_pnp(const CameraModel& cam, const ModelPoints& model, const ImagePoints& image,
                            const RigidPose& init, const RansacConfig& cfg = {}) {
  cfg.validate();
  int best_count = -1;
  double best_residual = 0.0;
  PointMask best_mask{};
  RigidPose best_pose;
  auto consider = [&](const PointMask& subset, const RigidPose& start) {
    PnPResult fit;
    try {
      fit = refine_lm(cam, model, image, start, subset);
    } catch (const Error&) {
      return;
    }
    PointMask inliers{};
    int count = 0;
    double residual = 0.0;
    for (std::size_t i = 0; i < inliers.size(); ++i) {
      inliers[i] = fit.per_point_residuals[i] < cfg.inlier_threshold;
      if (inliers[i]) {
        ++count;
        residual += fit.per_point_residuals[i];
      }
    }
    if (count > best_count || (count == best_count && residual < best_residual)) {
      best_count = count;
      best_residual = residual;
      best_mask = inliers;
      best_pose = fit.pose;
    }
  };
  for (const PointMask& subset : keypoint_subsets(cfg.subset_size)) {
    consider(subset, init);
    try {
      consider(subset, similarity_init(cam, model, image, subset));
    } catch (const Error&) {
    }
  }
  if (best_count < cfg.min_inliers)
    throw Error(Errc::NoConsensus, "best subset has " + std::to_string(std::max(best_count, 0)) + " inliers");
  return refine_lm(cam, model, image, best_pose, best_mask);
}

}  // namespace conepose
