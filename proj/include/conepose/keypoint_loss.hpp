#pragma once

// Keypoint regression loss: squared coordinate error plus a penalty pulling
// the cross-ratio of each predicted cone arm towards the value measured on
// the physical cone.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>

#include "conepose/cone_model.hpp"

namespace conepose {

using Vec14 = Eigen::Matrix<double, 14, 1>;

/// Distances below this floor are clamped (and contribute no gradient) so a
/// collapsed prediction early in training cannot produce Inf/NaN.
inline constexpr double kLossDistanceFloor = 1e-6;

/// Keypoint indices of the two arms, apex first.
inline constexpr std::array<int, 4> kLeftArm{0, 1, 2, 3};
inline constexpr std::array<int, 4> kRightArm{0, 4, 5, 6};

struct ArmCrossRatio {
  double value = 0.0;
  Vec14 gradient = Vec14::Zero();  // d value / d prediction
};

inline ArmCrossRatio guarded_cross_ratio(const Vec14& v, const std::array<int, 4>& arm) {
  auto point = [&](int k) { return Eigen::Vector2d(v(2 * arm[k]), v(2 * arm[k] + 1)); };
  struct Edge {
    int i, j;
    double length;
    Eigen::Vector2d unit;  // d length / d p_i
  };
  auto edge = [&](int i, int j) {
    const Eigen::Vector2d d = point(i) - point(j);
    const double n = d.norm();
    if (n < kLossDistanceFloor) return Edge{i, j, kLossDistanceFloor, Eigen::Vector2d::Zero()};
    return Edge{i, j, n, d / n};
  };
  // Cr = (d13 d24) / (d14 d23), zero-based here.
  const Edge e13 = edge(0, 2), e24 = edge(1, 3), e14 = edge(0, 3), e23 = edge(1, 2);
  ArmCrossRatio out;
  out.value = (e13.length * e24.length) / (e14.length * e23.length);
  auto accumulate = [&](const Edge& e, double sign) {
    // d log Cr = sum(sign * d length / length)
    const Eigen::Vector2d g = sign * out.value / e.length * e.unit;
    out.gradient.segment<2>(2 * arm[e.i]) += g;
    out.gradient.segment<2>(2 * arm[e.j]) -= g;
  };
  accumulate(e13, 1.0);
  accumulate(e24, 1.0);
  accumulate(e14, -1.0);
  accumulate(e23, -1.0);
  return out;
}

inline double keypoint_loss(const Vec14& pred, const Vec14& gt, double gamma, double cr3d) {
  double loss = (pred - gt).squaredNorm();
  if (gamma != 0.0) {
    const double left = guarded_cross_ratio(pred, kLeftArm).value - cr3d;
    const double right = guarded_cross_ratio(pred, kRightArm).value - cr3d;
    loss += gamma * (left * left + right * right);
  }
  return loss;
}

inline Vec14 keypoint_loss_gradient(const Vec14& pred, const Vec14& gt, double gamma, double cr3d) {
  Vec14 grad = 2.0 * (pred - gt);
  if (gamma != 0.0) {
    for (const auto& arm : {kLeftArm, kRightArm}) {
      const ArmCrossRatio cr = guarded_cross_ratio(pred, arm);
      grad += 2.0 * gamma * (cr.value - cr3d) * cr.gradient;
    }
  }
  return grad;
}

}  // namespace conepose
