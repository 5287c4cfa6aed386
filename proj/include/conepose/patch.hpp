#pragma once

#include <cstddef>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/geometry.hpp"

namespace conepose {

inline constexpr int kPatchSize = 80;

/// Square RGB patch, interleaved row-major (y, x, channel), values in [0, 1].
struct Patch {
  int size = kPatchSize;
  std::vector<float> data = std::vector<float>(static_cast<std::size_t>(kPatchSize) * kPatchSize * 3, 0.0f);

  Patch() = default;
  explicit Patch(int n) : size(n), data(static_cast<std::size_t>(n) * n * 3, 0.0f) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * size + x) * 3 + c]; }

  bool operator==(const Patch&) const = default;
};

/// Axis-aligned box in image pixels; (x, y) is the top-left corner.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  Point2 center() const { return {x + 0.5 * w, y + 0.5 * h}; }
  bool contains(const Point2& p) const { return p.x() >= x && p.x() <= right() && p.y() >= y && p.y() <= bottom(); }

  bool operator==(const BBox&) const = default;
};

/// Patch-frame coordinates of an image point for a crop of `box` resampled
/// to `size` x `size`.
inline Point2 image_to_patch(const BBox& box, const Point2& p, int size = kPatchSize) {
  return {(p.x() - box.x) * size / box.w, (p.y() - box.y) * size / box.h};
}

inline Point2 patch_to_image(const BBox& box, const Point2& p, int size = kPatchSize) {
  return {box.x + p.x() * box.w / size, box.y + p.y() * box.h / size};
}

inline KeypointSet patch_to_image(const BBox& box, const KeypointSet& kps, int size = kPatchSize) {
  KeypointSet out;
  out.frame = KeypointFrame::image;
  for (int i = 0; i < kNumKeypoints; ++i) out[i] = patch_to_image(box, kps[i], size);
  return out;
}

struct PatchSample {
  Patch patch;
  KeypointSet keypoints;  // patch frame
  BBox bbox;
  Point3 position = Point3::Zero();
  ColorClass color = ColorClass::yellow;
};

}  // namespace conepose
