#pragma once

// Synthetic ground truth: cone scenes, procedural cone patches with exact
// keypoint annotations, simulated detector boxes and box perturbation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/error.hpp"
#include "conepose/geometry.hpp"
#include "conepose/patch.hpp"
#include "conepose/random.hpp"
#include "conepose/binary_io.hpp"

namespace conepose {

struct PlacedCone {
  ConeGeometry geometry;
  Point3 position = Point3::Zero();  // base center, camera frame
};

struct ScenePlan {
  std::vector<PlacedCone> cones;
  CameraModel camera;
  std::uint64_t seed = 0;
};

struct SceneOptions {
  double mount_height = 0.5;  // camera-frame y of the ground plane, meters
  double margin_px = 20.0;    // keep base centers this far inside the frame
};

namespace detail {

/// Lateral range [lo, hi] of base-center x at depth z that stays in frame.
inline std::pair<double, double> lateral_extent(const CameraModel& cam, double z, double margin_px) {
  return {(margin_px - cam.cx) * z / cam.fx, (cam.width - margin_px - cam.cx) * z / cam.fx};
}

inline void check_frustum(const CameraModel& cam, double range_min, const ConeGeometry& g, const SceneOptions& opt) {
  const auto [lo, hi] = lateral_extent(cam, range_min, opt.margin_px);
  const double base_v = cam.cy + cam.fy * opt.mount_height / range_min;
  const double apex_v = cam.cy + cam.fy * (opt.mount_height - g.height) / range_min;
  if (!(hi > lo) || base_v >= cam.height - opt.margin_px || apex_v < opt.margin_px)
    throw Error(Errc::InfeasibleFrustum, "no cone placement fits the frame at range_min");
}

}  // namespace detail

/// Uniformly placed cones with z in [range_min, range_max] and x inside the
/// frustum at that depth.
inline ScenePlan generate_scene(double range_min, double range_max, int n_cones, const CameraModel& cam,
                                const ConeGeometry& g, std::uint64_t seed, const SceneOptions& opt = {}) {
  if (!(range_min > 0.0 && range_min < range_max)) throw Error(Errc::InvalidArgument, "need 0 < range_min < range_max");
  if (n_cones < 1) throw Error(Errc::InvalidArgument, "need at least one cone");
  cam.validate();
  g.validate();
  detail::check_frustum(cam, range_min, g, opt);
  ScenePlan plan;
  plan.camera = cam;
  plan.seed = seed;
  Rng rng(mix_seed(seed, 0x5ce7e));
  for (int i = 0; i < n_cones; ++i) {
    const double z = rng.uniform(range_min, range_max);
    const auto [lo, hi] = detail::lateral_extent(cam, z, opt.margin_px);
    const double x = rng.uniform(lo, hi);
    plan.cones.push_back({g, Point3(x, opt.mount_height, z)});
  }
  return plan;
}

/// Tight box around the projected keypoints, dilated by `margin_frac` of its
/// width and height on every side.
inline BBox keypoint_bbox(const KeypointSet& image_kps, double margin_frac) {
  double x0 = image_kps[0].x(), x1 = x0, y0 = image_kps[0].y(), y1 = y0;
  for (const auto& p : image_kps.points) {
    x0 = std::min(x0, p.x());
    x1 = std::max(x1, p.x());
    y0 = std::min(y0, p.y());
    y1 = std::max(y1, p.y());
  }
  const double w = x1 - x0;
  const double h = y1 - y0;
  return {x0 - margin_frac * w, y0 - margin_frac * h, w * (1.0 + 2.0 * margin_frac), h * (1.0 + 2.0 * margin_frac)};
}

inline bool overlaps_frame(const CameraModel& cam, const BBox& b) {
  return b.right() > 0.0 && b.x < cam.width && b.bottom() > 0.0 && b.y < cam.height;
}

inline BBox simulate_detection(const CameraModel& cam, const Point3& position, const ConeGeometry& g,
                               double margin_frac = 0.15) {
  KeypointSet kps;
  try {
    kps = project_cone(cam, position, g);
  } catch (const Error& e) {
    throw Error(Errc::OutOfFrame, std::string("cone not in front of camera: ") + e.what());
  }
  const BBox b = keypoint_bbox(kps, margin_frac);
  if (!overlaps_frame(cam, b)) throw Error(Errc::OutOfFrame, "cone projects outside the image");
  return b;
}

/// Moves each edge independently by U[-pct, pct] times the box height
/// (top/bottom) or width (left/right).
inline BBox perturb_bbox(const BBox& b, double pct, std::uint64_t seed) {
  if (!(pct >= 0.0 && pct <= 0.5)) throw Error(Errc::InvalidArgument, "perturbation must be in [0, 0.5]");
  if (pct == 0.0) return b;
  Rng rng(mix_seed(seed, 0xb0c5));
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double left = b.x + rng.uniform(-pct, pct) * b.w;
    const double right = b.right() + rng.uniform(-pct, pct) * b.w;
    const double top = b.y + rng.uniform(-pct, pct) * b.h;
    const double bottom = b.bottom() + rng.uniform(-pct, pct) * b.h;
    if (right > left && bottom > top) return {left, top, right - left, bottom - top};
  }
  throw Error(Errc::CollapsedBox, "perturbed box collapsed in 10 attempts");
}

struct RenderOptions {
  double margin_frac = 0.15;
  double min_apparent_height = 8.0;  // px
  bool augment = false;
  double max_rotation_deg = 10.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translation_px = 4.0;
  double pixel_noise_max = 0.05;
  double brightness_jitter = 0.2;
  double saturation_jitter = 0.3;
  double clutter = 1.0;
  int supersample = 2;
};

namespace detail {

struct Rgb {
  double r, g, b;
};

inline std::array<Rgb, 3> band_colors(ColorClass c) {
  constexpr Rgb yellow{0.95, 0.80, 0.10}, black{0.08, 0.08, 0.08}, blue{0.10, 0.25, 0.80},
      white{0.95, 0.95, 0.95}, orange{1.00, 0.45, 0.05};
  switch (c) {
    case ColorClass::yellow: return {yellow, black, yellow};
    case ColorClass::blue: return {blue, white, blue};
    case ColorClass::orange: return {orange, white, orange};
  }
  return {yellow, black, yellow};
}

/// Smooth lattice noise in [0, 1] anchored to image coordinates, so the same
/// background shows through any crop.
inline double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double gx = x / cell, gy = y / cell;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  auto lattice = [&](std::int64_t a, std::int64_t b) {
    const std::uint64_t h = mix_seed(seed, static_cast<std::uint64_t>(a) * 0x9E3779B1ull ^ static_cast<std::uint64_t>(b) * 0x85EBCA77ull);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  };
  const double tx = gx - fx, ty = gy - fy;
  const double sx = tx * tx * (3.0 - 2.0 * tx), sy = ty * ty * (3.0 - 2.0 * ty);
  const double top = lattice(ix, iy) * (1.0 - sx) + lattice(ix + 1, iy) * sx;
  const double bot = lattice(ix, iy + 1) * (1.0 - sx) + lattice(ix + 1, iy + 1) * sx;
  return top * (1.0 - sy) + bot * sy;
}

/// Signed side of q relative to the directed line a->b (positive to the left
/// in image coordinates).
inline double side(const Point2& a, const Point2& b, const Point2& q) {
  return (b.x() - a.x()) * (q.y() - a.y()) - (b.y() - a.y()) * (q.x() - a.x());
}

struct Silhouette {
  KeypointSet kps;  // image frame
  std::array<Rgb, 3> colors;
  double orientation;  // sign making the triangle interior positive

  explicit Silhouette(const KeypointSet& image_kps, ColorClass color)
      : kps(image_kps), colors(band_colors(color)), orientation(side(kps[0], kps[3], kps[6]) >= 0 ? 1.0 : -1.0) {}

  /// -1 outside the cone, otherwise the stripe band 0 (top), 1, 2 (bottom).
  int classify(const Point2& q) const {
    const double s = orientation;
    if (s * side(kps[0], kps[3], q) < 0.0 || s * side(kps[3], kps[6], q) < 0.0 || s * side(kps[6], kps[0], q) < 0.0)
      return -1;
    // The apex lies on the positive side of each stripe line oriented left to right.
    const double upper = side(kps[1], kps[4], q) * side(kps[1], kps[4], kps[0]);
    if (upper > 0.0) return 0;
    const double lower = side(kps[2], kps[5], q) * side(kps[2], kps[5], kps[0]);
    return lower > 0.0 ? 1 : 2;
  }
};

}  // namespace detail

/// Renders a cone patch for an explicit camera<-model pose and crop box.
/// Keypoints are exact projections mapped into the patch frame; they may fall
/// outside [0, 80) for truncated or augmented crops.
inline PatchSample render_patch_posed(const CameraModel& cam, const RigidPose& pose, const ConeGeometry& g,
                                      const BBox& bbox, std::uint64_t photometric_seed, const RenderOptions& opt = {}) {
  if (!(bbox.w > 0.0 && bbox.h > 0.0)) throw Error(Errc::InvalidArgument, "crop box must have positive size");
  const ModelPoints model = canonical_keypoints(g);
  KeypointSet image_kps;
  image_kps.frame = KeypointFrame::image;
  for (int i = 0; i < kNumKeypoints; ++i) image_kps[i] = cam.project(pose.apply(model[static_cast<std::size_t>(i)]));
  if (apparent_height(image_kps) < opt.min_apparent_height)
    throw Error(Errc::TooSmall, "apparent height " + std::to_string(apparent_height(image_kps)) + " px");

  Rng rng(mix_seed(photometric_seed, 0x9a7c));
  const double center = 0.5 * kPatchSize;
  double scale = 1.0, angle = 0.0, tx = 0.0, ty = 0.0;
  if (opt.augment) {
    angle = rng.uniform(-opt.max_rotation_deg, opt.max_rotation_deg) * std::numbers::pi / 180.0;
    scale = rng.uniform(opt.min_scale, opt.max_scale);
    tx = rng.uniform(-opt.max_translation_px, opt.max_translation_px);
    ty = rng.uniform(-opt.max_translation_px, opt.max_translation_px);
  }
  const double ca = std::cos(angle), sa = std::sin(angle);
  // Forward: crop frame -> augmented patch frame.
  auto augment = [&](const Point2& p) -> Point2 {
    const double dx = p.x() - center, dy = p.y() - center;
    return {center + scale * (ca * dx - sa * dy) + tx, center + scale * (sa * dx + ca * dy) + ty};
  };
  auto unaugment = [&](const Point2& p) -> Point2 {
    const double dx = (p.x() - center - tx) / scale, dy = (p.y() - center - ty) / scale;
    return {center + ca * dx + sa * dy, center - sa * dx + ca * dy};
  };

  PatchSample out;
  out.bbox = bbox;
  out.position = pose.translation;
  out.color = g.color;
  out.keypoints.frame = KeypointFrame::patch;
  for (int i = 0; i < kNumKeypoints; ++i) out.keypoints[i] = augment(image_to_patch(bbox, image_kps[i]));

  const detail::Silhouette cone(image_kps, g.color);
  const std::uint64_t bg_seed = mix_seed(photometric_seed, 0xb6);
  const double tint = rng.uniform(-0.05, 0.05);
  const double base_gray = rng.uniform(0.3, 0.55);
  const double noise_sigma = rng.uniform(0.0, opt.pixel_noise_max);
  const double brightness = 1.0 + rng.uniform(-opt.brightness_jitter, opt.brightness_jitter);
  const double saturation = 1.0 + rng.uniform(-opt.saturation_jitter, opt.saturation_jitter);
  const int ss = std::max(1, opt.supersample);

  for (int v = 0; v < kPatchSize; ++v) {
    for (int u = 0; u < kPatchSize; ++u) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const Point2 pp(u + (sx + 0.5) / ss, v + (sy + 0.5) / ss);
          const Point2 q = patch_to_image(bbox, unaugment(pp));
          detail::Rgb c{0.0, 0.0, 0.0};
          if (cam.contains(q)) {
            const int band = cone.classify(q);
            if (band >= 0) {
              c = cone.colors[static_cast<std::size_t>(band)];
            } else {
              const double n = 0.65 * detail::value_noise(bg_seed, q.x(), q.y(), 24.0) +
                               0.35 * detail::value_noise(bg_seed ^ 0xfeed, q.x(), q.y(), 6.0);
              const double gray = base_gray + opt.clutter * 0.3 * (n - 0.5);
              c = {gray + tint, gray, gray - tint};
            }
          }
          acc[0] += c.r;
          acc[1] += c.g;
          acc[2] += c.b;
        }
      }
      const double inv = 1.0 / (ss * ss);
      double r = acc[0] * inv, gch = acc[1] * inv, b = acc[2] * inv;
      const double luma = 0.299 * r + 0.587 * gch + 0.114 * b;
      r = luma + saturation * (r - luma);
      gch = luma + saturation * (gch - luma);
      b = luma + saturation * (b - luma);
      const double rgb[3] = {r, gch, b};
      for (int ch = 0; ch < 3; ++ch) {
        const double val = brightness * rgb[ch] + noise_sigma * rng.normal();
        out.patch.at(v, u, ch) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return out;
}

/// Renders an upright camera-facing cone at `position`, cropped by `bbox`.
inline PatchSample render_patch(const CameraModel& cam, const Point3& position, const ConeGeometry& g,
                                const BBox& bbox, std::uint64_t photometric_seed, const RenderOptions& opt = {}) {
  return render_patch_posed(cam, facing_pose(position), g, bbox, photometric_seed, opt);
}

/// Renders with the simulated detector box.
inline PatchSample render_patch(const CameraModel& cam, const Point3& position, const ConeGeometry& g,
                                std::uint64_t photometric_seed, const RenderOptions& opt = {}) {
  const KeypointSet kps = project_cone(cam, position, g);
  if (apparent_height(kps) < opt.min_apparent_height)
    throw Error(Errc::TooSmall, "apparent height " + std::to_string(apparent_height(kps)) + " px");
  const BBox bbox = simulate_detection(cam, position, g, opt.margin_frac);
  return render_patch(cam, position, g, bbox, photometric_seed, opt);
}

struct DatasetOptions {
  double range_min = 4.0;
  double range_max = 16.0;
  bool mixed_colors = true;
  SceneOptions scene;
  RenderOptions render;
};

/// `count` independent samples; sample i depends only on (seed, i).
inline std::vector<PatchSample> generate_dataset(std::size_t count, const CameraModel& cam, const ConeGeometry& g,
                                                 std::uint64_t seed, const DatasetOptions& opt = {}) {
  detail::check_frustum(cam, opt.range_min, g, opt.scene);
  std::vector<PatchSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    const double z = rng.uniform(opt.range_min, opt.range_max);
    const auto [lo, hi] = detail::lateral_extent(cam, z, opt.scene.margin_px);
    const Point3 position(rng.uniform(lo, hi), opt.scene.mount_height, z);
    ConeGeometry cone = g;
    if (opt.mixed_colors) cone.color = static_cast<ColorClass>(rng.below(3));
    out.push_back(render_patch(cam, position, cone, rng.next_u64(), opt.render));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file: "CPDS", u32 version, u64 count, u32 patch size, then per
// sample the patch (size*size*3 f32), 14 f64 keypoints, 3 f64 position, u8
// color class and the box as 4 f64. All little-endian.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, std::span<const PatchSample> samples) {
  if (samples.empty()) throw Error(Errc::EmptyDataset, "refusing to write an empty dataset");
  const int size = samples.front().patch.size;
  os.write("CPDS", 4);
  detail::write_le<std::uint32_t>(os, kDatasetVersion);
  detail::write_le<std::uint64_t>(os, samples.size());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(size));
  for (const auto& s : samples) {
    if (s.patch.size != size) throw Error(Errc::ShapeMismatch, "mixed patch sizes");
    for (float v : s.patch.data) detail::write_le<float>(os, v);
    for (int k = 0; k < kNumKeypoints; ++k) {
      detail::write_le<double>(os, s.keypoints[k].x());
      detail::write_le<double>(os, s.keypoints[k].y());
    }
    for (int k = 0; k < 3; ++k) detail::write_le<double>(os, s.position(k));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(s.color));
    detail::write_le<double>(os, s.bbox.x);
    detail::write_le<double>(os, s.bbox.y);
    detail::write_le<double>(os, s.bbox.w);
    detail::write_le<double>(os, s.bbox.h);
  }
}

inline std::vector<PatchSample> read_dataset(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CPDS", 4) != 0) throw Error(Errc::CorruptFile, "bad dataset magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kDatasetVersion) throw Error(Errc::VersionMismatch, "dataset version " + std::to_string(version));
  const auto count = detail::read_le<std::uint64_t>(is);
  const auto size = detail::read_le<std::uint32_t>(is);
  if (size == 0 || size > 4096) throw Error(Errc::CorruptFile, "implausible patch size");
  std::vector<PatchSample> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    PatchSample s;
    s.patch = Patch(static_cast<int>(size));
    for (float& v : s.patch.data) v = detail::read_le<float>(is);
    s.keypoints.frame = KeypointFrame::patch;
    for (int k = 0; k < kNumKeypoints; ++k) {
      const double x = detail::read_le<double>(is);
      const double y = detail::read_le<double>(is);
      s.keypoints[k] = {x, y};
    }
    for (int k = 0; k < 3; ++k) s.position(k) = detail::read_le<double>(is);
    const auto color = detail::read_le<std::uint8_t>(is);
    if (color > 2) throw Error(Errc::CorruptFile, "unknown color class");
    s.color = static_cast<ColorClass>(color);
    s.bbox.x = detail::read_le<double>(is);
    s.bbox.y = detail::read_le<double>(is);
    s.bbox.w = detail::read_le<double>(is);
    s.bbox.h = detail::read_le<double>(is);
    out.push_back(std::move(s));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw Error(Errc::CorruptFile, "trailing bytes after samples");
  return out;
}

inline void save_dataset(const std::string& path, std::span<const PatchSample> samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::InvalidArgument, "cannot open " + path + " for writing");
  write_dataset(os, samples);
  if (!os) throw Error(Errc::InvalidArgument, "failed writing " + path);
}

inline std::vector<PatchSample> load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::CorruptFile, "cannot open " + path);
  return read_dataset(is);
}

}  // namespace conepose
