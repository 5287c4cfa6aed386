#pragma once

// Experiment harness: depth accuracy sweep, bounding-box perturbation,
// keypoint-noise sensitivity and a paired mono/stereo comparison. Every
// trial draws from its own derived seed and rows come out sorted by bin,
// then trial.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "conepose/config.hpp"
#include "conepose/geometry.hpp"
#include "conepose/pipeline.hpp"
#include "conepose/pnp.hpp"
#include "conepose/random.hpp"
#include "conepose/stereo.hpp"
#include "conepose/synthetic.hpp"

namespace conepose {

inline double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Unbiased sample variance; 0 for fewer than two values.
inline double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

/// Ranks starting at 1, ties sharing their average rank.
inline std::vector<double> ranks_of(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw Error(Errc::InvalidArgument, "need two equal-length samples");
  const std::vector<double> ra = ranks_of(a), rb = ranks_of(b);
  const double ma = mean_of(ra), mb = mean_of(rb);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline PipelineOptions pipeline_options(const RunConfig& cfg) {
  PipelineOptions opt;
  opt.model = cfg.cone;
  opt.ransac = cfg.ransac;
  opt.render.pixel_noise_max = cfg.noise.pixel_noise_max;
  opt.render.augment = false;
  return opt;
}

struct TrialSkip {
  int bin = 0;
  int trial = 0;
  Errc reason = Errc::InvalidArgument;
};

inline void write_trial_skips_csv(std::ostream& os, const std::vector<TrialSkip>& skips) {
  CsvWriter csv(os, {"bin", "trial", "reason"});
  for (const auto& s : skips) {
    csv.field(s.bin).field(s.trial).field(to_string(s.reason));
    csv.end_row();
  }
}

namespace detail {

/// Base position at depth z with a seeded lateral offset that keeps the
/// detection well inside the frame.
inline Point3 random_cone_position(const CameraModel& cam, double z, double mount_height, Rng& rng) {
  const auto [lo, hi] = lateral_extent(cam, z, 0.25 * cam.width);
  return {rng.uniform(lo, hi), mount_height, z};
}

inline KeypointSet add_keypoint_noise(KeypointSet kps, double sigma_x, double sigma_y, Rng& rng) {
  for (auto& p : kps.points) {
    const double nx = rng.normal(), ny = rng.normal();
    p.x() += sigma_x * nx;
    p.y() += sigma_y * ny;
  }
  return kps;
}

inline std::vector<double> depth_bins(const ExperimentConfig& x) {
  std::vector<double> out;
  for (int k = 0;; ++k) {
    const double z = x.depth_min + k * x.depth_step;
    if (z > x.depth_max + 1e-9) break;
    out.push_back(z);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct DepthRow {
  int bin = 0;
  int trial = 0;
  double true_z = 0.0;
  double est_z = 0.0;
  double abs_error = 0.0;
  double rel_error = 0.0;
};

struct DepthAccuracyResult {
  std::vector<DepthRow> rows;
  std::vector<TrialSkip> skipped;
  std::vector<double> bin_z;
  std::vector<double> bin_mean_abs_error;
  QuadraticFit fit;  // abs_error against true_z
  double spearman = 0.0;
};

/// Sweeps the cone depth over the configured bins. With a predictor, patches
/// are rendered and regressed; without one the exact projections are used
/// with Gaussian noise of noise.keypoint_sigma_px added.
inline DepthAccuracyResult exp_depth_accuracy(const RunConfig& cfg, const KeypointPredictor* predict = nullptr) {
  const PipelineOptions opt = pipeline_options(cfg);
  const SceneOptions scene;
  DepthAccuracyResult out;
  out.bin_z = detail::depth_bins(cfg.experiment);
  for (std::size_t b = 0; b < out.bin_z.size(); ++b) {
    const double z = out.bin_z[b];
    std::vector<double> errors;
    for (int t = 0; t < cfg.experiment.cones_per_bin; ++t) {
      Rng rng(mix_seed(mix_seed(cfg.seed ^ 0xde9, b), static_cast<std::uint64_t>(t)));
      const Point3 pos = detail::random_cone_position(cfg.camera, z, scene.mount_height, rng);
      try {
        KeypointSet kps;
        if (predict) {
          const PatchSample s = render_patch(cfg.camera, pos, cfg.cone, rng.next_u64(), opt.render);
          kps = predict_image_keypoints(*predict, s);
        } else {
          const double sigma = cfg.noise.keypoint_sigma_px;
          kps = detail::add_keypoint_noise(project_cone(cfg.camera, pos, cfg.cone), sigma, sigma, rng);
        }
        const PnPResult r = solve_cone(cfg.camera, kps, opt.model, opt.ransac);
        const double err = std::abs(r.position.z() - z);
        out.rows.push_back({static_cast<int>(b), t, z, r.position.z(), err, err / z});
        errors.push_back(err);
      } catch (const Error& e) {
        out.skipped.push_back({static_cast<int>(b), t, e.code()});
      }
    }
    out.bin_mean_abs_error.push_back(mean_of(errors));
  }
  std::vector<double> zs, es;
  for (const auto& r : out.rows) {
    zs.push_back(r.true_z);
    es.push_back(r.abs_error);
  }
  if (zs.size() >= 3) out.fit = fit_quadratic(zs, es);
  if (out.bin_z.size() >= 2) out.spearman = spearman_rho(out.bin_z, out.bin_mean_abs_error);
  return out;
}

inline void write_depth_csv(std::ostream& os, const DepthAccuracyResult& r) {
  CsvWriter csv(os, {"bin", "trial", "true_z", "est_z", "abs_error", "rel_error"});
  for (const auto& row : r.rows) {
    csv.field(row.bin).field(row.trial).field(row.true_z).field(row.est_z).field(row.abs_error).field(row.rel_error);
    csv.end_row();
  }
}

inline void write_depth_fit_csv(std::ostream& os, const DepthAccuracyResult& r) {
  CsvWriter csv(os, {"a", "b", "c", "spearman_rho"});
  csv.field(r.fit.a).field(r.fit.b).field(r.fit.c).field(r.spearman);
  csv.end_row();
}

// ---------------------------------------------------------------------------

struct BboxRow {
  double level = 0.0;
  double true_z = 0.0;
  double depth_variance = 0.0;
  double depth_mean = 0.0;
  int valid_trials = 0;
};

struct BboxPerturbationResult {
  std::vector<BboxRow> rows;  // sorted by depth, then level
  std::vector<TrialSkip> skipped;

  const BboxRow* find(double level, double z) const {
    for (const auto& r : rows)
      if (std::abs(r.level - level) < 1e-12 && std::abs(r.true_z - z) < 1e-12) return &r;
    return nullptr;
  }
};

/// For every configured depth the same cone is rendered through perturbed
/// boxes. Trial t draws the same unit edge offsets at every level, so the
/// levels differ only in amplitude.
inline BboxPerturbationResult exp_bbox_perturbation(const RunConfig& cfg, const KeypointPredictor& predict) {
  const PipelineOptions opt = pipeline_options(cfg);
  const SceneOptions scene;
  BboxPerturbationResult out;
  for (std::size_t d = 0; d < cfg.experiment.bbox_depths.size(); ++d) {
    const double z = cfg.experiment.bbox_depths[d];
    const Point3 pos(0.0, scene.mount_height, z);
    const std::uint64_t depth_seed = mix_seed(cfg.seed ^ 0xbb0, d);
    const BBox detected = simulate_detection(cfg.camera, pos, cfg.cone, opt.render.margin_frac);
    for (double level : cfg.noise.bbox_levels) {
      std::vector<double> depths;
      for (int t = 0; t < cfg.experiment.bbox_trials; ++t) {
        try {
          BBox box;
          for (int attempt = 0;; ++attempt) {
            try {
              box = perturb_bbox(detected, level, mix_seed(depth_seed, static_cast<std::uint64_t>(t) + 7919ull * attempt));
              break;
            } catch (const Error& e) {
              if (e.code() != Errc::CollapsedBox || attempt >= 10) throw;
            }
          }
          const PatchSample s = render_patch(cfg.camera, pos, cfg.cone, box, depth_seed, opt.render);
          const PnPResult r = solve_cone(cfg.camera, predict_image_keypoints(predict, s), opt.model, opt.ransac);
          depths.push_back(r.position.z());
        } catch (const Error& e) {
          out.skipped.push_back({static_cast<int>(d), t, e.code()});
        }
      }
      out.rows.push_back({level, z, variance_of(depths), mean_of(depths), static_cast<int>(depths.size())});
    }
  }
  return out;
}

inline void write_bbox_csv(std::ostream& os, const BboxPerturbationResult& r) {
  CsvWriter csv(os, {"level", "true_z", "depth_variance", "depth_mean", "valid_trials"});
  for (const auto& row : r.rows) {
    csv.field(row.level).field(row.true_z).field(row.depth_variance).field(row.depth_mean).field(row.valid_trials);
    csv.end_row();
  }
}

// ---------------------------------------------------------------------------

struct KpVarianceRow {
  int cone_id = 0;
  double x = 0.0;
  double z = 0.0;
  double var_x_px2 = 0.0;  // measured variance of the injected x noise
  double var_y_px2 = 0.0;
  double depth_var_xnoise = 0.0;
  double depth_var_ynoise = 0.0;
};

/// Twelve placements: four depths by three lateral offsets.
inline std::vector<Point3> kp_variance_placements(double mount_height = SceneOptions{}.mount_height) {
  std::vector<Point3> out;
  for (double z : {4.0, 7.0, 10.0, 13.0})
    for (double x : {-1.5, 0.0, 1.5}) out.emplace_back(x, mount_height, z);
  return out;
}

/// Noise of equal variance goes into the x coordinates only, then into the
/// y coordinates only, reusing the same draws; each noisy set is solved by LM
/// from its own depth initialization.
inline std::vector<KpVarianceRow> exp_kp_variance(const RunConfig& cfg, double sigma_px) {
  std::vector<KpVarianceRow> out;
  const ModelPoints model = canonical_keypoints(cfg.cone);
  const auto placements = kp_variance_placements();
  for (std::size_t c = 0; c < placements.size(); ++c) {
    const Point3& pos = placements[c];
    const KeypointSet exact = project_cone(cfg.camera, pos, cfg.cone);
    std::vector<double> zx, zy, nx, ny;
    for (int t = 0; t < cfg.experiment.kp_trials; ++t) {
      Rng rng(mix_seed(mix_seed(cfg.seed ^ 0x4b5, c), static_cast<std::uint64_t>(t)));
      std::array<double, kNumKeypoints> draws{};
      for (auto& v : draws) v = sigma_px * rng.normal();
      KeypointSet kx = exact, ky = exact;
      for (int i = 0; i < kNumKeypoints; ++i) {
        kx[i].x() += draws[static_cast<std::size_t>(i)];
        ky[i].y() += draws[static_cast<std::size_t>(i)];
        nx.push_back(draws[static_cast<std::size_t>(i)]);
      }
      zx.push_back(refine_lm(cfg.camera, model, kx.points, depth_init(cfg.camera, kx, cfg.cone)).position.z());
      zy.push_back(refine_lm(cfg.camera, model, ky.points, depth_init(cfg.camera, ky, cfg.cone)).position.z());
    }
    ny = nx;
    out.push_back({static_cast<int>(c), pos.x(), pos.z(), variance_of(nx), variance_of(ny), variance_of(zx),
                   variance_of(zy)});
  }
  return out;
}

inline void write_kp_variance_csv(std::ostream& os, const std::vector<KpVarianceRow>& rows) {
  CsvWriter csv(os, {"cone_id", "x", "z", "var_x_px2", "var_y_px2", "depth_var_xnoise", "depth_var_ynoise"});
  for (const auto& r : rows) {
    csv.field(r.cone_id).field(r.x).field(r.z).field(r.var_x_px2).field(r.var_y_px2);
    csv.field(r.depth_var_xnoise).field(r.depth_var_ynoise);
    csv.end_row();
  }
}

// ---------------------------------------------------------------------------

struct StereoRow {
  int trial = 0;
  double true_x = 0.0;
  double true_z = 0.0;
  double mono_z = 0.0;
  double stereo_z = 0.0;
  bool propagated_box_covers = false;
};

struct StereoEvalResult {
  std::vector<StereoRow> rows;
  std::vector<TrialSkip> skipped;
  double mono_mean_abs_error = 0.0;
  double stereo_mean_abs_error = 0.0;
};

/// Paired comparison on identical noisy frames: mono PnP on the left
/// keypoints against triangulation of both views.
inline StereoEvalResult exp_stereo_eval(const RunConfig& cfg, double sigma_px, double z_min, double z_max) {
  const StereoRig rig = StereoRig::horizontal(cfg.camera, cfg.stereo.baseline);
  const SceneOptions scene;
  StereoEvalResult out;
  std::vector<double> mono_err, stereo_err;
  for (int t = 0; t < cfg.experiment.stereo_trials; ++t) {
    Rng rng(mix_seed(cfg.seed ^ 0x57e, static_cast<std::uint64_t>(t)));
    const double z = z_min == z_max ? z_min : rng.uniform(z_min, z_max);
    const Point3 pos = detail::random_cone_position(cfg.camera, z, scene.mount_height, rng);
    try {
      const KeypointSet exact_l = project_cone(rig.left, pos, cfg.cone);
      const KeypointSet exact_r = project_cone_right(rig, pos, cfg.cone);
      const KeypointSet kl = detail::add_keypoint_noise(exact_l, sigma_px, sigma_px, rng);
      const KeypointSet kr = detail::add_keypoint_noise(exact_r, sigma_px, sigma_px, rng);
      const PnPResult mono = solve_cone(rig.left, kl, cfg.cone, cfg.ransac);
      const Point3 st = stereo_refine(rig, kl, kr, cfg.cone);
      const BBox left_box = simulate_detection(rig.left, pos, cfg.cone);
      const BBox right_box = propagate_bbox(rig, mono.position, left_box, cfg.cone);
      bool covers = true;
      for (const auto& p : exact_r.points) covers = covers && right_box.contains(p);
      out.rows.push_back({t, pos.x(), z, mono.position.z(), st.z(), covers});
      mono_err.push_back(std::abs(mono.position.z() - z));
      stereo_err.push_back(std::abs(st.z() - z));
    } catch (const Error& e) {
      out.skipped.push_back({0, t, e.code()});
    }
  }
  out.mono_mean_abs_error = mean_of(mono_err);
  out.stereo_mean_abs_error = mean_of(stereo_err);
  return out;
}

inline void write_stereo_csv(std::ostream& os, const StereoEvalResult& r) {
  CsvWriter csv(os, {"trial", "true_x", "true_z", "mono_z", "stereo_z", "propagated_box_covers"});
  for (const auto& row : r.rows) {
    csv.field(row.trial).field(row.true_x).field(row.true_z).field(row.mono_z).field(row.stereo_z);
    csv.field(row.propagated_box_covers ? 1 : 0);
    csv.end_row();
  }
}

}  // namespace conepose
