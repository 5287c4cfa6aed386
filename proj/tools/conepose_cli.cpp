// conepose command-line driver: dataset synthesis, training, evaluation,
// per-frame estimation and the experiment harness.
//
// Exit codes: 0 success, 1 usage, 2 configuration error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "conepose/conepose.hpp"

namespace fs = std::filesystem;
using namespace conepose;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string model;
};

struct ConfigFailure {
  std::string message;
};

RunConfig load_config(const Options& o) {
  try {
    RunConfig cfg = RunConfig::load(o.config);
    if (o.seed) {
      cfg.seed = *o.seed;
      cfg.train.seed = *o.seed;
    }
    return cfg;
  } catch (const Error& e) {
    throw ConfigFailure{e.what()};
  }
}

fs::path out_file(const Options& o, const std::string& name) {
  fs::create_directories(o.out);
  return fs::path(o.out) / name;
}

std::ofstream open_csv(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error(Errc::InvalidArgument, "cannot write " + p.string());
  return os;
}

std::string model_path(const Options& o) {
  return o.model.empty() ? (fs::path(o.out) / "model.kprn").string() : o.model;
}

fs::path train_path(const Options& o) { return fs::path(o.out) / "train.cpds"; }
fs::path test_path(const Options& o) { return fs::path(o.out) / "test.cpds"; }

void print_metrics(const char* label, const EvalMetrics& m) {
  std::cout << label << " mean_loss " << m.mean_loss << " px^2, max keypoint rms " << m.max_keypoint_rms()
            << " px, cross-ratio error " << m.mean_cross_ratio_error[0] << " / " << m.mean_cross_ratio_error[1] << "\n";
}

int cmd_synth(const Options& o) {
  const RunConfig cfg = load_config(o);
  const DatasetOptions dopt = cfg.dataset_options();
  DatasetOptions test_opt = dopt;
  test_opt.render.augment = false;
  const auto train = generate_dataset(static_cast<std::size_t>(cfg.data.train_samples), cfg.camera, cfg.cone,
                                      mix_seed(cfg.seed, 1), dopt);
  const auto test = generate_dataset(static_cast<std::size_t>(cfg.data.test_samples), cfg.camera, cfg.cone,
                                     mix_seed(cfg.seed, 2), test_opt);
  fs::create_directories(o.out);
  save_dataset(train_path(o).string(), train);
  save_dataset(test_path(o).string(), test);
  std::cout << "wrote " << train.size() << " training and " << test.size() << " test samples to " << o.out << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto data = load_dataset(train_path(o).string());
  auto result = train<float>(data, cfg.train, cfg.arch, [](int epoch, double loss) {
    std::cout << "epoch " << epoch << " loss " << loss << std::endl;
  });
  save_model(model_path(o), result.net);
  std::ofstream os = open_csv(out_file(o, "history.csv"));
  CsvWriter csv(os, {"epoch", "mean_loss"});
  for (std::size_t e = 0; e < result.history.size(); ++e) {
    csv.field(e + 1).field(result.history[e]);
    csv.end_row();
  }
  std::cout << "model written to " << model_path(o) << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig cfg = load_config(o);
  const RegressorNet net = load_model<float>(model_path(o));
  std::ofstream os = open_csv(out_file(o, "eval.csv"));
  CsvWriter csv(os, {"split", "mean_loss", "max_keypoint_rms", "cr_error_left", "cr_error_right"});
  for (const auto& [split, path] : {std::pair{"train", train_path(o)}, std::pair{"test", test_path(o)}}) {
    const auto data = load_dataset(path.string());
    const EvalMetrics m = evaluate(net, data, cfg.train.gamma, cfg.train.cross_ratio_target);
    print_metrics(split, m);
    csv.field(split).field(m.mean_loss).field(m.max_keypoint_rms());
    csv.field(m.mean_cross_ratio_error[0]).field(m.mean_cross_ratio_error[1]);
    csv.end_row();
  }
  return 0;
}

/// Net predictor when the config asks for one, annotated keypoints otherwise.
struct PredictorSource {
  std::optional<RegressorNet> net;
  KeypointPredictor predict;
};

PredictorSource make_predictor(const RunConfig& cfg, const Options& o) {
  PredictorSource src;
  if (cfg.experiment.keypoint_source == "net") {
    src.net = load_model<float>(model_path(o));
    src.predict = net_predictor(*src.net);
  } else {
    src.predict = annotated_predictor();
  }
  return src;
}

int cmd_estimate(const Options& o) {
  const RunConfig cfg = load_config(o);
  const PredictorSource src = make_predictor(cfg, o);
  const ScenePlan scene = generate_scene(cfg.experiment.scene_range_min, cfg.experiment.scene_range_max,
                                         cfg.experiment.scene_cones, cfg.camera, cfg.cone, cfg.seed);
  const FrameResult r = estimate_frame(scene, src.predict, pipeline_options(cfg));
  std::ofstream obs = open_csv(out_file(o, "observations.csv"));
  write_observations_csv(obs, r);
  std::ofstream skipped = open_csv(out_file(o, "skipped.csv"));
  write_skipped_csv(skipped, r.skipped);
  std::cout << r.observations.size() << " of " << scene.cones.size() << " cones estimated\n";
  return 0;
}

int cmd_exp_depth(const Options& o) {
  const RunConfig cfg = load_config(o);
  const PredictorSource src = make_predictor(cfg, o);
  const DepthAccuracyResult r = exp_depth_accuracy(cfg, src.net ? &src.predict : nullptr);
  std::ofstream rows = open_csv(out_file(o, "depth_accuracy.csv"));
  write_depth_csv(rows, r);
  std::ofstream fit = open_csv(out_file(o, "depth_fit.csv"));
  write_depth_fit_csv(fit, r);
  std::ofstream skipped = open_csv(out_file(o, "skipped.csv"));
  write_trial_skips_csv(skipped, r.skipped);
  std::cout << "fit abs_error = " << r.fit.a << " z^2 + " << r.fit.b << " z + " << r.fit.c
            << ", spearman " << r.spearman << "\n";
  return 0;
}

int cmd_exp_bbox(const Options& o) {
  const RunConfig cfg = load_config(o);
  const PredictorSource src = make_predictor(cfg, o);
  const BboxPerturbationResult r = exp_bbox_perturbation(cfg, src.predict);
  std::ofstream rows = open_csv(out_file(o, "bbox_perturbation.csv"));
  write_bbox_csv(rows, r);
  std::ofstream skipped = open_csv(out_file(o, "skipped.csv"));
  write_trial_skips_csv(skipped, r.skipped);
  for (const auto& row : r.rows)
    std::cout << "level " << row.level << " z " << row.true_z << " variance " << row.depth_variance << "\n";
  return 0;
}

int cmd_exp_kpvar(const Options& o) {
  const RunConfig cfg = load_config(o);
  const auto rows = exp_kp_variance(cfg, cfg.experiment.kp_sigma_px);
  std::ofstream os = open_csv(out_file(o, "kp_variance.csv"));
  write_kp_variance_csv(os, rows);
  for (const auto& r : rows)
    std::cout << "cone " << r.cone_id << " depth variance x-noise " << r.depth_var_xnoise << " y-noise "
              << r.depth_var_ynoise << "\n";
  return 0;
}

int cmd_stereo_eval(const Options& o) {
  const RunConfig cfg = load_config(o);
  const StereoEvalResult r = exp_stereo_eval(cfg, cfg.noise.keypoint_sigma_px, cfg.stereo.range_min, cfg.stereo.range_max);
  std::ofstream os = open_csv(out_file(o, "stereo_eval.csv"));
  write_stereo_csv(os, r);
  std::ofstream skipped = open_csv(out_file(o, "skipped.csv"));
  write_trial_skips_csv(skipped, r.skipped);
  std::cout << "mean |dz| mono " << r.mono_mean_abs_error << " m, stereo " << r.stereo_mean_abs_error << " m\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Monocular cone position estimation from regressed keypoints"};
  app.require_subcommand(1);
  Options opt;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Command commands[] = {
      {"synth", "generate training and test datasets", cmd_synth},
      {"train", "train the keypoint regressor", cmd_train},
      {"eval", "evaluate a trained model on the datasets", cmd_eval},
      {"estimate", "estimate cone positions for one synthetic scene", cmd_estimate},
      {"exp-depth", "depth accuracy sweep", cmd_exp_depth},
      {"exp-bbox", "bounding-box perturbation experiment", cmd_exp_bbox},
      {"exp-kpvar", "keypoint-noise sensitivity experiment", cmd_exp_kpvar},
      {"stereo-eval", "mono against stereo depth on noisy keypoints", cmd_stereo_eval},
  };
  std::vector<std::pair<CLI::App*, int (*)(const Options&)>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config, "configuration file")->required();
    sub->add_option("--seed", opt.seed, "override the configured seed");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--model", opt.model, "model file (default <out>/model.kprn)");
    subs.emplace_back(sub, c.run);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    for (const auto& [sub, run] : subs)
      if (sub->parsed()) return run(opt);
  } catch (const ConfigFailure& e) {
    std::cerr << "config error: " << e.message << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
