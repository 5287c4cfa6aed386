#pragma once

// Run configuration: a small TOML subset (sections, `key = value`, numbers,
// booleans, quoted strings, flat numeric arrays, `#` comments) mapped onto
// typed settings. Every key is required and unknown keys are rejected; all
// errors name the offending key path.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "conepose/cone_model.hpp"
#include "conepose/error.hpp"
#include "conepose/geometry.hpp"
#include "conepose/pnp.hpp"
#include "conepose/regressor.hpp"
#include "conepose/synthetic.hpp"

namespace conepose {

/// Flat `section.key -> raw value text` view of a config document.
class ConfigTable {
 public:
  static ConfigTable parse(const std::string& text) {
    ConfigTable table;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(strip_comment(line));
      if (line.empty()) continue;
      const std::string where = "line " + std::to_string(lineno);
      if (line.front() == '[') {
        if (line.back() != ']') throw Error(Errc::ConfigError, where + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty() || !is_identifier(section)) throw Error(Errc::ConfigError, where + ": bad section name");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error(Errc::ConfigError, where + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (!is_identifier(key)) throw Error(Errc::ConfigError, where + ": bad key '" + key + "'");
      if (value.empty()) throw Error(Errc::ConfigError, where + ": missing value for '" + key + "'");
      const std::string path = section.empty() ? key : section + "." + key;
      if (!table.values_.emplace(path, value).second) throw Error(Errc::ConfigError, path + ": duplicate key");
    }
    return table;
  }

  static ConfigTable load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error(Errc::ConfigError, "cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& path) const { return values_.count(path) != 0; }

  double get_double(const std::string& path) const { return parse_number<double>(path, raw(path)); }

  std::int64_t get_int(const std::string& path) const { return parse_number<std::int64_t>(path, raw(path)); }

  std::uint64_t get_uint(const std::string& path) const { return parse_number<std::uint64_t>(path, raw(path)); }

  bool get_bool(const std::string& path) const {
    const std::string& v = raw(path);
    if (v == "true") return true;
    if (v == "false") return false;
    throw Error(Errc::ConfigError, path + ": expected true or false");
  }

  std::string get_string(const std::string& path) const {
    const std::string& v = raw(path);
    if (v.size() < 2 || v.front() != '"' || v.back() != '"')
      throw Error(Errc::ConfigError, path + ": expected a quoted string");
    return v.substr(1, v.size() - 2);
  }

  std::vector<double> get_double_list(const std::string& path) const { return parse_list<double>(path); }

  std::vector<std::int64_t> get_int_list(const std::string& path) const { return parse_list<std::int64_t>(path); }

  /// Keys present in the document but never read.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

 private:
  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static bool is_identifier(const std::string& s) {
    for (char c : s)
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
    return !s.empty();
  }

  const std::string& raw(const std::string& path) const {
    const auto it = values_.find(path);
    if (it == values_.end()) throw Error(Errc::ConfigError, path + ": missing key");
    used_.insert(path);
    return it->second;
  }

  template <typename T>
  static T parse_number(const std::string& path, const std::string& text) {
    T value{};
    const char* end = text.data() + text.size();
    const char* begin = text.data();
    if (!text.empty() && text.front() == '+') ++begin;
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) throw Error(Errc::ConfigError, path + ": expected a number, got '" + text + "'");
    return value;
  }

  template <typename T>
  std::vector<T> parse_list(const std::string& path) const {
    const std::string& v = raw(path);
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw Error(Errc::ConfigError, path + ": expected [a, b, ...]");
    std::vector<T> out;
    const std::string body = trim(v.substr(1, v.size() - 2));
    if (body.empty()) return out;
    std::istringstream items(body);
    std::string item;
    while (std::getline(items, item, ',')) out.push_back(parse_number<T>(path, trim(item)));
    return out;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

struct NoiseConfig {
  double keypoint_sigma_px = 1.0;
  std::vector<double> bbox_levels{0.01, 0.05, 0.10, 0.20};
  double pixel_noise_max = 0.05;
  bool augment = true;
};

struct DataConfig {
  int train_samples = 2000;
  int test_samples = 400;
  double range_min = 4.0;
  double range_max = 16.0;
};

struct StereoConfig {
  double baseline = 0.5;
  double range_min = 2.0;
  double range_max = 8.0;
};

struct ExperimentConfig {
  std::string keypoint_source = "net";  // "net" or "annotated"
  double depth_min = 4.0;
  double depth_max = 16.0;
  double depth_step = 0.5;
  int cones_per_bin = 100;
  std::vector<double> bbox_depths{4.0, 6.0, 8.0, 10.0, 12.0, 15.0};
  int bbox_trials = 100;
  int kp_trials = 500;
  double kp_sigma_px = 1.0;
  int scene_cones = 50;
  double scene_range_min = 4.0;
  double scene_range_max = 15.0;
  int stereo_trials = 500;
};

struct RunConfig {
  std::uint64_t seed = 1;
  CameraModel camera;
  ConeGeometry cone;
  NoiseConfig noise;
  TrainConfig train;
  ArchSpec arch = ArchSpec::desk();
  DataConfig data;
  RansacConfig ransac;
  StereoConfig stereo;
  ExperimentConfig experiment;

  void validate() const {
    auto check = [](bool ok, const char* path, const char* what) {
      if (!ok) throw Error(Errc::ConfigError, std::string(path) + ": " + what);
    };
    auto wrap = [](const char* section, auto&& f) {
      try {
        f();
      } catch (const Error& e) {
        throw Error(Errc::ConfigError, std::string(section) + ": " + e.what());
      }
    };
    wrap("camera", [&] { camera.validate(); });
    wrap("cone", [&] { cone.validate(); });
    wrap("train", [&] { train.validate(); });
    wrap("train", [&] { arch.validate(); });
    wrap("ransac", [&] { ransac.validate(); });
    check(noise.keypoint_sigma_px >= 0.0, "noise.keypoint_sigma_px", "must be >= 0");
    for (double l : noise.bbox_levels) check(l >= 0.0 && l <= 0.5, "noise.bbox_levels", "levels must be in [0, 0.5]");
    check(noise.pixel_noise_max >= 0.0, "noise.pixel_noise_max", "must be >= 0");
    check(data.train_samples >= 1, "train.train_samples", "must be >= 1");
    check(data.test_samples >= 1, "train.test_samples", "must be >= 1");
    check(data.range_min > 0.0 && data.range_min < data.range_max, "train.range_min", "need 0 < range_min < range_max");
    check(stereo.baseline > 0.0, "stereo.baseline", "must be positive");
    check(stereo.range_min > 0.0 && stereo.range_min < stereo.range_max, "stereo.range_min",
          "need 0 < range_min < range_max");
    check(experiment.keypoint_source == "net" || experiment.keypoint_source == "annotated",
          "experiment.keypoint_source", "must be \"net\" or \"annotated\"");
    check(experiment.depth_min > 0.0 && experiment.depth_min <= experiment.depth_max, "experiment.depth_min",
          "need 0 < depth_min <= depth_max");
    check(experiment.depth_step > 0.0, "experiment.depth_step", "must be positive");
    check(experiment.cones_per_bin >= 1, "experiment.cones_per_bin", "must be >= 1");
    for (double z : experiment.bbox_depths) check(z > 0.0, "experiment.bbox_depths", "depths must be positive");
    check(experiment.bbox_trials >= 2, "experiment.bbox_trials", "must be >= 2");
    check(experiment.kp_trials >= 2, "experiment.kp_trials", "must be >= 2");
    check(experiment.kp_sigma_px >= 0.0, "experiment.kp_sigma_px", "must be >= 0");
    check(experiment.scene_cones >= 1, "experiment.scene_cones", "must be >= 1");
    check(experiment.scene_range_min > 0.0 && experiment.scene_range_min < experiment.scene_range_max,
          "experiment.scene_range_min", "need 0 < scene_range_min < scene_range_max");
    check(experiment.stereo_trials >= 2, "experiment.stereo_trials", "must be >= 2");
  }

  static RunConfig from_table(const ConfigTable& t) {
    RunConfig c;
    auto as_int = [&](const char* path) {
      const std::int64_t v = t.get_int(path);
      if (v < INT32_MIN || v > INT32_MAX) throw Error(Errc::ConfigError, std::string(path) + ": out of range");
      return static_cast<int>(v);
    };
    c.seed = t.get_uint("seed");

    c.camera.fx = t.get_double("camera.fx");
    c.camera.fy = t.get_double("camera.fy");
    c.camera.cx = t.get_double("camera.cx");
    c.camera.cy = t.get_double("camera.cy");
    c.camera.width = as_int("camera.width");
    c.camera.height = as_int("camera.height");

    c.cone.height = t.get_double("cone.height");
    c.cone.base_halfwidth = t.get_double("cone.base_halfwidth");
    c.cone.t2 = t.get_double("cone.t2");
    c.cone.t3 = t.get_double("cone.t3");
    try {
      c.cone.color = color_from_string(t.get_string("cone.color"));
    } catch (const Error& e) {
      if (e.code() == Errc::ConfigError) throw;
      throw Error(Errc::ConfigError, std::string("cone.color: ") + e.what());
    }

    c.noise.keypoint_sigma_px = t.get_double("noise.keypoint_sigma_px");
    c.noise.bbox_levels = t.get_double_list("noise.bbox_levels");
    c.noise.pixel_noise_max = t.get_double("noise.pixel_noise_max");
    c.noise.augment = t.get_bool("noise.augment");

    c.train.learning_rate = t.get_double("train.learning_rate");
    c.train.momentum = t.get_double("train.momentum");
    c.train.batch_size = as_int("train.batch_size");
    c.train.epochs = as_int("train.epochs");
    c.train.lr_decay_epochs.clear();
    for (std::int64_t e : t.get_int_list("train.lr_decay_epochs")) c.train.lr_decay_epochs.push_back(static_cast<int>(e));
    c.train.lr_decay_factor = t.get_double("train.lr_decay_factor");
    c.train.gamma = t.get_double("train.gamma");
    c.train.cross_ratio_target = t.get_double("train.cross_ratio_target");
    std::vector<int> widths;
    for (std::int64_t w : t.get_int_list("train.widths")) widths.push_back(static_cast<int>(w));
    if (widths.size() < 2) throw Error(Errc::ConfigError, "train.widths: need a stem width and at least one block");
    c.arch = ArchSpec::from_widths(widths, as_int("train.stem_stride"), t.get_bool("train.normalization"));
    c.data.train_samples = as_int("train.train_samples");
    c.data.test_samples = as_int("train.test_samples");
    c.data.range_min = t.get_double("train.range_min");
    c.data.range_max = t.get_double("train.range_max");

    c.ransac.subset_size = as_int("ransac.subset_size");
    c.ransac.inlier_threshold = t.get_double("ransac.inlier_threshold");
    c.ransac.min_inliers = as_int("ransac.min_inliers");

    c.stereo.baseline = t.get_double("stereo.baseline");
    c.stereo.range_min = t.get_double("stereo.range_min");
    c.stereo.range_max = t.get_double("stereo.range_max");

    auto& x = c.experiment;
    x.keypoint_source = t.get_string("experiment.keypoint_source");
    x.depth_min = t.get_double("experiment.depth_min");
    x.depth_max = t.get_double("experiment.depth_max");
    x.depth_step = t.get_double("experiment.depth_step");
    x.cones_per_bin = as_int("experiment.cones_per_bin");
    x.bbox_depths = t.get_double_list("experiment.bbox_depths");
    x.bbox_trials = as_int("experiment.bbox_trials");
    x.kp_trials = as_int("experiment.kp_trials");
    x.kp_sigma_px = t.get_double("experiment.kp_sigma_px");
    x.scene_cones = as_int("experiment.scene_cones");
    x.scene_range_min = t.get_double("experiment.scene_range_min");
    x.scene_range_max = t.get_double("experiment.scene_range_max");
    x.stereo_trials = as_int("experiment.stereo_trials");

    const auto extra = t.unused();
    if (!extra.empty()) throw Error(Errc::ConfigError, extra.front() + ": unknown key");
    c.train.seed = c.seed;
    c.validate();
    return c;
  }

  static RunConfig load(const std::string& path) { return from_table(ConfigTable::load(path)); }

  DatasetOptions dataset_options() const {
    DatasetOptions opt;
    opt.range_min = data.range_min;
    opt.range_max = data.range_max;
    opt.render.augment = noise.augment;
    opt.render.pixel_noise_max = noise.pixel_noise_max;
    return opt;
  }
};

}  // namespace conepose
