#pragma once

// Keypoint regressor: an 80x80x3 patch to 14 patch-frame coordinates.
//
// Layout: conv-norm-relu stem, four residual blocks, one affine layer.
// Training is mini-batch SGD with momentum and a step learning-rate
// schedule; it is single-threaded and a pure function of (data, config).

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "conepose/binary_io.hpp"
#include "conepose/error.hpp"
#include "conepose/keypoint_loss.hpp"
#include "conepose/nn.hpp"
#include "conepose/patch.hpp"
#include "conepose/random.hpp"

namespace conepose {

using nn::conv_output_shape;

enum class LayerKind : std::uint8_t { stem = 0, residual = 1, affine = 2 };

struct LayerSpec {
  LayerKind kind = LayerKind::residual;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int channels = 0;

  bool operator==(const LayerSpec&) const = default;
};

inline constexpr int kRegressorOutputs = 2 * kNumKeypoints;

struct ArchSpec {
  int input_size = kPatchSize;
  bool normalization = true;
  std::vector<LayerSpec> layers;

  bool operator==(const ArchSpec&) const = default;

  /// Stem of width widths[0], then one residual block per width; every block
  /// after the first halves the resolution.
  static ArchSpec from_widths(const std::vector<int>& widths, int stem_stride = 2, bool normalization = true) {
    if (widths.size() < 2) throw Error(Errc::InvalidArgument, "need a stem width and at least one block width");
    ArchSpec a;
    a.normalization = normalization;
    a.layers.push_back({LayerKind::stem, 3, stem_stride, 1, widths[0]});
    for (std::size_t i = 1; i < widths.size(); ++i)
      a.layers.push_back({LayerKind::residual, 3, i == 1 ? 1 : 2, 1, widths[i]});
    a.layers.push_back({LayerKind::affine, 1, 1, 0, kRegressorOutputs});
    a.validate();
    return a;
  }

  /// CPU-sized default.
  static ArchSpec desk() { return from_widths({8, 8, 16, 32, 64}, 2, true); }

  /// Widths 64..512 at full input resolution.
  static ArchSpec full_width() { return from_widths({64, 64, 128, 256, 512}, 1, true); }

  /// Spatial size after each layer up to the affine one; throws on an
  /// inconsistent chain.
  int feature_size() const {
    int size = input_size;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::affine) break;
      const int main = conv_output_shape(conv_output_shape(size, l.kernel, l.padding, l.stride), l.kernel,
                                         l.padding, 1);
      if (l.kind == LayerKind::stem) {
        size = conv_output_shape(size, l.kernel, l.padding, l.stride);
        continue;
      }
      if (main != conv_output_shape(size, 1, 0, l.stride))
        throw Error(Errc::ShapeMismatch, "residual block shortcut does not match its main branch");
      size = main;
    }
    return size;
  }

  void validate() const {
    if (input_size < 1) throw Error(Errc::InvalidArgument, "input size must be positive");
    if (layers.size() < 2 || layers.front().kind != LayerKind::stem || layers.back().kind != LayerKind::affine)
      throw Error(Errc::InvalidArgument, "layer list must be stem, residual blocks, affine");
    for (std::size_t i = 1; i + 1 < layers.size(); ++i)
      if (layers[i].kind != LayerKind::residual) throw Error(Errc::InvalidArgument, "only residual blocks between stem and affine");
    if (layers.back().channels != kRegressorOutputs) throw Error(Errc::InvalidArgument, "output dimension must be 14");
    for (const auto& l : layers)
      if (l.channels < 1) throw Error(Errc::InvalidArgument, "layer channel count must be positive");
    (void)feature_size();
  }
};

template <typename S>
class KeypointNet {
 public:
  using Matrix = nn::MatrixR<S>;

  KeypointNet() : KeypointNet(ArchSpec::desk(), 0) {}

  KeypointNet(ArchSpec arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    const auto& stem = arch_.layers.front();
    stem_conv_ = nn::Conv2d<S>(3, stem.channels, stem.kernel, stem.stride, stem.padding);
    stem_bn_ = nn::BatchNorm<S>(stem.channels, arch_.normalization);
    int channels = stem.channels;
    for (std::size_t i = 1; i + 1 < arch_.layers.size(); ++i) {
      const auto& l = arch_.layers[i];
      blocks_.emplace_back(channels, l.channels, l.kernel, l.stride, l.padding, arch_.normalization);
      channels = l.channels;
    }
    const int fs = arch_.feature_size();
    head_ = nn::Affine<S>(channels * fs * fs, kRegressorOutputs);

    Rng rng(mix_seed(seed, 0x6b70));
    stem_conv_.init(rng);
    for (auto& b : blocks_) b.init(rng);
    head_.init(rng);
  }

  const ArchSpec& arch() const { return arch_; }

  /// Batch in, (14 x batch) out. Uses running normalization statistics.
  Matrix infer(std::span<const Patch* const> batch) const {
    nn::Activation<S> x = nn::Relu<S>::infer(stem_bn_.infer(stem_conv_.infer(make_input(batch))));
    for (const auto& b : blocks_) x = b.infer(x);
    return head_.infer(x);
  }

  Vec14 forward(const Patch& patch) const {
    const Patch* one[1] = {&patch};
    const Matrix y = infer(one);
    Vec14 out;
    for (int i = 0; i < kRegressorOutputs; ++i) out(i) = static_cast<double>(y(i, 0));
    return out;
  }

  /// Training-mode pass that caches what backward() needs.
  Matrix forward_train(std::span<const Patch* const> batch) {
    nn::Activation<S> x = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(make_input(batch)), true));
    for (auto& b : blocks_) x = b.forward(x, true);
    return head_.forward(x);
  }

  void backward(const Matrix& d_out) {
    nn::Activation<S> d = head_.backward(d_out);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) d = it->backward(d);
    d = stem_bn_.backward(stem_relu_.backward(d));
    stem_conv_.backward(d, false);
  }

  /// Calls f on every Conv2d, BatchNorm and Affine layer in storage order.
  template <typename F>
  void visit_layers(F&& f) {
    f(stem_conv_);
    f(stem_bn_);
    for (auto& b : blocks_) b.visit(f);
    f(head_);
  }

  template <typename F>
  void for_each_param(F&& f) {
    visit_layers([&](auto& layer) {
      using L = std::decay_t<decltype(layer)>;
      if constexpr (std::is_same_v<L, nn::BatchNorm<S>>) {
        if (layer.enabled()) {
          f(layer.gamma);
          f(layer.beta);
        }
      } else {
        f(layer.weight);
        f(layer.bias);
      }
    });
  }

  void zero_grad() {
    for_each_param([](nn::Param<S>& p) { p.zero_grad(); });
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each_param([&](nn::Param<S>& p) { n += p.value.size(); });
    return n;
  }

 private:
  nn::Activation<S> make_input(std::span<const Patch* const> batch) const {
    const int size = arch_.input_size;
    const int n = static_cast<int>(batch.size());
    nn::Activation<S> x(3, n, size, size);
    for (int s = 0; s < n; ++s) {
      const Patch& p = *batch[static_cast<std::size_t>(s)];
      if (p.size != size || p.data.size() != static_cast<std::size_t>(size) * size * 3)
        throw Error(Errc::ShapeMismatch, "patch is " + std::to_string(p.size) + " px, net expects " + std::to_string(size));
      for (int c = 0; c < 3; ++c) {
        S* dst = x.channel(c) + static_cast<std::size_t>(s) * x.plane();
        for (int y = 0; y < size; ++y)
          for (int xx = 0; xx < size; ++xx) dst[y * size + xx] = static_cast<S>(p.at(y, xx, c));
      }
    }
    return x;
  }

  ArchSpec arch_;
  nn::Conv2d<S> stem_conv_;
  nn::BatchNorm<S> stem_bn_;
  nn::Relu<S> stem_relu_;
  std::vector<nn::ResidualBlock<S>> blocks_;
  nn::Affine<S> head_;
};

using RegressorNet = KeypointNet<float>;

struct TrainConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  int batch_size = 128;
  int epochs = 250;
  std::vector<int> lr_decay_epochs{75, 100};
  double lr_decay_factor = 0.1;
  double gamma = 1.0;
  double cross_ratio_target = kReferenceCrossRatio;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error(Errc::InvalidArgument, "learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::InvalidArgument, "momentum must be in [0, 1)");
    if (batch_size < 1) throw Error(Errc::InvalidArgument, "batch_size must be >= 1");
    if (epochs < 0) throw Error(Errc::InvalidArgument, "epochs must be >= 0");
    if (!(gamma >= 0.0)) throw Error(Errc::InvalidArgument, "gamma must be >= 0");
    if (!(cross_ratio_target > 0.0)) throw Error(Errc::InvalidArgument, "cross-ratio target must be positive");
  }
};

struct EvalMetrics {
  double mean_loss = 0.0;                          // px^2 per sample
  std::array<double, kNumKeypoints> keypoint_rms{};  // px
  std::array<double, 2> mean_cross_ratio_error{};   // left arm, right arm

  double max_keypoint_rms() const { return *std::max_element(keypoint_rms.begin(), keypoint_rms.end()); }
};

inline constexpr int kEvalBatch = 32;

/// Metrics for any predictor callable `Vec14(const PatchSample&)`.
template <typename Predict>
EvalMetrics evaluate_predictor(Predict&& predict, std::span<const PatchSample> data, double gamma, double cr3d) {
  if (data.empty()) throw Error(Errc::EmptyDataset, "cannot evaluate on an empty dataset");
  EvalMetrics m;
  std::array<double, kNumKeypoints> sq{};
  for (const auto& sample : data) {
    const Vec14 pred = predict(sample);
    const Vec14 gt = sample.keypoints.to_vector();
    m.mean_loss += keypoint_loss(pred, gt, gamma, cr3d);
    for (int k = 0; k < kNumKeypoints; ++k) sq[static_cast<std::size_t>(k)] += (pred - gt).segment<2>(2 * k).squaredNorm();
    m.mean_cross_ratio_error[0] += std::abs(guarded_cross_ratio(pred, kLeftArm).value - cr3d);
    m.mean_cross_ratio_error[1] += std::abs(guarded_cross_ratio(pred, kRightArm).value - cr3d);
  }
  const auto n = static_cast<double>(data.size());
  m.mean_loss /= n;
  for (std::size_t k = 0; k < sq.size(); ++k) m.keypoint_rms[k] = std::sqrt(sq[k] / n);
  for (auto& e : m.mean_cross_ratio_error) e /= n;
  return m;
}

template <typename S>
std::vector<Vec14> predict_all(const KeypointNet<S>& net, std::span<const PatchSample> data) {
  std::vector<Vec14> out;
  out.reserve(data.size());
  std::vector<const Patch*> batch;
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    const std::size_t end = std::min(data.size(), start + kEvalBatch);
    batch.clear();
    for (std::size_t i = start; i < end; ++i) batch.push_back(&data[i].patch);
    const auto y = net.infer(batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Vec14 v;
      for (int k = 0; k < kRegressorOutputs; ++k) v(k) = static_cast<double>(y(k, static_cast<Eigen::Index>(i)));
      out.push_back(v);
    }
  }
  return out;
}

template <typename S>
EvalMetrics evaluate(const KeypointNet<S>& net, std::span<const PatchSample> data, double gamma,
                     double cr3d = kReferenceCrossRatio) {
  if (data.empty()) throw Error(Errc::EmptyDataset, "cannot evaluate on an empty dataset");
  const std::vector<Vec14> preds = predict_all(net, data);
  std::size_t i = 0;
  return evaluate_predictor([&](const PatchSample&) { return preds[i++]; }, data, gamma, cr3d);
}

template <typename S>
struct TrainResult {
  KeypointNet<S> net;
  std::vector<double> history;  // training-set mean loss after each epoch
};

/// Mini-batch SGD with momentum. history[e] is evaluate() on the training set
/// after epoch e + 1, so it matches a later evaluate() call exactly.
template <typename S = float>
TrainResult<S> train(std::span<const PatchSample> data, const TrainConfig& cfg, const ArchSpec& arch = ArchSpec::desk(),
                     const std::function<void(int, double)>& on_epoch = {}) {
  if (data.empty()) throw Error(Errc::EmptyDataset, "training set is empty");
  cfg.validate();
  TrainResult<S> result{KeypointNet<S>(arch, cfg.seed), {}};
  KeypointNet<S>& net = result.net;

  std::vector<std::vector<S>> velocity;
  net.for_each_param([&](nn::Param<S>& p) { velocity.emplace_back(p.value.size(), S(0)); });

  Rng order_rng(mix_seed(cfg.seed, 0x5f1e));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double lr = cfg.learning_rate;
  std::vector<const Patch*> batch;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(&data[order[i]].patch);
      const auto n = static_cast<Eigen::Index>(batch.size());

      net.zero_grad();
      const auto out = net.forward_train(batch);
      typename KeypointNet<S>::Matrix d_out(kRegressorOutputs, n);
      double batch_loss = 0.0;
      for (Eigen::Index s = 0; s < n; ++s) {
        Vec14 pred;
        for (int k = 0; k < kRegressorOutputs; ++k) pred(k) = static_cast<double>(out(k, s));
        const Vec14 gt = data[order[start + static_cast<std::size_t>(s)]].keypoints.to_vector();
        batch_loss += keypoint_loss(pred, gt, cfg.gamma, cfg.cross_ratio_target);
        const Vec14 g = keypoint_loss_gradient(pred, gt, cfg.gamma, cfg.cross_ratio_target) / static_cast<double>(n);
        for (int k = 0; k < kRegressorOutputs; ++k) d_out(k, s) = static_cast<S>(g(k));
      }
      if (!std::isfinite(batch_loss))
        throw Error(Errc::DivergedLoss, "non-finite batch loss in epoch " + std::to_string(epoch));
      net.backward(d_out);

      std::size_t pi = 0;
      const S lr_s = static_cast<S>(lr);
      const S mu = static_cast<S>(cfg.momentum);
      net.for_each_param([&](nn::Param<S>& p) {
        auto& v = velocity[pi++];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
          v[j] = mu * v[j] + p.grad[j];
          p.value[j] -= lr_s * v[j];
        }
      });
    }

    const double epoch_loss = evaluate(net, data, cfg.gamma, cfg.cross_ratio_target).mean_loss;
    if (!std::isfinite(epoch_loss))
      throw Error(Errc::DivergedLoss, "non-finite training loss after epoch " + std::to_string(epoch));
    result.history.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
    if (std::find(cfg.lr_decay_epochs.begin(), cfg.lr_decay_epochs.end(), epoch) != cfg.lr_decay_epochs.end())
      lr *= cfg.lr_decay_factor;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Model file: "KPRN", u32 version, u32 input size, u8 normalization,
// u32 layer count, per layer (u8 kind, u32 kernel, stride, padding, channels),
// u64 value count, then every parameter and normalization statistic as
// little-endian f64 in layer order.

inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

template <typename S, typename F>
void for_each_stored(KeypointNet<S>& net, F&& f) {
  net.visit_layers([&](auto& layer) {
    using L = std::decay_t<decltype(layer)>;
    if constexpr (std::is_same_v<L, nn::BatchNorm<S>>) {
      if (layer.enabled()) {
        f(layer.gamma.value);
        f(layer.beta.value);
        f(layer.running_mean);
        f(layer.running_var);
      }
    } else {
      f(layer.weight.value);
      f(layer.bias.value);
    }
  });
}

}  // namespace detail

template <typename S>
void write_model(std::ostream& os, const KeypointNet<S>& net_in) {
  KeypointNet<S>& net = const_cast<KeypointNet<S>&>(net_in);  // visitation only reads
  const ArchSpec& a = net.arch();
  os.write("KPRN", 4);
  detail::write_le<std::uint32_t>(os, kModelVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.input_size));
  detail::write_le<std::uint8_t>(os, a.normalization ? 1 : 0);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.layers.size()));
  for (const auto& l : a.layers) {
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.kind));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.kernel));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.stride));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.padding));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.channels));
  }
  std::uint64_t count = 0;
  detail::for_each_stored(net, [&](const nn::Buffer<S>& v) { count += v.size(); });
  detail::write_le<std::uint64_t>(os, count);
  detail::for_each_stored(net, [&](const nn::Buffer<S>& v) {
    for (S x : v) detail::write_le<double>(os, static_cast<double>(x));
  });
}

template <typename S = float>
KeypointNet<S> read_model(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "KPRN", 4) != 0) throw Error(Errc::CorruptFile, "bad model magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kModelVersion) throw Error(Errc::VersionMismatch, "model version " + std::to_string(version));
  ArchSpec a;
  a.input_size = static_cast<int>(detail::read_le<std::uint32_t>(is));
  a.normalization = detail::read_le<std::uint8_t>(is) != 0;
  const auto n_layers = detail::read_le<std::uint32_t>(is);
  if (n_layers > 1024) throw Error(Errc::CorruptFile, "implausible layer count");
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec l;
    const auto kind = detail::read_le<std::uint8_t>(is);
    if (kind > 2) throw Error(Errc::CorruptFile, "unknown layer kind");
    l.kind = static_cast<LayerKind>(kind);
    l.kernel = static_cast<int>(detail::read_le<std::uint32_t>(is));
    l.stride = static_cast<int>(detail::read_le<std::uint32_t>(is));
    l.padding = static_cast<int>(detail::read_le<std::uint32_t>(is));
    l.channels = static_cast<int>(detail::read_le<std::uint32_t>(is));
    a.layers.push_back(l);
  }
  KeypointNet<S> net = [&] {
    try {
      return KeypointNet<S>(a, 0);
    } catch (const Error& e) {
      throw Error(Errc::CorruptFile, std::string("invalid layer spec: ") + e.what());
    }
  }();
  const auto count = detail::read_le<std::uint64_t>(is);
  std::uint64_t expected = 0;
  detail::for_each_stored(net, [&](const nn::Buffer<S>& v) { expected += v.size(); });
  if (count != expected) throw Error(Errc::CorruptFile, "parameter count does not match layer spec");
  detail::for_each_stored(net, [&](nn::Buffer<S>& v) {
    for (S& x : v) x = static_cast<S>(detail::read_le<double>(is));
  });
  if (is.peek() != std::char_traits<char>::eof()) throw Error(Errc::CorruptFile, "trailing bytes after parameters");
  return net;
}

template <typename S>
void save_model(const std::string& path, const KeypointNet<S>& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(Errc::InvalidArgument, "cannot open " + path + " for writing");
  write_model(os, net);
  if (!os) throw Error(Errc::InvalidArgument, "failed writing " + path);
}

template <typename S = float>
KeypointNet<S> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::CorruptFile, "cannot open " + path);
  return read_model<S>(is);
}

}  // namespace conepose
