#pragma once

// Minimal CPU convolutional network pieces: convolution (im2col + GEMM),
// batch normalization, rectifier, residual block and affine layer, each with
// an explicit backward pass.
//
// Activations are stored channel-major over the batch: element (c, n, y, x)
// lives at ((c * N + n) * H + y) * W + x. A convolution's output for the whole
// batch is then one (Cout x N*H*W) matrix product.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "conepose/error.hpp"
#include "conepose/random.hpp"

namespace conepose::nn {

/// Storage with Eigen's alignment so vectorized reductions over mapped
/// buffers always split the same way, keeping results bitwise reproducible.
template <typename S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

template <typename S>
using MatrixR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// floor((in + 2 pad - dilation (kernel - 1) - 1) / stride + 1)
inline int conv_output_shape(int in_size, int kernel, int padding, int stride, int dilation = 1) {
  if (in_size < 1 || kernel < 1 || stride < 1 || dilation < 1 || padding < 0)
    throw Error(Errc::InvalidArgument, "convolution arguments out of range");
  const int numer = in_size + 2 * padding - dilation * (kernel - 1) - 1;
  // Floor division; numer may be negative for oversized kernels.
  const int q = numer >= 0 ? numer / stride : -((-numer + stride - 1) / stride);
  const int out = q + 1;
  if (out < 1) throw Error(Errc::NonPositiveOutput, "convolution output would be empty");
  return out;
}

template <typename S>
struct Activation {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  Buffer<S> data;

  Activation() = default;
  Activation(int c, int n, int h, int w)
      : channels(c), batch(n), height(h), width(w), data(static_cast<std::size_t>(c) * n * h * w, S(0)) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t row() const { return static_cast<std::size_t>(batch) * plane(); }
  S* channel(int c) { return data.data() + static_cast<std::size_t>(c) * row(); }
  const S* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * row(); }
};

/// A trainable tensor with its gradient buffer.
template <typename S>
struct Param {
  Buffer<S> value;
  Buffer<S> grad;

  void resize(std::size_t n) {
    value.assign(n, S(0));
    grad.assign(n, S(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <typename S>
void init_uniform(Param<S>& p, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : p.value) v = static_cast<S>(rng.uniform(-bound, bound));
}

template <typename S>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), padding_(padding) {
    weight.resize(static_cast<std::size_t>(out_ch) * in_ch * kernel * kernel);
    bias.resize(static_cast<std::size_t>(out_ch));
  }

  void init(Rng& rng) {
    const int fan_in = in_ch_ * kernel_ * kernel_;
    init_uniform(weight, fan_in, rng);
    init_uniform(bias, fan_in, rng);
  }

  int out_size(int in) const { return conv_output_shape(in, kernel_, padding_, stride_); }
  int out_channels() const { return out_ch_; }

  /// Inference pass; touches no cached state.
  Activation<S> infer(const Activation<S>& in) const {
    Buffer<S> col;
    return run(in, col);
  }

  /// Training pass; keeps the unfolded input for backward().
  Activation<S> forward(const Activation<S>& in) {
    in_h_ = in.height;
    in_w_ = in.width;
    batch_ = in.batch;
    return run(in, col_);
  }

  /// Accumulates parameter gradients; returns the input gradient when
  /// `need_input_grad`, otherwise an empty activation.
  Activation<S> backward(const Activation<S>& d_out, bool need_input_grad) {
    const auto cols = static_cast<Eigen::Index>(d_out.row());
    const auto k = static_cast<Eigen::Index>(in_ch_) * kernel_ * kernel_;
    Eigen::Map<const MatrixR<S>> dy(d_out.data.data(), out_ch_, cols);
    Eigen::Map<const MatrixR<S>> col(col_.data(), k, cols);
    Eigen::Map<MatrixR<S>> dw(weight.grad.data(), out_ch_, k);
    dw.noalias() += dy * col.transpose();
    for (int c = 0; c < out_ch_; ++c) bias.grad[static_cast<std::size_t>(c)] += dy.row(c).sum();
    if (!need_input_grad) return {};

    Eigen::Map<const MatrixR<S>> w(weight.value.data(), out_ch_, k);
    dcol_.resize(static_cast<std::size_t>(k * cols));
    Eigen::Map<MatrixR<S>> dcol(dcol_.data(), k, cols);
    dcol.noalias() = w.transpose() * dy;
    Activation<S> d_in(in_ch_, batch_, in_h_, in_w_);
    col2im(d_in, d_out.height, d_out.width);
    return d_in;
  }

  Param<S> weight;
  Param<S> bias;

 private:
  Activation<S> run(const Activation<S>& in, Buffer<S>& col_buf) const {
    if (in.channels != in_ch_) throw Error(Errc::ShapeMismatch, "conv input channels");
    const int oh = out_size(in.height);
    const int ow = out_size(in.width);
    im2col(in, oh, ow, col_buf);

    Activation<S> out(out_ch_, in.batch, oh, ow);
    const auto cols = static_cast<Eigen::Index>(out.row());
    const auto k = static_cast<Eigen::Index>(in_ch_) * kernel_ * kernel_;
    Eigen::Map<const MatrixR<S>> w(weight.value.data(), out_ch_, k);
    Eigen::Map<const MatrixR<S>> col(col_buf.data(), k, cols);
    Eigen::Map<MatrixR<S>> y(out.data.data(), out_ch_, cols);
    y.noalias() = w * col;
    for (int c = 0; c < out_ch_; ++c) y.row(c).array() += bias.value[static_cast<std::size_t>(c)];
    return out;
  }

  void im2col(const Activation<S>& in, int oh, int ow, Buffer<S>& col_buf) const {
    const int n_batch = in.batch;
    const std::size_t cols = static_cast<std::size_t>(n_batch) * oh * ow;
    // Every entry is written below, so no clearing pass is needed.
    col_buf.resize(static_cast<std::size_t>(in_ch_) * kernel_ * kernel_ * cols);
    for (int ci = 0; ci < in_ch_; ++ci) {
      const S* src_c = in.channel(ci);
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          S* dst = col_buf.data() + (static_cast<std::size_t>((ci * kernel_ + ky) * kernel_ + kx)) * cols;
          for (int n = 0; n < n_batch; ++n) {
            const S* src = src_c + static_cast<std::size_t>(n) * in.plane();
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride_ - padding_ + ky;
              S* d = dst + (static_cast<std::size_t>(n) * oh + oy) * ow;
              if (iy < 0 || iy >= in.height) {
                std::fill(d, d + ow, S(0));
                continue;
              }
              const S* s = src + static_cast<std::size_t>(iy) * in.width;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride_ - padding_ + kx;
                d[ox] = (ix >= 0 && ix < in.width) ? s[ix] : S(0);
              }
            }
          }
        }
      }
    }
  }

  void col2im(Activation<S>& d_in, int oh, int ow) const {
    const int n_batch = d_in.batch;
    const std::size_t cols = static_cast<std::size_t>(n_batch) * oh * ow;
    for (int ci = 0; ci < in_ch_; ++ci) {
      S* dst_c = d_in.channel(ci);
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const S* src = dcol_.data() + (static_cast<std::size_t>((ci * kernel_ + ky) * kernel_ + kx)) * cols;
          for (int n = 0; n < n_batch; ++n) {
            S* dst = dst_c + static_cast<std::size_t>(n) * d_in.plane();
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride_ - padding_ + ky;
              if (iy < 0 || iy >= d_in.height) continue;
              const S* s = src + (static_cast<std::size_t>(n) * oh + oy) * ow;
              S* d = dst + static_cast<std::size_t>(iy) * d_in.width;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride_ - padding_ + kx;
                if (ix >= 0 && ix < d_in.width) d[ix] += s[ox];
              }
            }
          }
        }
      }
    }
  }

  int in_ch_ = 0;
  int out_ch_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
  int padding_ = 0;
  int in_h_ = 0;
  int in_w_ = 0;
  int batch_ = 0;
  Buffer<S> col_;
  Buffer<S> dcol_;
};

/// Per-channel normalization over (batch, height, width). Batch statistics
/// while training, running averages otherwise. With `enabled == false` the
/// layer is the identity and owns no parameters.
template <typename S>
class BatchNorm {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  BatchNorm() = default;
  BatchNorm(int channels, bool enabled) : channels_(channels), enabled_(enabled) {
    if (!enabled_) return;
    gamma.resize(static_cast<std::size_t>(channels));
    beta.resize(static_cast<std::size_t>(channels));
    std::fill(gamma.value.begin(), gamma.value.end(), S(1));
    running_mean.assign(static_cast<std::size_t>(channels), S(0));
    running_var.assign(static_cast<std::size_t>(channels), S(1));
  }

  bool enabled() const { return enabled_; }

  /// Normalizes with the running statistics.
  Activation<S> infer(const Activation<S>& in) const {
    if (!enabled_) return in;
    Activation<S> out = in;
    const std::size_t m = in.row();
    for (int c = 0; c < channels_; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const S inv_std = static_cast<S>(1.0 / std::sqrt(static_cast<double>(running_var[ci]) + kEpsilon));
      const S scale = gamma.value[ci] * inv_std;
      const S shift = beta.value[ci] - running_mean[ci] * scale;
      S* y = out.channel(c);
      for (std::size_t i = 0; i < m; ++i) y[i] = y[i] * scale + shift;
    }
    return out;
  }

  Activation<S> forward(const Activation<S>& in, bool training) {
    if (!training) return infer(in);
    if (!enabled_) return in;
    Activation<S> out(in.channels, in.batch, in.height, in.width);
    const std::size_t m = in.row();
    if (training) {
      xhat_ = Activation<S>(in.channels, in.batch, in.height, in.width);
      inv_std_.assign(static_cast<std::size_t>(channels_), S(0));
    }
    for (int c = 0; c < channels_; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const S* x = in.channel(c);
      S* y = out.channel(c);
      double mean = 0.0;
      double var = 0.0;
      if (training) {
        for (std::size_t i = 0; i < m; ++i) mean += static_cast<double>(x[i]);
        mean /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
          const double d = static_cast<double>(x[i]) - mean;
          var += d * d;
        }
        var /= static_cast<double>(m);
        // Biased estimate on purpose: a net that has settled on a batch then
        // gives the same outputs in evaluation as in training.
        running_mean[ci] = static_cast<S>((1.0 - kMomentum) * running_mean[ci] + kMomentum * mean);
        running_var[ci] = static_cast<S>((1.0 - kMomentum) * running_var[ci] + kMomentum * var);
      } else {
        mean = static_cast<double>(running_mean[ci]);
        var = static_cast<double>(running_var[ci]);
      }
      const S inv_std = static_cast<S>(1.0 / std::sqrt(var + kEpsilon));
      const S g = gamma.value[ci];
      const S b = beta.value[ci];
      const S mu = static_cast<S>(mean);
      if (training) {
        inv_std_[ci] = inv_std;
        S* xh = xhat_.channel(c);
        for (std::size_t i = 0; i < m; ++i) {
          xh[i] = (x[i] - mu) * inv_std;
          y[i] = g * xh[i] + b;
        }
      } else {
        for (std::size_t i = 0; i < m; ++i) y[i] = g * (x[i] - mu) * inv_std + b;
      }
    }
    return out;
  }

  Activation<S> backward(const Activation<S>& d_out) {
    if (!enabled_) return d_out;
    Activation<S> d_in(d_out.channels, d_out.batch, d_out.height, d_out.width);
    const std::size_t m = d_out.row();
    for (int c = 0; c < channels_; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const S* dy = d_out.channel(c);
      const S* xh = xhat_.channel(c);
      double sum_dy = 0.0;
      double sum_dy_xh = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        sum_dy += static_cast<double>(dy[i]);
        sum_dy_xh += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
      }
      gamma.grad[ci] += static_cast<S>(sum_dy_xh);
      beta.grad[ci] += static_cast<S>(sum_dy);
      const S scale = gamma.value[ci] * inv_std_[ci] / static_cast<S>(m);
      const S mean_dy = static_cast<S>(sum_dy);
      const S mean_dy_xh = static_cast<S>(sum_dy_xh);
      S* dx = d_in.channel(c);
      for (std::size_t i = 0; i < m; ++i)
        dx[i] = scale * (static_cast<S>(m) * dy[i] - mean_dy - xh[i] * mean_dy_xh);
    }
    return d_in;
  }

  Param<S> gamma;
  Param<S> beta;
  Buffer<S> running_mean;
  Buffer<S> running_var;

 private:
  int channels_ = 0;
  bool enabled_ = true;
  Activation<S> xhat_;
  Buffer<S> inv_std_;
};

template <typename S>
class Relu {
 public:
  static Activation<S> infer(Activation<S> in) {
    for (auto& v : in.data) v = std::max(v, S(0));
    return in;
  }

  Activation<S> forward(const Activation<S>& in) {
    Activation<S> out = in;
    mask_.assign(in.data.size(), 0);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      if (out.data[i] > S(0)) {
        mask_[i] = 1;
      } else {
        out.data[i] = S(0);
      }
    }
    return out;
  }

  Activation<S> backward(const Activation<S>& d_out) const {
    Activation<S> d_in = d_out;
    for (std::size_t i = 0; i < d_in.data.size(); ++i)
      if (!mask_[i]) d_in.data[i] = S(0);
    return d_in;
  }

 private:
  std::vector<unsigned char> mask_;
};

/// conv-norm-relu-conv-norm plus a shortcut (identity, or 1x1 conv-norm when
/// the shape changes), followed by a rectifier.
template <typename S>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int in_ch, int out_ch, int kernel, int stride, int padding, bool normalization)
      : conv1_(in_ch, out_ch, kernel, stride, padding),
        bn1_(out_ch, normalization),
        conv2_(out_ch, out_ch, kernel, 1, padding),
        bn2_(out_ch, normalization),
        projected_(stride != 1 || in_ch != out_ch) {
    if (projected_) {
      shortcut_ = Conv2d<S>(in_ch, out_ch, 1, stride, 0);
      bn_s_ = BatchNorm<S>(out_ch, normalization);
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (projected_) shortcut_.init(rng);
  }

  int out_size(int in) const {
    const int main = conv2_.out_size(conv1_.out_size(in));
    const int side = projected_ ? shortcut_.out_size(in) : in;
    if (main != side) throw Error(Errc::ShapeMismatch, "residual branch and shortcut disagree in size");
    return main;
  }

  Activation<S> infer(const Activation<S>& in) const {
    Activation<S> main = Relu<S>::infer(bn1_.infer(conv1_.infer(in)));
    main = bn2_.infer(conv2_.infer(main));
    const Activation<S> side = projected_ ? bn_s_.infer(shortcut_.infer(in)) : in;
    for (std::size_t i = 0; i < main.data.size(); ++i) main.data[i] += side.data[i];
    return Relu<S>::infer(std::move(main));
  }

  Activation<S> forward(const Activation<S>& in, bool training) {
    if (!training) return infer(in);
    Activation<S> main = relu1_.forward(bn1_.forward(conv1_.forward(in), training));
    main = bn2_.forward(conv2_.forward(main), training);
    if (projected_) {
      const Activation<S> side = bn_s_.forward(shortcut_.forward(in), training);
      for (std::size_t i = 0; i < main.data.size(); ++i) main.data[i] += side.data[i];
    } else {
      for (std::size_t i = 0; i < main.data.size(); ++i) main.data[i] += in.data[i];
    }
    return relu_out_.forward(main);
  }

  Activation<S> backward(const Activation<S>& d_out) {
    const Activation<S> d_sum = relu_out_.backward(d_out);
    Activation<S> d_main = bn2_.backward(d_sum);
    d_main = conv2_.backward(d_main, true);
    d_main = relu1_.backward(d_main);
    d_main = bn1_.backward(d_main);
    Activation<S> d_in = conv1_.backward(d_main, true);
    if (projected_) {
      const Activation<S> d_side = shortcut_.backward(bn_s_.backward(d_sum), true);
      for (std::size_t i = 0; i < d_in.data.size(); ++i) d_in.data[i] += d_side.data[i];
    } else {
      for (std::size_t i = 0; i < d_in.data.size(); ++i) d_in.data[i] += d_sum.data[i];
    }
    return d_in;
  }

  template <typename F>
  void visit(F&& f) {
    f(conv1_);
    f(bn1_);
    f(conv2_);
    f(bn2_);
    if (projected_) {
      f(shortcut_);
      f(bn_s_);
    }
  }

 private:
  Conv2d<S> conv1_;
  BatchNorm<S> bn1_;
  Relu<S> relu1_;
  Conv2d<S> conv2_;
  BatchNorm<S> bn2_;
  bool projected_ = false;
  Conv2d<S> shortcut_;
  BatchNorm<S> bn_s_;
  Relu<S> relu_out_;
};

/// Fully connected layer on the flattened (C, H, W) features of each sample.
template <typename S>
class Affine {
 public:
  Affine() = default;
  Affine(int in_features, int out_features) : in_(in_features), out_(out_features) {
    weight.resize(static_cast<std::size_t>(out_features) * in_features);
    bias.resize(static_cast<std::size_t>(out_features));
  }

  void init(Rng& rng) {
    init_uniform(weight, in_, rng);
    init_uniform(bias, in_, rng);
  }

  /// Returns (out_features x batch).
  MatrixR<S> infer(const Activation<S>& in) const {
    MatrixR<S> features;
    return run(in, features);
  }

  MatrixR<S> forward(const Activation<S>& in) {
    shape_ = {in.channels, in.batch, in.height, in.width};
    return run(in, features_);
  }

  Activation<S> backward(const MatrixR<S>& d_out) {
    Eigen::Map<MatrixR<S>> dw(weight.grad.data(), out_, in_);
    dw.noalias() += d_out * features_.transpose();
    for (int o = 0; o < out_; ++o) bias.grad[static_cast<std::size_t>(o)] += d_out.row(o).sum();
    Eigen::Map<const MatrixR<S>> w(weight.value.data(), out_, in_);
    const MatrixR<S> d_feat = w.transpose() * d_out;
    Activation<S> d_in(shape_[0], shape_[1], shape_[2], shape_[3]);
    const std::size_t plane = d_in.plane();
    for (int c = 0; c < d_in.channels; ++c) {
      S* dst = d_in.channel(c);
      for (int s = 0; s < d_in.batch; ++s) {
        S* p = dst + static_cast<std::size_t>(s) * plane;
        for (std::size_t k = 0; k < plane; ++k) p[k] = d_feat(static_cast<Eigen::Index>(c * plane + k), s);
      }
    }
    return d_in;
  }

  Param<S> weight;
  Param<S> bias;

 private:
  MatrixR<S> run(const Activation<S>& in, MatrixR<S>& features) const {
    const int n = in.batch;
    if (static_cast<std::size_t>(in.channels) * in.plane() != static_cast<std::size_t>(in_))
      throw Error(Errc::ShapeMismatch, "affine input features");
    features.resize(in_, n);
    const std::size_t plane = in.plane();
    for (int c = 0; c < in.channels; ++c) {
      const S* src = in.channel(c);
      for (int s = 0; s < n; ++s) {
        const S* p = src + static_cast<std::size_t>(s) * plane;
        for (std::size_t k = 0; k < plane; ++k)
          features(static_cast<Eigen::Index>(c * plane + k), s) = p[k];
      }
    }
    Eigen::Map<const MatrixR<S>> w(weight.value.data(), out_, in_);
    MatrixR<S> y = w * features;
    for (int o = 0; o < out_; ++o) y.row(o).array() += bias.value[static_cast<std::size_t>(o)];
    return y;
  }

  int in_ = 0;
  int out_ = 0;
  std::array<int, 4> shape_{};
  MatrixR<S> features_;
};

}  // namespace conepose::nn
