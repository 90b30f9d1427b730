#pragma once

// Small dense-tensor network library: conv3x3/conv1x1, batch norm, ReLU,
// 2x2 max pooling, global average pooling, dense layers, two losses,
// SGD-momentum and Adam, and the SNET1 checkpoint format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sononav/common.hpp"

namespace sononav::nn {

enum class Mode { train, eval };

// Storage aligned to the widest vector unit so Eigen reductions sum in the
// same order on every run.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

template <class S>
struct Tensor {
  std::vector<int> shape;
  Buffer<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, S fill = S(0)) : shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) {
      if (d <= 0) throw InvalidArgument("tensor dimensions must be positive");
      count *= static_cast<std::size_t>(d);
    }
    data.assign(count, fill);
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return rank() == 4 ? shape[2] : 1; }
  int w() const { return rank() == 4 ? shape[3] : 1; }
  std::size_t size() const { return data.size(); }
  // Elements per batch item.
  std::size_t stride() const { return data.size() / static_cast<std::size_t>(shape[0]); }

  S& operator[](std::size_t i) { return data[i]; }
  S operator[](std::size_t i) const { return data[i]; }
  S& at(int i, int ch, int y, int x) {
    return data[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }
  S at(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c() + ch) * h() + y) * w() + x];
  }
  S& at(int i, int k) { return data[static_cast<std::size_t>(i) * c() + k]; }
  S at(int i, int k) const { return data[static_cast<std::size_t>(i) * c() + k]; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](S v) { return std::isfinite(v); });
  }
};

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;

enum class LayerKind : std::uint32_t { conv3x3 = 1, conv1x1 = 2, batchnorm = 3, relu = 4, maxpool2 = 5, gap = 6, dense = 7 };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::conv1x1: return "conv1x1";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::gap: return "gap";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

// `in`/`out` are channel counts (features for dense). Shape-free layers leave them 0.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in = 0;
  int out = 0;
  bool operator==(const LayerSpec&) const = default;
};

template <class S>
struct ParamRef {
  Buffer<S>* value;
  Buffer<S>* grad;
};

template <class S>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerSpec spec() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  // Output shape for an input shape; throws on mismatch.
  virtual std::vector<int> output_shape(const std::vector<int>& in) const = 0;
  // Eval-mode forward without touching any cached state.
  virtual Tensor<S> infer(const Tensor<S>& x) const = 0;
  // Forward that records what backward needs. Train mode updates running statistics.
  virtual Tensor<S> forward(const Tensor<S>& x, Mode mode) = 0;
  // Accumulates parameter gradients and returns the input gradient.
  virtual Tensor<S> backward(const Tensor<S>& dy) = 0;
  // Parameter gradients only, for the first layer where nobody needs the input gradient.
  virtual void backward_params(const Tensor<S>& dy) { backward(dy); }
  virtual std::vector<ParamRef<S>> params() { return {}; }
  // Non-trainable state saved in checkpoints (batch-norm running statistics).
  virtual std::vector<Buffer<S>*> buffers() { return {}; }
};

namespace detail {

inline void require_rank4(const std::vector<int>& s, const char* who) {
  if (s.size() != 4) throw InvalidArgument(std::string(who) + " expects an (n,c,h,w) input");
}

template <class S>
void init_he(Buffer<S>& w, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w) v = static_cast<S>(nd(rng));
}

}  // namespace detail

// Square convolution, stride 1. k=3 uses zero padding 1; k=1 has no padding.
template <class S>
class Conv : public Layer<S> {
 public:
  Conv(int in, int out, int k, std::mt19937_64& rng) : in_(in), out_(out), k_(k) {
    if (in <= 0 || out <= 0) throw InvalidArgument("conv channel counts must be positive");
    if (k != 1 && k != 3) throw InvalidArgument("only 1x1 and 3x3 convolutions are supported");
    weight_.resize(static_cast<std::size_t>(out) * in * k * k);
    bias_.assign(static_cast<std::size_t>(out), S(0));
    detail::init_he(weight_, in * k * k, rng);
    weight_grad_.assign(weight_.size(), S(0));
    bias_grad_.assign(bias_.size(), S(0));
  }

  LayerSpec spec() const override { return {k_ == 3 ? LayerKind::conv3x3 : LayerKind::conv1x1, in_, out_}; }
  std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<Conv>(*this); }

  std::vector<int> output_shape(const std::vector<int>& in) const override {
    detail::require_rank4(in, "conv");
    if (in[1] != in_) throw InvalidArgument("conv expects " + std::to_string(in_) + " channels, got " + std::to_string(in[1]));
    return {in[0], out_, in[2], in[3]};
  }

  Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> y(output_shape(x.shape));
    const int hw = x.h() * x.w();
    ConstMapMat<S> wm(weight_.data(), out_, in_ * k_ * k_);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> b(bias_.data(), out_);
    RowMat<S> cols;
    for (int i = 0; i < x.n(); ++i) {
      MapMat<S> ym(y.data.data() + static_cast<std::size_t>(i) * y.stride(), out_, hw);
      if (k_ == 1) {
        ym.noalias() = wm * ConstMapMat<S>(x.data.data() + static_cast<std::size_t>(i) * x.stride(), in_, hw);
      } else {
        im2col(x, i, cols);
        ym.noalias() = wm * cols;
      }
      ym.colwise() += b;
    }
    return y;
  }

  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    input_ = x;
    return infer(x);
  }

  Tensor<S> backward(const Tensor<S>& dy) override { return backprop(dy, true); }
  void backward_params(const Tensor<S>& dy) override { backprop(dy, false); }

  std::vector<ParamRef<S>> params() override { return {{&weight_, &weight_grad_}, {&bias_, &bias_grad_}}; }

  Buffer<S>& weight() { return weight_; }
  Buffer<S>& bias() { return bias_; }

 private:
  Tensor<S> backprop(const Tensor<S>& dy, bool input_grad) {
    const Tensor<S>& x = input_;
    Tensor<S> dx(input_grad ? x.shape : std::vector<int>{});
    const int hw = x.h() * x.w();
    ConstMapMat<S> wm(weight_.data(), out_, in_ * k_ * k_);
    MapMat<S> dw(weight_grad_.data(), out_, in_ * k_ * k_);
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> db(bias_grad_.data(), out_);
    RowMat<S> cols, dcols;
    for (int i = 0; i < x.n(); ++i) {
      ConstMapMat<S> g(dy.data.data() + static_cast<std::size_t>(i) * dy.stride(), out_, hw);
      db += g.rowwise().sum();
      if (k_ == 1) {
        ConstMapMat<S> xm(x.data.data() + static_cast<std::size_t>(i) * x.stride(), in_, hw);
        dw.noalias() += g * xm.transpose();
        if (input_grad) MapMat<S>(dx.data.data() + static_cast<std::size_t>(i) * dx.stride(), in_, hw).noalias() = wm.transpose() * g;
      } else {
        im2col(x, i, cols);
        dw.noalias() += g * cols.transpose();
        if (!input_grad) continue;
        dcols.noalias() = wm.transpose() * g;
        col2im(dcols, dx, i);
      }
    }
    return dx;
  }

  // Rows are (channel, ky, kx); columns are output pixels.
  void im2col(const Tensor<S>& x, int i, RowMat<S>& cols) const {
    const int h = x.h(), w = x.w();
    cols.resize(in_ * 9, h * w);
    const S* src = x.data.data() + static_cast<std::size_t>(i) * x.stride();
    for (int ch = 0; ch < in_; ++ch) {
      const S* plane = src + static_cast<std::size_t>(ch) * h * w;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          S* row = cols.data() + static_cast<std::size_t>((ch * 3 + ky) * 3 + kx) * h * w;
          for (int y = 0; y < h; ++y) {
            int sy = y + ky - 1;
            S* out = row + static_cast<std::size_t>(y) * w;
            if (sy < 0 || sy >= h) {
              std::fill(out, out + w, S(0));
              continue;
            }
            const S* in = plane + static_cast<std::size_t>(sy) * w;
            int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
            std::fill(out, out + x0, S(0));
            std::copy(in + x0 + kx - 1, in + x1 + kx - 1, out + x0);
            std::fill(out + x1, out + w, S(0));
          }
        }
      }
    }
  }

  void col2im(const RowMat<S>& cols, Tensor<S>& dx, int i) const {
    const int h = dx.h(), w = dx.w();
    S* dst = dx.data.data() + static_cast<std::size_t>(i) * dx.stride();
    for (int ch = 0; ch < in_; ++ch) {
      S* plane = dst + static_cast<std::size_t>(ch) * h * w;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const S* row = cols.data() + static_cast<std::size_t>((ch * 3 + ky) * 3 + kx) * h * w;
          for (int y = 0; y < h; ++y) {
            int sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            S* out = plane + static_cast<std::size_t>(sy) * w;
            const S* in = row + static_cast<std::size_t>(y) * w;
            int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
            for (int xx = x0; xx < x1; ++xx) out[xx + kx - 1] += in[xx];
          }
        }
      }
    }
  }

  int in_, out_, k_;
  Buffer<S> weight_, bias_, weight_grad_, bias_grad_;
  Tensor<S> input_;
};

// Per-channel batch normalization over (n,h,w); rank-2 inputs normalize per feature.
template <class S>
class BatchNorm : public Layer<S> {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  explicit BatchNorm(int channels)
      : c_(channels),
        gamma_(static_cast<std::size_t>(channels), S(1)),
        beta_(static_cast<std::size_t>(channels), S(0)),
        running_mean_(static_cast<std::size_t>(channels), S(0)),
        running_var_(static_cast<std::size_t>(channels), S(1)),
        gamma_grad_(static_cast<std::size_t>(channels), S(0)),
        beta_grad_(static_cast<std::size_t>(channels), S(0)) {
    if (channels <= 0) throw InvalidArgument("batchnorm needs a positive channel count");
  }

  LayerSpec spec() const override { return {LayerKind::batchnorm, c_, c_}; }
  std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<BatchNorm>(*this); }

  std::vector<int> output_shape(const std::vector<int>& in) const override {
    if ((in.size() != 4 && in.size() != 2) || in[1] != c_)
      throw InvalidArgument("batchnorm expects " + std::to_string(c_) + " channels");
    return in;
  }

  Tensor<S> infer(const Tensor<S>& x) const override {
    output_shape(x.shape);
    Tensor<S> y(x.shape);
    const std::size_t hw = static_cast<std::size_t>(x.h()) * x.w();
    for (int ch = 0; ch < c_; ++ch) {
      S scale = gamma_[ch] / static_cast<S>(std::sqrt(static_cast<double>(running_var_[ch]) + kEps));
      S shift = beta_[ch] - running_mean_[ch] * scale;
      for (int i = 0; i < x.n(); ++i) {
        std::size_t base = (static_cast<std::size_t>(i) * c_ + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) y.data[base + k] = x.data[base + k] * scale + shift;
      }
    }
    return y;
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    output_shape(x.shape);
    mode_ = mode;
    shape_ = x.shape;
    if (mode == Mode::eval) {
      inv_std_.resize(static_cast<std::size_t>(c_));
      for (int ch = 0; ch < c_; ++ch)
        inv_std_[ch] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(running_var_[ch]) + kEps));
      return infer(x);
    }
    const std::size_t hw = static_cast<std::size_t>(x.h()) * x.w();
    const double m = static_cast<double>(x.n()) * static_cast<double>(hw);
    xhat_ = Tensor<S>(x.shape);
    inv_std_.assign(static_cast<std::size_t>(c_), S(0));
    Tensor<S> y(x.shape);
    const Eigen::Index len = static_cast<Eigen::Index>(hw);
    for (int ch = 0; ch < c_; ++ch) {
      // Per-plane partial sums in S, accumulated across planes in double.
      double sum = 0;
      for (int i = 0; i < x.n(); ++i) sum += plane(x.data.data(), i, ch, len).sum();
      const double mean = sum / m;
      double sq = 0;
      for (int i = 0; i < x.n(); ++i) sq += (plane(x.data.data(), i, ch, len) - static_cast<S>(mean)).square().sum();
      const double var = sq / m;
      const double inv = 1.0 / std::sqrt(var + kEps);
      inv_std_[ch] = static_cast<S>(inv);
      for (int i = 0; i < x.n(); ++i) {
        auto xh = plane(xhat_.data.data(), i, ch, len);
        xh = (plane(x.data.data(), i, ch, len) - static_cast<S>(mean)) * static_cast<S>(inv);
        plane(y.data.data(), i, ch, len) = xh * gamma_[ch] + beta_[ch];
      }
      double unbiased = m > 1 ? sq / (m - 1) : var;
      running_mean_[ch] = static_cast<S>((1 - kMomentum) * running_mean_[ch] + kMomentum * mean);
      running_var_[ch] = static_cast<S>((1 - kMomentum) * running_var_[ch] + kMomentum * unbiased);
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy) override {
    Tensor<S> dx(shape_);
    const std::size_t hw = static_cast<std::size_t>(dx.h()) * dx.w();
    const int n = dx.n();
    if (mode_ == Mode::eval) {
      for (int ch = 0; ch < c_; ++ch) {
        S scale = gamma_[ch] * inv_std_[ch];
        for (int i = 0; i < n; ++i) {
          std::size_t base = (static_cast<std::size_t>(i) * c_ + ch) * hw;
          for (std::size_t k = 0; k < hw; ++k) dx.data[base + k] = dy.data[base + k] * scale;
        }
      }
      // Affine gradients need xhat under running statistics; rarely used, so not cached.
      return dx;
    }
    const double m = static_cast<double>(n) * static_cast<double>(hw);
    const Eigen::Index len = static_cast<Eigen::Index>(hw);
    for (int ch = 0; ch < c_; ++ch) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int i = 0; i < n; ++i) {
        auto g = plane(dy.data.data(), i, ch, len);
        sum_dy += g.sum();
        sum_dy_xhat += (g * plane(xhat_.data.data(), i, ch, len)).sum();
      }
      gamma_grad_[ch] += static_cast<S>(sum_dy_xhat);
      beta_grad_[ch] += static_cast<S>(sum_dy);
      const S scale = static_cast<S>(static_cast<double>(gamma_[ch]) * inv_std_[ch] / m);
      const S a = static_cast<S>(m), b = static_cast<S>(sum_dy), c = static_cast<S>(sum_dy_xhat);
      for (int i = 0; i < n; ++i)
        plane(dx.data.data(), i, ch, len) = scale * (a * plane(dy.data.data(), i, ch, len) - b - plane(xhat_.data.data(), i, ch, len) * c);
    }
    return dx;
  }

  std::vector<ParamRef<S>> params() override { return {{&gamma_, &gamma_grad_}, {&beta_, &beta_grad_}}; }
  std::vector<Buffer<S>*> buffers() override { return {&running_mean_, &running_var_}; }

  // Normalized activations of the last train-mode forward.
  const Tensor<S>& normalized() const { return xhat_; }

 private:
  using PlaneMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstPlaneMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

  PlaneMap plane(S* base, int i, int ch, Eigen::Index len) const {
    return PlaneMap(base + (static_cast<std::size_t>(i) * c_ + ch) * static_cast<std::size_t>(len), len);
  }
  ConstPlaneMap plane(const S* base, int i, int ch, Eigen::Index len) const {
    return ConstPlaneMap(base + (static_cast<std::size_t>(i) * c_ + ch) * static_cast<std::size_t>(len), len);
  }

  int c_;
  Buffer<S> gamma_, beta_, running_mean_, running_var_, gamma_grad_, beta_grad_;
  Mode mode_ = Mode::eval;
  std::vector<int> shape_;
  Tensor<S> xhat_;
  Buffer<S> inv_std_;
};

template <class S>
class Relu : public Layer<S> {
 public:
  LayerSpec spec() const override { return {LayerKind::relu, 0, 0}; }
  std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<Relu>(*this); }
  std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }
  Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> y;
    y.shape = x.shape;
    y.data.resize(x.size());
    ArrayMap(y.data.data(), y.size()) = ConstArrayMap(x.data.data(), x.size()).max(S(0));
    return y;
  }
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    input_ = x;
    return infer(x);
  }
  Tensor<S> backward(const Tensor<S>& dy) override {
    Tensor<S> dx;
    dx.shape = dy.shape;
    dx.data.resize(dy.size());
    ConstArrayMap x(input_.data.data(), input_.size());
    ArrayMap(dx.data.data(), dx.size()) = (x > S(0)).select(ConstArrayMap(dy.data.data(), dy.size()), S(0));
    return dx;
  }

 private:
  using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
  Tensor<S> input_;
};

// 2x2 window, stride 2, floor on odd extents; ties go to the first element in scan order.
template <class S>
class MaxPool2 : public Layer<S> {
 public:
  LayerSpec spec() const override { return {LayerKind::maxpool2, 0, 0}; }
  std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<MaxPool2>(*this); }
  std::vector<int> output_shape(const std::vector<int>& in) const override {
    detail::require_rank4(in, "maxpool");
    if (in[2] < 2 || in[3] < 2) throw InvalidArgument("maxpool input smaller than its window");
    return {in[0], in[1], in[2] / 2, in[3] / 2};
  }
  Tensor<S> infer(const Tensor<S>& x) const override { return run(x, nullptr); }
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    in_shape_ = x.shape;
    return run(x, &argmax_);
  }
  Tensor<S> backward(const Tensor<S>& dy) override {
    Tensor<S> dx(in_shape_);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[argmax_[i]] += dy.data[i];
    return dx;
  }

 private:
  Tensor<S> run(const Tensor<S>& x, std::vector<std::size_t>* arg) const {
    Tensor<S> y(output_shape(x.shape));
    if (arg) arg->resize(y.size());
    const int h = x.h(), w = x.w(), oh = y.h(), ow = y.w();
    std::size_t o = 0;
    for (int p = 0; p < x.n() * x.c(); ++p) {
      std::size_t base = static_cast<std::size_t>(p) * h * w;
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * yy) * w + 2 * xx;
          for (std::size_t cand : {best + 1, best + w, best + w + 1})
            if (x.data[cand] > x.data[best]) best = cand;
          y.data[o] = x.data[best];
          if (arg) (*arg)[o] = best;
        }
      }
    }
    return y;
  }

  std::vector<int> in_shape_;
  std::vector<std::size_t> argmax_;
};

// (n,c,h,w) -> (n,c) spatial mean.
template <class S>
class GlobalAvgPool : public Layer<S> {
 public:
  LayerSpec spec() const override { return {LayerKind::gap, 0, 0}; }
  std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
  std::vector<int> output_shape(const std::vector<int>& in) const override {
    detail::require_rank4(in, "global average pooling");
    return {in[0], in[1]};
  }
  Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> y(output_shape(x.shape));
    const std::size_t hw = static_cast<std::size_t>(x.h()) * x.w();
    for (std::size_t p = 0; p < y.size(); ++p) {
      double s = 0;
      for (std::size_t k = 0; k < hw; ++k) s += x.data[p * hw + k];
      y.data[p] = static_cast<S>(s / static_cast<double>(hw));
    }
    return y;
  }
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    in_shape_ = x.shape;
    return infer(x);
  }
  Tensor<S> backward(const Tensor<S>& dy) override {
    Tensor<S> dx(in_shape_);
    const std::size_t hw = static_cast<std::size_t>(dx.h()) * dx.w();
    for (std::size_t p = 0; p < dy.size(); ++p) {
      S g = dy.data[p] / static_cast<S>(hw);
      std::fill(dx.data.begin() + static_cast<std::ptrdiff_t>(p * hw), dx.data.begin() + static_cast<std::ptrdiff_t>((p + 1) * hw), g);
    }
    return dx;
  }

 private:
  std::vector<int> in_shape_;
};

// Fully connected layer; rank-4 inputs are flattened per batch item.
template <class S>
class Dense : public Layer<S> {
 public:
  Dense(int in, int out, std::mt19937_64& rng) : in_(in), out_(out) {
    if (in <= 0 || out <= 0) throw InvalidArgument("dense sizes must be positive");
    weight_.resize(static_cast<std::size_t>(out) * in);
    detail::init_he(weight_, in, rng);
    bias_.assign(static_cast<std::size_t>(out), S(0));
    weight_grad_.assign(weight_.size(), S(0));
    bias_grad_.assign(bias_.size(), S(0));
  }

  LayerSpec spec() const override { return {LayerKind::dense, in_, out_}; }
  std::unique_ptr<Layer<S>> clone() const override { return std::make_unique<Dense>(*this); }
  std::vector<int> output_shape(const std::vector<int>& in) const override {
    std::size_t features = 1;
    for (std::size_t i = 1; i < in.size(); ++i) features *= static_cast<std::size_t>(in[i]);
    if (in.size() < 2 || features != static_cast<std::size_t>(in_))
      throw InvalidArgument("dense expects " + std::to_string(in_) + " input features");
    return {in[0], out_};
  }
  Tensor<S> infer(const Tensor<S>& x) const override {
    Tensor<S> y(output_shape(x.shape));
    ConstMapMat<S> xm(x.data.data(), x.n(), in_);
    ConstMapMat<S> wm(weight_.data(), out_, in_);
    MapMat<S> ym(y.data.data(), x.n(), out_);
    ym.noalias() = xm * wm.transpose();
    Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> b(bias_.data(), out_);
    ym.rowwise() += b;
    return y;
  }
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    input_ = x;
    return infer(x);
  }
  Tensor<S> backward(const Tensor<S>& dy) override {
    Tensor<S> dx(input_.shape);
    const int n = input_.n();
    ConstMapMat<S> xm(input_.data.data(), n, in_);
    ConstMapMat<S> g(dy.data.data(), n, out_);
    ConstMapMat<S> wm(weight_.data(), out_, in_);
    MapMat<S>(weight_grad_.data(), out_, in_).noalias() += g.transpose() * xm;
    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias_grad_.data(), out_) += g.colwise().sum();
    MapMat<S>(dx.data.data(), n, in_).noalias() = g * wm;
    return dx;
  }
  std::vector<ParamRef<S>> params() override { return {{&weight_, &weight_grad_}, {&bias_, &bias_grad_}}; }

 private:
  int in_, out_;
  Buffer<S> weight_, bias_, weight_grad_, bias_grad_;
  Tensor<S> input_;
};

template <class S>
std::unique_ptr<Layer<S>> make_layer(const LayerSpec& s, std::mt19937_64& rng) {
  switch (s.kind) {
    case LayerKind::conv3x3: return std::make_unique<Conv<S>>(s.in, s.out, 3, rng);
    case LayerKind::conv1x1: return std::make_unique<Conv<S>>(s.in, s.out, 1, rng);
    case LayerKind::batchnorm: return std::make_unique<BatchNorm<S>>(s.in);
    case LayerKind::relu: return std::make_unique<Relu<S>>();
    case LayerKind::maxpool2: return std::make_unique<MaxPool2<S>>();
    case LayerKind::gap: return std::make_unique<GlobalAvgPool<S>>();
    case LayerKind::dense: return std::make_unique<Dense<S>>(s.in, s.out, rng);
  }
  throw InvalidArgument("unknown layer kind");
}

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[] = "SNET1\n";

template <class S = float>
class Network {
 public:
  Network() = default;
  Network(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& s : specs) layers_.push_back(make_layer<S>(s, rng));
  }
  Network(const Network& o) { *this = o; }
  Network(Network&&) noexcept = default;
  Network& operator=(const Network& o) {
    if (this == &o) return *this;
    layers_.clear();
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
    check_finite_ = o.check_finite_;
    return *this;
  }
  Network& operator=(Network&&) noexcept = default;

  std::size_t size() const { return layers_.size(); }
  Layer<S>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<S>& layer(std::size_t i) const { return *layers_[i]; }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l->spec());
    return out;
  }

  std::vector<int> output_shape(std::vector<int> shape) const {
    for (const auto& l : layers_) shape = l->output_shape(shape);
    return shape;
  }

  // Abort with InvalidArgument as soon as a layer produces a non-finite value.
  void set_check_finite(bool on) { check_finite_ = on; }

  Tensor<S> infer(const Tensor<S>& x) const {
    Tensor<S> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i]->infer(h);
      guard(h, i);
    }
    return h;
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) {
    Tensor<S> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i]->forward(h, mode);
      guard(h, i);
    }
    return h;
  }

  Tensor<S> backward(const Tensor<S>& dy) {
    Tensor<S> g = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
    return g;
  }

  // Same parameter gradients as backward, without the gradient with respect to the input.
  void backward_params(const Tensor<S>& dy) {
    if (layers_.empty()) return;
    Tensor<S> g = dy;
    for (std::size_t i = layers_.size(); i-- > 1;) g = layers_[i]->backward(g);
    layers_.front()->backward_params(g);
  }

  std::vector<ParamRef<S>> params() {
    std::vector<ParamRef<S>> out;
    for (auto& l : layers_)
      for (auto& p : l->params()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto& p : params()) std::fill(p.grad->begin(), p.grad->end(), S(0));
  }

  void save(std::ostream& os) const;
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open for writing: " + path);
    save(os);
  }
  static Network load(std::istream& is);
  static Network load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifact("cannot open checkpoint: " + path);
    return load(is);
  }

 private:
  void guard(const Tensor<S>& h, std::size_t i) const {
#ifndef NDEBUG
    constexpr bool debug = true;
#else
    constexpr bool debug = false;
#endif
    if ((debug || check_finite_) && !h.all_finite())
      throw InvalidArgument("non-finite activation after layer " + std::to_string(i) + " (" +
                            to_string(layers_[i]->spec().kind) + ")");
  }

  std::vector<std::unique_ptr<Layer<S>>> layers_;
  bool check_finite_ = false;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated checkpoint");
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 | std::uint32_t{b[3]} << 24;
}

template <class S>
void put_blob(std::ostream& os, const Buffer<S>& v) {
  put_u32(os, static_cast<std::uint32_t>(v.size()));
  for (S x : v) {
    float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
  }
}

template <class S>
void get_blob(std::istream& is, Buffer<S>& v) {
  std::uint32_t n = get_u32(is);
  if (n != v.size()) throw CheckpointError("checkpoint blob size mismatch");
  for (auto& x : v) {
    std::uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    x = static_cast<S>(f);
  }
}

}  // namespace detail

// Layout: magic, u32 layer count, per layer (u32 kind, u32 in, u32 out), then per layer
// every parameter blob followed by every buffer blob as (u32 count, f32 values).
template <class S>
void Network<S>::save(std::ostream& os) const {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::put_u32(os, static_cast<std::uint32_t>(layers_.size()));
  for (const auto& l : layers_) {
    LayerSpec s = l->spec();
    detail::put_u32(os, static_cast<std::uint32_t>(s.kind));
    detail::put_u32(os, static_cast<std::uint32_t>(s.in));
    detail::put_u32(os, static_cast<std::uint32_t>(s.out));
  }
  for (const auto& l : layers_) {
    for (auto& p : l->params()) detail::put_blob(os, *p.value);
    for (auto* b : l->buffers()) detail::put_blob(os, *b);
  }
  if (!os) throw Error("failed writing checkpoint");
}

template <class S>
Network<S> Network<S>::load(std::istream& is) {
  char magic[sizeof(kCheckpointMagic) - 1];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("not an SNET1 checkpoint");
  std::uint32_t count = detail::get_u32(is);
  if (count > 4096) throw CheckpointError("implausible layer count");
  std::vector<LayerSpec> specs;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec s;
    std::uint32_t kind = detail::get_u32(is);
    if (kind < 1 || kind > 7) throw CheckpointError("unknown layer kind in checkpoint");
    s.kind = static_cast<LayerKind>(kind);
    s.in = static_cast<int>(detail::get_u32(is));
    s.out = static_cast<int>(detail::get_u32(is));
    if (s.in > (1 << 24) || s.out > (1 << 24)) throw CheckpointError("implausible layer size");
    specs.push_back(s);
  }
  Network net;
  try {
    net = Network(specs, 0);
  } catch (const InvalidArgument& e) {
    throw CheckpointError(std::string("bad layer in checkpoint: ") + e.what());
  }
  for (auto& l : net.layers_) {
    for (auto& p : l->params()) detail::get_blob(is, *p.value);
    for (auto* b : l->buffers()) detail::get_blob(is, *b);
  }
  return net;
}

// ---- losses ----

template <class S>
struct LossResult {
  double loss = 0;
  Tensor<S> grad;  // d loss / d input
};

template <class S>
Tensor<S> softmax(const Tensor<S>& logits) {
  Tensor<S> p(logits.shape);
  const int k = logits.c();
  for (int i = 0; i < logits.n(); ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max<double>(mx, logits.at(i, j));
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(logits.at(i, j)) - mx);
    for (int j = 0; j < k; ++j) p.at(i, j) = static_cast<S>(std::exp(static_cast<double>(logits.at(i, j)) - mx) / z);
  }
  return p;
}

// Mean over the batch of -log p(label).
template <class S>
LossResult<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.n()) != labels.size())
    throw InvalidArgument("cross-entropy needs (n,k) logits and n labels");
  LossResult<S> r;
  r.grad = softmax(logits);
  const int n = logits.n();
  for (int i = 0; i < n; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.c()) throw InvalidArgument("label out of range");
    r.loss -= std::log(std::max(static_cast<double>(r.grad.at(i, y)), 1e-300));
    r.grad.at(i, y) -= S(1);
  }
  for (auto& g : r.grad.data) g /= static_cast<S>(n);
  r.loss /= n;
  return r;
}

// Mean over the batch of (pred[i, a_i] - y_i)^2; other outputs receive no gradient.
template <class S>
LossResult<S> selected_squared_error(const Tensor<S>& pred, const std::vector<int>& actions, const std::vector<double>& targets) {
  if (pred.rank() != 2 || static_cast<std::size_t>(pred.n()) != actions.size() || actions.size() != targets.size())
    throw InvalidArgument("squared error needs (n,k) predictions with n actions and n targets");
  LossResult<S> r;
  r.grad = Tensor<S>(pred.shape);
  const int n = pred.n();
  for (int i = 0; i < n; ++i) {
    int a = actions[static_cast<std::size_t>(i)];
    if (a < 0 || a >= pred.c()) throw InvalidArgument("action out of range");
    double e = static_cast<double>(pred.at(i, a)) - targets[static_cast<std::size_t>(i)];
    r.loss += e * e;
    r.grad.at(i, a) = static_cast<S>(2 * e / n);
  }
  r.loss /= n;
  return r;
}

// ---- optimizers ----

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class S>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  const OptimizerConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  void step(const std::vector<ParamRef<S>>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value->size(), 0.0);
        if (cfg_.kind == OptimizerKind::adam) v_.emplace_back(p.value->size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw InvalidArgument("optimizer used with a different parameter set");
    ++t_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& val = *params[k].value;
      const auto& g = *params[k].grad;
      if (val.size() != m_[k].size() || g.size() != val.size()) throw InvalidArgument("parameter shape changed");
      auto& m = m_[k];
      if (cfg_.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < val.size(); ++i) {
          m[i] = cfg_.momentum * m[i] + g[i];
          val[i] = static_cast<S>(val[i] - cfg_.lr * m[i]);
        }
      } else {
        auto& v = v_[k];
        double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < val.size(); ++i) {
          m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
          v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * static_cast<double>(g[i]) * g[i];
          double mh = m[i] / bc1, vh = v[i] / bc2;
          val[i] = static_cast<S>(val[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
        }
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace sononav::nn
