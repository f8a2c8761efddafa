#pragma once
// Minimal layer library with explicit reverse-mode passes.
//
// Activations are stored channel-fastest: a (C x B*H*W) column-major matrix
// whose column b*H*W + y*W + x holds all channels of one pixel of sample b.
// The block of one sample is then contiguous, which lets a dense layer view
// it as a (C*H*W x B) matrix without copying.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dmfa/error.hpp"
#include "dmfa/lowrank_gauss.hpp"
#include "dmfa/optim.hpp"

namespace dmfa::nn {

using json = nlohmann::json;

template <typename T>
struct Activation {
  Mat<T> data;
  int batch = 0;
  int height = 1;
  int width = 1;

  Index channels() const { return data.rows(); }
  Index pixels() const { return static_cast<Index>(height) * width; }
};

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  ParamRef<T> ref() {
    return {name, {value.data(), static_cast<std::size_t>(value.size())},
            {grad.data(), static_cast<std::size_t>(grad.size())}};
  }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  /// Caches whatever backward() needs.
  virtual Activation<T> forward(const Activation<T>& x) = 0;
  /// Accumulates parameter gradients and returns the gradient w.r.t. the input
  /// of the last forward() call.
  virtual Activation<T> backward(const Activation<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual json describe() const = 0;
};

/// Sliding-window geometry between a "big" grid and the "small" grid of
/// kernel positions: small = (big + 2 pad - kernel) / stride + 1.
struct WindowGeometry {
  int kernel = 3, stride = 1, pad = 1;
  int big_h = 0, big_w = 0, small_h = 0, small_w = 0;

  static int small_extent(int big, int kernel, int stride, int pad) { return (big + 2 * pad - kernel) / stride + 1; }
};

/// Gathers kernel windows of `big` (C x B*Hb*Wb) into (K*K*C x B*Hs*Ws);
/// row (ky*K + kx)*C + c.
template <typename T>
Mat<T> im2col(const Mat<T>& big, const WindowGeometry& g, int batch) {
  const Index c = big.rows();
  const int k = g.kernel;
  Mat<T> cols = Mat<T>::Zero(static_cast<Index>(k) * k * c, static_cast<Index>(batch) * g.small_h * g.small_w);
  for (int b = 0; b < batch; ++b)
    for (int oy = 0; oy < g.small_h; ++oy)
      for (int ox = 0; ox < g.small_w; ++ox) {
        const Index col = (static_cast<Index>(b) * g.small_h + oy) * g.small_w + ox;
        T* dst = cols.col(col).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.big_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.big_w) continue;
            const Index src = (static_cast<Index>(b) * g.big_h + iy) * g.big_w + ix;
            std::memcpy(dst + (ky * k + kx) * c, big.col(src).data(), sizeof(T) * static_cast<std::size_t>(c));
          }
        }
      }
  return cols;
}

/// Adjoint of im2col: scatter-adds windows back onto the big grid.
template <typename T>
Mat<T> col2im(const Mat<T>& cols, const WindowGeometry& g, int batch, Index channels) {
  const int k = g.kernel;
  Mat<T> big = Mat<T>::Zero(channels, static_cast<Index>(batch) * g.big_h * g.big_w);
  for (int b = 0; b < batch; ++b)
    for (int oy = 0; oy < g.small_h; ++oy)
      for (int ox = 0; ox < g.small_w; ++ox) {
        const Index col = (static_cast<Index>(b) * g.small_h + oy) * g.small_w + ox;
        const T* src = cols.col(col).data();
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.big_h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.big_w) continue;
            const Index dst = (static_cast<Index>(b) * g.big_h + iy) * g.big_w + ix;
            T* d = big.col(dst).data();
            const T* s = src + (ky * k + kx) * channels;
            for (Index ch = 0; ch < channels; ++ch) d[ch] += s[ch];
          }
        }
      }
  return big;
}

template <typename T, typename Rng>
void fill_normal(Mat<T>& m, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

/// He initialization scale for a leaky-ReLU network.
inline double he_std(Index fan_in, double slope = 0.2) {
  return std::sqrt(2.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
}

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  template <typename Rng>
  Conv2d(std::string name, int in_c, int out_c, int kernel, int stride, int pad, Rng& rng, bool input_grad = true)
      : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad), input_grad_(input_grad) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.value.resize(out_c, static_cast<Index>(kernel) * kernel * in_c);
    fill_normal(weight_.value, he_std(weight_.value.cols()), rng);
    bias_.value = Mat<T>::Zero(out_c, 1);
    weight_.zero_grad();
    bias_.zero_grad();
  }

  Activation<T> forward(const Activation<T>& x) override {
    if (x.channels() != in_c_) throw ShapeError("Conv2d: expected " + std::to_string(in_c_) + " input channels");
    geom_ = {kernel_, stride_, pad_, x.height, x.width,
             WindowGeometry::small_extent(x.height, kernel_, stride_, pad_),
             WindowGeometry::small_extent(x.width, kernel_, stride_, pad_)};
    batch_ = x.batch;
    cols_ = im2col(x.data, geom_, x.batch);
    Activation<T> y{Mat<T>(out_c_, cols_.cols()), x.batch, geom_.small_h, geom_.small_w};
    y.data.noalias() = weight_.value * cols_;
    y.data.colwise() += bias_.value.col(0);
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) override {
    weight_.grad.noalias() += dy.data * cols_.transpose();
    bias_.grad.col(0) += dy.data.rowwise().sum();
    Activation<T> dx{Mat<T>(), batch_, geom_.big_h, geom_.big_w};
    if (input_grad_) {
      const Mat<T> dcols = weight_.value.transpose() * dy.data;
      dx.data = col2im(dcols, geom_, batch_, in_c_);
    }
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  json describe() const override {
    return {{"type", "conv"}, {"in", in_c_}, {"out", out_c_}, {"kernel", kernel_}, {"stride", stride_}, {"pad", pad_}};
  }

 private:
  int in_c_, out_c_, kernel_, stride_, pad_;
  bool input_grad_;
  Param<T> weight_, bias_;
  WindowGeometry geom_;
  int batch_ = 0;
  Mat<T> cols_;
};

/// Transposed convolution (fractionally strided), the adjoint of Conv2d's
/// window map. The output extent is fixed at construction so that decoder
/// layers reproduce the encoder's grid sizes exactly.
template <typename T>
class ConvTranspose2d final : public Layer<T> {
 public:
  template <typename Rng>
  ConvTranspose2d(std::string name, int in_c, int out_c, int kernel, int stride, int pad, int out_h, int out_w,
                  Rng& rng)
      : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad), out_h_(out_h), out_w_(out_w) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.value.resize(static_cast<Index>(kernel) * kernel * out_c, in_c);
    // fan-in of an output pixel is about in_c * (kernel / stride)^2
    const double fan_in = std::max(1.0, in_c * std::pow(static_cast<double>(kernel) / stride, 2));
    fill_normal(weight_.value, std::sqrt(2.0 / (1.04 * fan_in)), rng);
    bias_.value = Mat<T>::Zero(out_c, 1);
    weight_.zero_grad();
    bias_.zero_grad();
  }

  Activation<T> forward(const Activation<T>& x) override {
    if (x.channels() != in_c_) throw ShapeError("ConvTranspose2d: unexpected input channel count");
    geom_ = {kernel_, stride_, pad_, out_h_, out_w_, x.height, x.width};
    if (WindowGeometry::small_extent(out_h_, kernel_, stride_, pad_) != x.height ||
        WindowGeometry::small_extent(out_w_, kernel_, stride_, pad_) != x.width) {
      throw ShapeError("ConvTranspose2d: input grid does not match the configured output size");
    }
    batch_ = x.batch;
    input_ = x.data;
    const Mat<T> cols = weight_.value * x.data;
    Activation<T> y{col2im(cols, geom_, x.batch, out_c_), x.batch, out_h_, out_w_};
    y.data.colwise() += bias_.value.col(0);
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) override {
    const Mat<T> dcols = im2col(dy.data, geom_, batch_);
    weight_.grad.noalias() += dcols * input_.transpose();
    bias_.grad.col(0) += dy.data.rowwise().sum();
    Activation<T> dx{Mat<T>(in_c_, dcols.cols()), batch_, geom_.small_h, geom_.small_w};
    dx.data.noalias() = weight_.value.transpose() * dcols;
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  json describe() const override {
    return {{"type", "deconv"}, {"in", in_c_},       {"out", out_c_},  {"kernel", kernel_},
            {"stride", stride_}, {"pad", pad_},      {"out_h", out_h_}, {"out_w", out_w_}};
  }

 private:
  int in_c_, out_c_, kernel_, stride_, pad_, out_h_, out_w_;
  Param<T> weight_, bias_;
  WindowGeometry geom_;
  int batch_ = 0;
  Mat<T> input_;
};

/// Fully connected layer over the flattened per-sample block; output is an
/// activation with a 1x1 grid.
template <typename T>
class Dense final : public Layer<T> {
 public:
  template <typename Rng>
  Dense(std::string name, Index in, Index out, double init_std, Rng& rng) : in_(in), out_(out) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.value.resize(out, in);
    fill_normal(weight_.value, init_std, rng);
    bias_.value = Mat<T>::Zero(out, 1);
    weight_.zero_grad();
    bias_.zero_grad();
  }

  Param<T>& bias() { return bias_; }

  Activation<T> forward(const Activation<T>& x) override {
    if (x.channels() * x.pixels() != in_) throw ShapeError("Dense: unexpected input size");
    in_shape_ = {Mat<T>(), x.batch, x.height, x.width};
    in_channels_ = x.channels();
    input_ = Eigen::Map<const Mat<T>>(x.data.data(), in_, x.batch);
    Activation<T> y{Mat<T>(out_, x.batch), x.batch, 1, 1};
    y.data.noalias() = weight_.value * input_;
    y.data.colwise() += bias_.value.col(0);
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) override {
    weight_.grad.noalias() += dy.data * input_.transpose();
    bias_.grad.col(0) += dy.data.rowwise().sum();
    const Mat<T> dflat = weight_.value.transpose() * dy.data;
    Activation<T> dx = in_shape_;
    dx.data = Eigen::Map<const Mat<T>>(dflat.data(), in_channels_, static_cast<Index>(dy.batch) * in_shape_.pixels());
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  json describe() const override { return {{"type", "dense"}, {"in", in_}, {"out", out_}}; }

 private:
  Index in_, out_;
  Param<T> weight_, bias_;
  Activation<T> in_shape_;
  Index in_channels_ = 0;
  Mat<T> input_;
};

template <typename T>
class LeakyRelu final : public Layer<T> {
 public:
  explicit LeakyRelu(T slope = T(0.2)) : slope_(slope) {}

  Activation<T> forward(const Activation<T>& x) override {
    input_ = x.data;
    Activation<T> y = x;
    y.data = x.data.unaryExpr([s = slope_](T v) { return v > T(0) ? v : s * v; });
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) override {
    Activation<T> dx = dy;
    dx.data = dy.data.binaryExpr(input_, [s = slope_](T g, T v) { return v > T(0) ? g : s * g; });
    return dx;
  }

  json describe() const override { return {{"type", "leaky_relu"}, {"slope", static_cast<double>(slope_)}}; }

  /// Input of the last forward() call.
  const Mat<T>& last_input() const { return input_; }

 private:
  T slope_;
  Mat<T> input_;
};

template <typename T>
class Sequential {
 public:
  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Activation<T> forward(Activation<T> x) {
    for (auto& l : layers_) x = l->forward(x);
    return x;
  }

  void backward(Activation<T> dy) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) dy = (*it)->backward(dy);
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  /// Sign of every leaky-ReLU input of the last forward pass, in layer order.
  /// Two passes with equal patterns lie on the same linear piece.
  std::vector<std::uint8_t> relu_pattern() const {
    std::vector<std::uint8_t> out;
    for (const auto& l : layers_)
      if (const auto* r = dynamic_cast<const LeakyRelu<T>*>(l.get()))
        for (Index i = 0; i < r->last_input().size(); ++i) out.push_back(r->last_input().data()[i] > T(0));
    return out;
  }

  json describe() const {
    json j = json::array();
    for (const auto& l : layers_) j.push_back(l->describe());
    return j;
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace dmfa::nn
