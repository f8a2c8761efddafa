#pragma once
// Deep conditional density model: a network maps a masked image (missing
// pixels zeroed, mask appended as an extra channel) to the parameters of an
// n-dimensional factor Gaussian (mu, A, d). The training loss is the NLL of
// that Gaussian restricted to the missing coordinates,
//
//   loss = -log N(x_m; mu_m, A_m A_m^T + diag(d_m)),
//
// so outputs at observed coordinates never influence the loss.
//
// Head layout: l+2 blocks of n values, [mu | a_1 | ... | a_l | rho], with
// d = softplus(rho) + 1e-6.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dmfa/error.hpp"
#include "dmfa/lowrank_gauss.hpp"
#include "dmfa/masking.hpp"
#include "dmfa/nn.hpp"
#include "dmfa/optim.hpp"
#include "dmfa/rng.hpp"
#include "dmfa/tensorio.hpp"

namespace dmfa {

enum class Arch { ConvDense, FullConv };

inline std::string to_string(Arch a) { return a == Arch::ConvDense ? "conv-dense" : "full-conv"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "conv-dense") return Arch::ConvDense;
  if (s == "full-conv") return Arch::FullConv;
  throw ConfigError("unknown architecture '" + s + "'");
}

inline std::vector<int> default_widths(Arch a) {
  return a == Arch::ConvDense ? std::vector<int>{32, 64, 64, 128} : std::vector<int>{64, 128, 256, 512};
}

struct NetworkSpec {
  Arch arch = Arch::ConvDense;
  ImageShape shape{1, 28, 28};
  int latent = 4;
  std::vector<int> widths;  // four entries; empty = architecture default
  std::uint64_t seed = 0;
  double head_init_scale = 0.01; // multiplies the output layer's init std
  double initial_noise = 0.05;   // d produced by a zero head, before training

  std::vector<int> resolved_widths() const {
    auto w = widths.empty() ? default_widths(arch) : widths;
    if (w.size() != 4) throw ConfigError("network needs exactly four layer widths");
    for (int v : w)
      if (v < 1) throw ConfigError("layer widths must be positive");
    return w;
  }
};

inline void to_json(json& j, const NetworkSpec& s) {
  j = {{"arch", to_string(s.arch)},       {"shape", s.shape},
       {"latent", s.latent},              {"widths", s.resolved_widths()},
       {"seed", s.seed},                  {"head_init_scale", s.head_init_scale},
       {"initial_noise", s.initial_noise}};
}

inline void from_json(const json& j, NetworkSpec& s) {
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.shape = j.at("shape").get<ImageShape>();
  s.latent = j.at("latent").get<int>();
  s.widths = j.at("widths").get<std::vector<int>>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.head_init_scale = j.value("head_init_scale", 0.01);
  s.initial_noise = j.value("initial_noise", 0.05);
}

enum class LossMode { Nll, NllPlusMse };

inline const char* to_string(LossMode m) { return m == LossMode::Nll ? "nll" : "nll_plus_mse"; }

/// Decodes one head column into a factor Gaussian over the full space.
template <typename T, typename Derived>
FactorGaussian<T> decode_head(const Eigen::MatrixBase<Derived>& head, Index n, int latent) {
  if (head.size() != (latent + 2) * n) throw ShapeError("head has the wrong size");
  FactorGaussian<T> g;
  g.mean = head.segment(0, n).template cast<T>();
  g.factors.resize(n, latent);
  for (int j = 0; j < latent; ++j) g.factors.col(j) = head.segment((1 + j) * n, n).template cast<T>();
  g.noise = head.segment((latent + 1) * n, n).template cast<T>().unaryExpr(
      [](T r) { return softplus(r) + static_cast<T>(kNoiseFloor); });
  return g;
}

template <typename T>
class DmfaNetwork {
 public:
  explicit DmfaNetwork(NetworkSpec spec) : spec_(std::move(spec)) {
    if (spec_.latent < 0) throw ConfigError("latent dimension must be non-negative");
    if (spec_.shape.size() == 0) throw ConfigError("network input shape is empty");
    build();
  }

  const NetworkSpec& spec() const { return spec_; }
  Index dim() const { return static_cast<Index>(spec_.shape.size()); }
  int latent() const { return spec_.latent; }
  Index head_size() const { return (spec_.latent + 2) * dim(); }

  /// Batched forward pass; returns the head as a ((l+2) n x B) matrix and
  /// caches activations for backward().
  Mat<T> forward_head(const std::vector<const MaskedSample*>& batch) {
    const int b = static_cast<int>(batch.size());
    nn::Activation<T> x = encode(batch);
    nn::Activation<T> y = seq_.forward(std::move(x));
    batch_ = b;
    if (spec_.arch == Arch::ConvDense) return y.data;
    return grid_to_head(y);
  }

  /// Back-propagates d loss / d head from the last forward_head() call.
  void backward_head(const Mat<T>& d_head) {
    if (d_head.rows() != head_size() || d_head.cols() != batch_) throw ShapeError("backward_head: bad gradient shape");
    if (spec_.arch == Arch::ConvDense) {
      seq_.backward({d_head, batch_, 1, 1});
    } else {
      seq_.backward(head_to_grid(d_head));
    }
  }

  FactorGaussian<T> forward(const MaskedSample& s) {
    check_sample(s);
    const Mat<T> head = forward_head({&s});
    return decode_head<T>(head.col(0), dim(), spec_.latent);
  }

  void check_sample(const MaskedSample& s) const {
    if (s.values.size() != static_cast<std::size_t>(dim()) || s.mask.shape != spec_.shape) {
      throw ShapeError("sample shape does not match the network input shape");
    }
  }

  std::vector<nn::Param<T>*> params() { return seq_.params(); }

  std::vector<std::uint8_t> relu_pattern() const { return seq_.relu_pattern(); }

  std::vector<ParamRef<T>> param_refs() {
    std::vector<ParamRef<T>> out;
    for (auto* p : params()) out.push_back(p->ref());
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  json describe() const {
    json j = spec_;
    j["layers"] = seq_.describe();
    return j;
  }

  void save(Container& c) {
    c.meta["kind"] = "dmfa";
    c.meta["arch"] = describe();
    for (auto* p : params()) {
      c.add(p->name, "param", {p->value.rows(), p->value.cols()},
            std::vector<float>(p->value.data(), p->value.data() + p->value.size()));
    }
  }

  static DmfaNetwork load(const Container& c) {
    if (c.meta.value("kind", "") != "dmfa") throw FormatError("container does not hold a DMFA network");
    DmfaNetwork net(c.meta.at("arch").get<NetworkSpec>());
    for (auto* p : net.params()) {
      const Tensor& t = c.at(p->name);
      if (t.shape.size() != 2 || t.shape[0] != p->value.rows() || t.shape[1] != p->value.cols()) {
        throw FormatError("parameter '" + p->name + "' has the wrong shape");
      }
      for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<T>(t.data[static_cast<std::size_t>(i)]);
    }
    return net;
  }

 private:
  void build() {
    const auto w = spec_.resolved_widths();
    const int in_c = spec_.shape.channels + 1;
    auto rng = make_rng(spec_.seed, 0x4e4554ull);
    const Index n = dim();
    const int l = spec_.latent;
    const T rho0 = softplus_inverse(static_cast<T>(spec_.initial_noise - kNoiseFloor));

    if (spec_.arch == Arch::ConvDense) {
      int h = spec_.shape.height, wd = spec_.shape.width;
      const int strides[4] = {1, 2, 1, 2};
      int prev = in_c;
      for (int i = 0; i < 4; ++i) {
        seq_.template add<nn::Conv2d<T>>("conv" + std::to_string(i + 1), prev, w[i], 3, strides[i], 1, rng, i > 0);
        seq_.template add<nn::LeakyRelu<T>>(T(0.2));
        h = nn::WindowGeometry::small_extent(h, 3, strides[i], 1);
        wd = nn::WindowGeometry::small_extent(wd, 3, strides[i], 1);
        prev = w[i];
      }
      const Index features = static_cast<Index>(prev) * h * wd;
      auto& head = seq_.template add<nn::Dense<T>>("head", features, (l + 2) * n,
                                                   spec_.head_init_scale / std::sqrt(static_cast<double>(features)), rng);
      head.bias().value.block((l + 1) * n, 0, n, 1).setConstant(rho0);
    } else {
      // encoder: four stride-2 convolutions; decoder mirrors the grid sizes
      std::vector<std::array<int, 2>> grids{{spec_.shape.height, spec_.shape.width}};
      int prev = in_c;
      for (int i = 0; i < 4; ++i) {
        seq_.template add<nn::Conv2d<T>>("down" + std::to_string(i + 1), prev, w[i], 3, 2, 1, rng, i > 0);
        seq_.template add<nn::LeakyRelu<T>>(T(0.2));
        const auto& g = grids.back();
        grids.push_back({nn::WindowGeometry::small_extent(g[0], 3, 2, 1), nn::WindowGeometry::small_extent(g[1], 3, 2, 1)});
        prev = w[i];
      }
      const int out_c = (l + 2) * spec_.shape.channels;
      for (int i = 3; i >= 0; --i) {
        const bool last = i == 0;
        const int next = last ? out_c : w[i - 1];
        const auto& g = grids[i];
        auto& layer = seq_.template add<nn::ConvTranspose2d<T>>("up" + std::to_string(4 - i), prev, next, 3, 2, 1,
                                                               g[0], g[1], rng);
        if (last) {
          auto ps = layer.params();
          ps[0]->value *= static_cast<T>(spec_.head_init_scale);
          ps[1]->value.block((l + 1) * spec_.shape.channels, 0, spec_.shape.channels, 1).setConstant(rho0);
        } else {
          seq_.template add<nn::LeakyRelu<T>>(T(0.2));
        }
        prev = next;
      }
    }
  }

  nn::Activation<T> encode(const std::vector<const MaskedSample*>& batch) const {
    const int b = static_cast<int>(batch.size());
    const int c = spec_.shape.channels;
    const Index hw = static_cast<Index>(spec_.shape.pixels());
    nn::Activation<T> x{Mat<T>(c + 1, b * hw), b, spec_.shape.height, spec_.shape.width};
    for (int s = 0; s < b; ++s) {
      const MaskedSample& ms = *batch[static_cast<std::size_t>(s)];
      check_sample(ms);
      for (Index p = 0; p < hw; ++p) {
        const Index col = s * hw + p;
        for (int ch = 0; ch < c; ++ch) x.data(ch, col) = static_cast<T>(ms.values[static_cast<std::size_t>(ch * hw + p)]);
        x.data(c, col) = static_cast<T>(ms.mask.bits[static_cast<std::size_t>(p)]);
      }
    }
    return x;
  }

  Mat<T> grid_to_head(const nn::Activation<T>& y) const {
    const int c = spec_.shape.channels;
    const Index hw = static_cast<Index>(spec_.shape.pixels()), n = dim();
    Mat<T> head(head_size(), y.batch);
    for (int b = 0; b < y.batch; ++b)
      for (int blk = 0; blk < spec_.latent + 2; ++blk)
        for (int ch = 0; ch < c; ++ch)
          for (Index p = 0; p < hw; ++p) head(blk * n + ch * hw + p, b) = y.data(blk * c + ch, b * hw + p);
    return head;
  }

  nn::Activation<T> head_to_grid(const Mat<T>& d_head) const {
    const int c = spec_.shape.channels;
    const Index hw = static_cast<Index>(spec_.shape.pixels()), n = dim();
    nn::Activation<T> g{Mat<T>((spec_.latent + 2) * c, d_head.cols() * hw), static_cast<int>(d_head.cols()),
                        spec_.shape.height, spec_.shape.width};
    for (Index b = 0; b < d_head.cols(); ++b)
      for (int blk = 0; blk < spec_.latent + 2; ++blk)
        for (int ch = 0; ch < c; ++ch)
          for (Index p = 0; p < hw; ++p) g.data(blk * c + ch, b * hw + p) = d_head(blk * n + ch * hw + p, b);
    return g;
  }

  NetworkSpec spec_;
  nn::Sequential<T> seq_;
  int batch_ = 0;
};

/// -log N(x_m; mu_m, Sigma_mm) of a full-space Gaussian for one masked sample.
template <typename T>
T restricted_nll(const FactorGaussian<T>& g, const MaskedSample& s) {
  const SplitIndex idx = SplitIndex::from_mask(s.mask);
  if (idx.missing.empty()) throw EmptyMaskError("sample has no missing coordinates");
  if (static_cast<Index>(s.ground_truth.size()) != g.dim()) throw ShapeError("sample and Gaussian dimensions differ");
  const FactorGaussian<T> gm = restrict(g, idx.missing);
  Vec<T> x_m(gm.dim());
  for (std::size_t i = 0; i < idx.missing.size(); ++i)
    x_m(static_cast<Index>(i)) = static_cast<T>(s.ground_truth[static_cast<std::size_t>(idx.missing[i])]);
  return -log_density(gm, x_m);
}

template <typename S>
struct HeadLoss {
  S nll = 0;
  S mse = 0;
  S loss = 0;
  Vec<S> d_head;  // d loss / d head, zero at observed coordinates
};

/// Loss of one head column and its gradient, evaluated in scalar type S.
/// Only the rows belonging to missing coordinates are read.
template <typename S, typename Derived>
HeadLoss<S> head_loss(const Eigen::MatrixBase<Derived>& head, const MaskedSample& s, int latent, LossMode mode) {
  const Index n = static_cast<Index>(s.ground_truth.size());
  if (head.size() != (latent + 2) * n) throw ShapeError("head_loss: head has the wrong size");
  std::vector<Index> miss;
  for (std::size_t i = 0; i < s.mask.bits.size(); ++i)
    if (s.mask.bits[i]) miss.push_back(static_cast<Index>(i));
  if (miss.empty()) throw EmptyMaskError("sample has no missing coordinates");
  const Index m = static_cast<Index>(miss.size());

  FactorGaussian<S> g;
  g.mean.resize(m);
  g.factors.resize(m, latent);
  g.noise.resize(m);
  Vec<S> rho(m), x(m);
  for (Index r = 0; r < m; ++r) {
    const Index i = miss[static_cast<std::size_t>(r)];
    g.mean(r) = static_cast<S>(head(i));
    for (int j = 0; j < latent; ++j) g.factors(r, j) = static_cast<S>(head((1 + j) * n + i));
    rho(r) = static_cast<S>(head((latent + 1) * n + i));
    g.noise(r) = softplus(rho(r)) + static_cast<S>(kNoiseFloor);
    x(r) = static_cast<S>(s.ground_truth[static_cast<std::size_t>(i)]);
  }

  const LogDensityGrad<S> grad = log_density_grad(g, x);
  HeadLoss<S> out;
  out.nll = -grad.value;
  out.d_head = Vec<S>::Zero((latent + 2) * n);
  for (Index r = 0; r < m; ++r) {
    const Index i = miss[static_cast<std::size_t>(r)];
    out.d_head(i) = -grad.d_mean(r);
    for (int j = 0; j < latent; ++j) out.d_head((1 + j) * n + i) = -grad.d_factors(r, j);
    out.d_head((latent + 1) * n + i) = -grad.d_noise(r) * sigmoid(rho(r));
  }
  const Vec<S> err = g.mean - x;
  out.mse = err.squaredNorm();
  out.loss = out.nll;
  if (mode == LossMode::NllPlusMse) {
    out.loss += out.mse;
    for (Index r = 0; r < m; ++r) out.d_head(miss[static_cast<std::size_t>(r)]) += S(2) * err(r);
  }
  return out;
}

struct BatchLoss {
  double mean_loss = 0;
  double mean_nll = 0;
  double mean_mse = 0;
};

/// Forward + backward over a batch; parameter gradients (zeroed first) hold
/// d mean-loss / d theta afterwards. The head math runs in scalar type S.
template <typename S = double, typename T>
BatchLoss loss_gradients(DmfaNetwork<T>& net, const std::vector<const MaskedSample*>& batch, LossMode mode) {
  if (batch.empty()) throw ConfigError("loss_gradients: empty batch");
  net.zero_grad();
  const Mat<T> head = net.forward_head(batch);
  Mat<T> d_head(head.rows(), head.cols());
  BatchLoss out;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (Index b = 0; b < head.cols(); ++b) {
    const HeadLoss<S> hl = head_loss<S>(head.col(b), *batch[static_cast<std::size_t>(b)], net.latent(), mode);
    out.mean_loss += static_cast<double>(hl.loss) * inv_b;
    out.mean_nll += static_cast<double>(hl.nll) * inv_b;
    out.mean_mse += static_cast<double>(hl.mse) * inv_b;
    d_head.col(b) = (hl.d_head * static_cast<S>(inv_b)).template cast<T>();
  }
  if (!d_head.allFinite() || !std::isfinite(out.mean_loss)) throw DivergedError("non-finite loss or gradient", 0);
  net.backward_head(d_head);
  for (auto* p : net.params())
    if (!p->grad.allFinite()) throw DivergedError("non-finite gradient in " + p->name, 0);
  return out;
}

/// Loss only (no backward); used by finite-difference checks and evaluation.
template <typename S = double, typename T>
BatchLoss batch_loss(DmfaNetwork<T>& net, const std::vector<const MaskedSample*>& batch, LossMode mode) {
  const Mat<T> head = net.forward_head(batch);
  BatchLoss out;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (Index b = 0; b < head.cols(); ++b) {
    const HeadLoss<S> hl = head_loss<S>(head.col(b), *batch[static_cast<std::size_t>(b)], net.latent(), mode);
    out.mean_loss += static_cast<double>(hl.loss) * inv_b;
    out.mean_nll += static_cast<double>(hl.nll) * inv_b;
    out.mean_mse += static_cast<double>(hl.mse) * inv_b;
  }
  return out;
}

}  // namespace dmfa
