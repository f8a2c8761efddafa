#pragma once
// Mixture of factor analyzers: model type, full-data likelihood and the
// gradient-based maximum-likelihood baseline trainer.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dmfa/error.hpp"
#include "dmfa/lowrank_gauss.hpp"
#include "dmfa/optim.hpp"
#include "dmfa/rng.hpp"
#include "dmfa/tensorio.hpp"

namespace dmfa {

template <typename T>
T log_sum_exp(const Vec<T>& v) {
  const T m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

template <typename T>
struct MfaModel {
  Vec<T> log_weights;
  std::vector<FactorGaussian<T>> components;

  Index size() const { return static_cast<Index>(components.size()); }
  Index dim() const { return components.empty() ? 0 : components.front().dim(); }
  Index rank() const { return components.empty() ? 0 : components.front().rank(); }

  void validate() const {
    if (components.empty()) throw ConfigError("MfaModel needs at least one component");
    if (log_weights.size() != size()) throw ShapeError("MfaModel: one log-weight per component required");
    for (const auto& c : components) {
      c.validate();
      if (c.dim() != dim() || c.rank() != rank()) throw ShapeError("MfaModel: components disagree on n or l");
    }
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-9;
    if (std::abs(static_cast<double>(log_sum_exp(log_weights))) > tol) {
      throw InvalidValueError("MfaModel: weights do not sum to one");
    }
  }

  template <typename U>
  MfaModel<U> cast() const {
    MfaModel<U> out;
    out.log_weights = log_weights.template cast<U>();
    for (const auto& c : components) out.components.push_back(c.template cast<U>());
    return out;
  }
};

template <typename T>
T mixture_log_density(const MfaModel<T>& mix, const Vec<T>& x) {
  if (x.size() != mix.dim()) throw ShapeError("mixture_log_density: point has the wrong dimension");
  Vec<T> terms(mix.size());
  for (Index i = 0; i < mix.size(); ++i) terms(i) = mix.log_weights(i) + log_density(mix.components[i], x);
  return log_sum_exp(terms);
}

inline Vec<float> as_vec(std::span<const float> x) {
  return Eigen::Map<const Vec<float>>(x.data(), static_cast<Index>(x.size()));
}

/// Means are k distinct training samples, factor entries ~ N(0, 0.01), noise
/// is the per-dimension data variance divided by l (floored at 1e-4), weights
/// uniform.
template <typename Rng>
MfaModel<float> init_mfa(const Dataset& data, int k, int l, Rng& rng) {
  if (k < 1) throw ConfigError("init_mfa: k must be positive");
  if (l < 0) throw ConfigError("init_mfa: l must be non-negative");
  const std::size_t count = data.count();
  if (static_cast<std::size_t>(k) > count) {
    throw ConfigError("init_mfa: k = " + std::to_string(k) + " exceeds the " + std::to_string(count) + " samples");
  }
  const Index n = static_cast<Index>(data.dim());

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int i = 0; i < k; ++i) {  // partial Fisher-Yates
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), count - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[pick(rng)]);
  }

  Vec<double> mean = Vec<double>::Zero(n), sq = Vec<double>::Zero(n);
  for (std::size_t s = 0; s < count; ++s) {
    const Vec<double> x = as_vec(data.sample(s)).cast<double>();
    mean += x;
    sq += x.cwiseProduct(x);
  }
  mean /= static_cast<double>(count);
  const Vec<double> var = (sq / static_cast<double>(count) - mean.cwiseProduct(mean)).cwiseMax(0.0);
  const Vec<float> noise = (var / static_cast<double>(std::max(l, 1))).cwiseMax(1e-4).cast<float>();

  std::normal_distribution<double> factor_dist(0.0, 0.1);
  MfaModel<float> mix;
  mix.log_weights = Vec<float>::Constant(k, -std::log(static_cast<float>(k)));
  for (int i = 0; i < k; ++i) {
    FactorGaussian<float> g;
    g.mean = as_vec(data.sample(order[static_cast<std::size_t>(i)]));
    g.factors.resize(n, l);
    for (Index c = 0; c < l; ++c)
      for (Index r = 0; r < n; ++r) g.factors(r, c) = static_cast<float>(factor_dist(rng));
    g.noise = noise;
    mix.components.push_back(std::move(g));
  }
  return mix;
}

struct MfaTrainConfig {
  int k = 20;
  int latent = 6;
  double lr = 1e-3;
  int epochs = 20;
  int batch = 64;
  std::uint64_t seed = 0;
};

inline void to_json(json& j, const MfaTrainConfig& c) {
  j = {{"k", c.k}, {"latent", c.latent}, {"lr", c.lr}, {"epochs", c.epochs}, {"batch", c.batch}, {"seed", c.seed}};
}

struct MfaEpochLog {
  int epoch = 0;
  double mean_nll = 0;
  double seconds = 0;
};

/// Stochastic-gradient maximum likelihood for an MFA. Noise is d = softplus(rho)
/// + 1e-6 and weights are softmax(logits), so every step yields a valid model.
class MfaTrainer {
 public:
  MfaTrainer(const MfaModel<float>& init, MfaTrainConfig config)
      : config_(config), adam_(AdamConfig{config.lr}) {
    init.validate();
    k_ = init.size();
    n_ = init.dim();
    l_ = init.rank();
    logits_ = init.log_weights;
    for (const auto& c : init.components) {
      means_.push_back(c.mean);
      factors_.push_back(c.factors);
      Vec<float> rho(n_);
      for (Index i = 0; i < n_; ++i)
        rho(i) = softplus_inverse(std::max(c.noise(i) - static_cast<float>(kNoiseFloor), 1e-12f));
      rhos_.push_back(rho);
    }
    allocate_grads();
  }

  const MfaTrainConfig& config() const { return config_; }
  int epochs_done() const { return epoch_; }

  MfaModel<float> model() const {
    MfaModel<float> mix;
    mix.log_weights = logits_.array() - log_sum_exp(logits_);
    for (Index i = 0; i < k_; ++i) {
      Vec<float> d = rhos_[i].unaryExpr([](float r) { return softplus(r) + static_cast<float>(kNoiseFloor); });
      mix.components.push_back({means_[i], factors_[i], std::move(d)});
    }
    return mix;
  }

  /// Mean NLL of the current model over a dataset (f64 accumulation).
  double mean_nll(const Dataset& data) const {
    const MfaModel<float> mix = model();
    double total = 0;
    const std::size_t count = data.count();
    for (std::size_t start = 0; start < count; start += 256) {
      const std::size_t b = std::min<std::size_t>(256, count - start);
      Mat<float> x(n_, static_cast<Index>(b));
      for (std::size_t s = 0; s < b; ++s) x.col(static_cast<Index>(s)) = as_vec(data.sample(start + s));
      const Vec<float> lp = batch_log_density(mix, x, nullptr);
      for (Index s = 0; s < lp.size(); ++s) total -= static_cast<double>(lp(s));
    }
    return total / static_cast<double>(count);
  }

  /// One pass over the data in a (seed, epoch)-determined order; returns the
  /// mean pre-update NLL of the visited batches.
  MfaEpochLog run_epoch(const Dataset& data) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t count = data.count();
    if (count == 0) throw ConfigError("train_mfa: empty dataset");
    const auto order = epoch_permutation(count, config_.seed, static_cast<std::uint64_t>(epoch_));
    double total = 0;
    const std::size_t batch = static_cast<std::size_t>(config_.batch);
    for (std::size_t start = 0; start < count; start += batch) {
      const std::size_t b = std::min(batch, count - start);
      Mat<float> x(n_, static_cast<Index>(b));
      for (std::size_t s = 0; s < b; ++s) x.col(static_cast<Index>(s)) = as_vec(data.sample(order[start + s]));
      const double batch_nll = accumulate_gradients(x);
      if (!std::isfinite(batch_nll)) {
        throw DivergedError("MFA training diverged (non-finite NLL) in epoch " + std::to_string(epoch_ + 1),
                            epoch_ + 1);
      }
      total += batch_nll;
      adam_.step(params());
    }
    ++epoch_;
    MfaEpochLog log;
    log.epoch = epoch_;
    log.mean_nll = total / static_cast<double>(count);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

  std::vector<ParamRef<float>> params() {
    std::vector<ParamRef<float>> out;
    out.push_back({"logits", {logits_.data(), static_cast<std::size_t>(k_)}, {g_logits_.data(), static_cast<std::size_t>(k_)}});
    for (Index i = 0; i < k_; ++i) {
      const std::string tag = std::to_string(i);
      out.push_back({"mean/" + tag, {means_[i].data(), static_cast<std::size_t>(n_)}, {g_means_[i].data(), static_cast<std::size_t>(n_)}});
      out.push_back({"factors/" + tag, {factors_[i].data(), static_cast<std::size_t>(n_ * l_)},
                     {g_factors_[i].data(), static_cast<std::size_t>(n_ * l_)}});
      out.push_back({"rho/" + tag, {rhos_[i].data(), static_cast<std::size_t>(n_)}, {g_rhos_[i].data(), static_cast<std::size_t>(n_)}});
    }
    return out;
  }

  /// Raw parameters, optimizer moments and the epoch counter.
  Container checkpoint() {
    Container c;
    c.meta["kind"] = "mfa-trainer";
    c.meta["epoch"] = epoch_;
    c.meta["config"] = config_;
    c.meta["n"] = n_;
    c.meta["k"] = k_;
    c.meta["latent"] = l_;
    for (const auto& p : params()) {
      c.add(p.name, "raw", {static_cast<std::int64_t>(p.value.size())}, {p.value.begin(), p.value.end()});
    }
    adam_.save(c, params());
    return c;
  }

  static MfaTrainer resume(const Container& c) {
    if (c.meta.value("kind", "") != "mfa-trainer") throw FormatError("not an MFA trainer checkpoint");
    MfaTrainConfig cfg;
    const auto& jc = c.meta.at("config");
    cfg.k = jc.at("k");
    cfg.latent = jc.at("latent");
    cfg.lr = jc.at("lr");
    cfg.epochs = jc.at("epochs");
    cfg.batch = jc.at("batch");
    cfg.seed = jc.at("seed");
    MfaTrainer t(c.meta.at("k").get<Index>(), c.meta.at("n").get<Index>(), c.meta.at("latent").get<Index>(), cfg);
    for (const auto& p : t.params()) {
      const auto& src = c.at(p.name);
      if (src.data.size() != p.value.size()) throw FormatError("checkpoint tensor '" + p.name + "' has the wrong size");
      std::copy(src.data.begin(), src.data.end(), p.value.begin());
    }
    t.adam_.load(c, t.params());
    t.epoch_ = c.meta.at("epoch").get<int>();
    return t;
  }

  /// Log-density of every column of x under the mixture; when `work` is given
  /// the per-component intermediate results needed for gradients are kept.
  struct Work {
    std::vector<Mat<float>> alpha;     // Sigma_i^-1 (x - mu_i), n x b
    std::vector<Mat<float>> sinv_a;    // Sigma_i^-1 A_i, n x l
    std::vector<Vec<float>> diag_inv;  // diag Sigma_i^-1
    Mat<float> resp;                   // k x b posterior responsibilities
  };

  static Vec<float> batch_log_density(const MfaModel<float>& mix, const Mat<float>& x, Work* work) {
    const Index k = mix.size(), n = mix.dim(), b = x.cols();
    Mat<float> logp(k, b);
    if (work) {
      work->alpha.assign(static_cast<std::size_t>(k), {});
      work->sinv_a.assign(static_cast<std::size_t>(k), {});
      work->diag_inv.assign(static_cast<std::size_t>(k), {});
    }
    for (Index i = 0; i < k; ++i) {
      const auto& g = mix.components[static_cast<std::size_t>(i)];
      const WoodburySolver<float> solver(g);
      const Mat<float> r = x.colwise() - g.mean;
      Mat<float> alpha = solver.inv_noise().asDiagonal() * r;
      Mat<float> sinv_a;
      if (g.rank() > 0) {
        sinv_a = solver.inner().solve(solver.scaled_factors().transpose()).transpose();
        const Mat<float> proj = solver.scaled_factors().transpose() * r;
        alpha.noalias() -= sinv_a * proj;
      } else {
        sinv_a.resize(n, 0);
      }
      const Vec<float> quad = r.cwiseProduct(alpha).colwise().sum().transpose();
      const float base = -0.5f * (static_cast<float>(n) * kLog2Pi<float> + solver.log_det());
      logp.row(i) = (base - 0.5f * quad.array()).matrix().transpose().array() + mix.log_weights(i);
      if (work) {
        Vec<float> diag = solver.inv_noise();
        if (g.rank() > 0) diag -= sinv_a.cwiseProduct(solver.scaled_factors()).rowwise().sum();
        work->alpha[static_cast<std::size_t>(i)] = std::move(alpha);
        work->sinv_a[static_cast<std::size_t>(i)] = std::move(sinv_a);
        work->diag_inv[static_cast<std::size_t>(i)] = std::move(diag);
      }
    }
    Vec<float> out(b);
    for (Index s = 0; s < b; ++s) {
      const float m = logp.col(s).maxCoeff();
      const Vec<float> e = (logp.col(s).array() - m).exp();
      const float sum = e.sum();
      out(s) = m + std::log(sum);
      if (work) {
        if (s == 0) work->resp.resize(k, b);
        work->resp.col(s) = e / sum;
      }
    }
    return out;
  }

 private:
  MfaTrainer(Index k, Index n, Index l, MfaTrainConfig config)
      : config_(config), adam_(AdamConfig{config.lr}), k_(k), n_(n), l_(l) {
    logits_ = Vec<float>::Zero(k);
    means_.assign(static_cast<std::size_t>(k), Vec<float>::Zero(n));
    factors_.assign(static_cast<std::size_t>(k), Mat<float>::Zero(n, l));
    rhos_.assign(static_cast<std::size_t>(k), Vec<float>::Zero(n));
    allocate_grads();
  }

  void allocate_grads() {
    g_logits_ = Vec<float>::Zero(k_);
    g_means_.assign(static_cast<std::size_t>(k_), Vec<float>::Zero(n_));
    g_factors_.assign(static_cast<std::size_t>(k_), Mat<float>::Zero(n_, l_));
    g_rhos_.assign(static_cast<std::size_t>(k_), Vec<float>::Zero(n_));
  }

  // Gradients of the batch-mean NLL; returns the summed NLL of the batch.
  double accumulate_gradients(const Mat<float>& x) {
    const MfaModel<float> mix = model();
    Work work;
    const Vec<float> lp = batch_log_density(mix, x, &work);
    const Index b = x.cols();
    const float inv_b = 1.0f / static_cast<float>(b);
    const Vec<float> weights = mix.log_weights.array().exp();

    const Vec<float> resp_sum = work.resp.rowwise().sum();
    g_logits_ = -(resp_sum - static_cast<float>(b) * weights) * inv_b;
    for (Index i = 0; i < k_; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      const Mat<float>& alpha = work.alpha[iu];
      const Vec<float> gamma = work.resp.row(i).transpose();
      const float gsum = resp_sum(i);
      g_means_[iu] = -(alpha * gamma) * inv_b;
      if (l_ > 0) {
        const Mat<float> at_alpha = factors_[iu].transpose() * alpha;  // l x b
        g_factors_[iu] = -((alpha * gamma.asDiagonal()) * at_alpha.transpose() - gsum * work.sinv_a[iu]) * inv_b;
      }
      const Vec<float> d_noise =
          -0.5f * (alpha.cwiseProduct(alpha) * gamma - gsum * work.diag_inv[iu]) * inv_b;
      g_rhos_[iu] = d_noise.binaryExpr(rhos_[iu], [](float g, float r) { return g * sigmoid(r); });
    }
    double nll = 0;
    for (Index s = 0; s < b; ++s) nll -= static_cast<double>(lp(s));
    return nll;
  }

  MfaTrainConfig config_;
  Adam<float> adam_;
  Index k_ = 0, n_ = 0, l_ = 0;
  int epoch_ = 0;
  Vec<float> logits_, g_logits_;
  std::vector<Vec<float>> means_, g_means_;
  std::vector<Mat<float>> factors_, g_factors_;
  std::vector<Vec<float>> rhos_, g_rhos_;
};

struct MfaTrainResult {
  MfaModel<float> model;
  double initial_nll = 0;
  std::vector<MfaEpochLog> log;
};

inline MfaTrainResult train_mfa(const Dataset& data, const MfaTrainConfig& config,
                                const std::function<void(const MfaEpochLog&)>& on_epoch = {}) {
  if (!(config.lr >= 0) || config.epochs < 1 || config.batch < 1) {
    throw ConfigError("train_mfa: need lr >= 0, epochs >= 1, batch >= 1");
  }
  auto rng = make_rng(config.seed, 0x4d4641u);
  MfaTrainer trainer(init_mfa(data, config.k, config.latent, rng), config);
  MfaTrainResult result;
  result.initial_nll = trainer.mean_nll(data);
  for (int e = 0; e < config.epochs; ++e) {
    result.log.push_back(trainer.run_epoch(data));
    if (on_epoch) on_epoch(result.log.back());
  }
  result.model = trainer.model();
  return result;
}

}  // namespace dmfa
