#pragma once
// Gaussians with covariance Sigma = A A^T + diag(d), evaluated in O(n l^2)
// through the Woodbury identity and the matrix determinant lemma:
//
//   Sigma^-1       = D^-1 - D^-1 A M^-1 A^T D^-1,   M = I_l + A^T D^-1 A
//   log det Sigma  = sum_i log d_i + log det M
//
// Only the l x l matrix M is ever factorized.

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmfa/error.hpp"

namespace dmfa {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

template <typename T>
inline constexpr T kLog2Pi = static_cast<T>(1.8378770664093454835606594728112);

template <typename T>
struct FactorGaussian {
  Vec<T> mean;     // n
  Mat<T> factors;  // n x l, l may be 0
  Vec<T> noise;    // n, strictly positive variances

  Index dim() const { return mean.size(); }
  Index rank() const { return factors.cols(); }

  /// Throws ShapeError / InvalidValueError if the invariants do not hold.
  void validate() const {
    if (factors.rows() != mean.size() || noise.size() != mean.size()) {
      throw ShapeError("FactorGaussian: mean, factors and noise disagree on the dimension");
    }
    if (!mean.allFinite() || !factors.allFinite() || !noise.allFinite()) {
      throw InvalidValueError("FactorGaussian: non-finite parameter");
    }
    if ((noise.array() <= T(0)).any()) throw InvalidValueError("FactorGaussian: noise must be positive");
  }

  template <typename U>
  FactorGaussian<U> cast() const {
    return {mean.template cast<U>(), factors.template cast<U>(), noise.template cast<U>()};
  }
};

/// Precomputed Woodbury pieces for repeated solves against one Gaussian.
template <typename T>
class WoodburySolver {
 public:
  explicit WoodburySolver(const FactorGaussian<T>& g) : g_(&g) {
    inv_noise_ = g.noise.cwiseInverse();
    scaled_ = inv_noise_.asDiagonal() * g.factors;  // D^-1 A
    const Index l = g.rank();
    Mat<T> inner = Mat<T>::Identity(l, l);
    inner.noalias() += g.factors.transpose() * scaled_;
    llt_.compute(inner);
    if (l > 0 && llt_.info() != Eigen::Success) {
      throw NumericalError("Cholesky of I + A^T D^-1 A failed");
    }
    const auto& L = llt_.matrixLLT();
    T inner_logdet = 0;
    for (Index i = 0; i < l; ++i) inner_logdet += std::log(L(i, i));
    if (!std::isfinite(inner_logdet)) throw NumericalError("non-finite log-determinant of inner matrix");
    log_det_ = g.noise.array().log().sum() + T(2) * inner_logdet;
  }

  T log_det() const { return log_det_; }
  const Vec<T>& inv_noise() const { return inv_noise_; }
  const Mat<T>& scaled_factors() const { return scaled_; }  // D^-1 A
  const Eigen::LLT<Mat<T>>& inner() const { return llt_; }

  /// Sigma^-1 r.
  Vec<T> solve(const Vec<T>& r) const {
    Vec<T> out = inv_noise_.cwiseProduct(r);
    if (g_->rank() > 0) {
      Vec<T> proj = scaled_.transpose() * r;
      out.noalias() -= scaled_ * llt_.solve(proj);
    }
    return out;
  }

  /// r^T Sigma^-1 r.
  T quad_form(const Vec<T>& r) const {
    T q = r.cwiseProduct(inv_noise_).dot(r);
    if (g_->rank() > 0) {
      Vec<T> proj = scaled_.transpose() * r;
      q -= proj.dot(llt_.solve(proj));
    }
    return q;
  }

  T log_density(const Vec<T>& x) const {
    const Vec<T> r = x - g_->mean;
    return T(-0.5) * (static_cast<T>(g_->dim()) * kLog2Pi<T> + log_det_ + quad_form(r));
  }

 private:
  const FactorGaussian<T>* g_;
  Vec<T> inv_noise_;
  Mat<T> scaled_;
  Eigen::LLT<Mat<T>> llt_;
  T log_det_ = 0;
};

template <typename T>
T log_det_sigma(const FactorGaussian<T>& g) {
  return WoodburySolver<T>(g).log_det();
}

template <typename T>
T log_density(const FactorGaussian<T>& g, const Vec<T>& x) {
  if (x.size() != g.dim()) throw ShapeError("log_density: point has the wrong dimension");
  if (!x.allFinite()) throw InvalidValueError("log_density: non-finite point");
  return WoodburySolver<T>(g).log_density(x);
}

/// Log-density together with its gradient with respect to every parameter.
template <typename T>
struct LogDensityGrad {
  T value = 0;
  Vec<T> d_mean;
  Mat<T> d_factors;
  Vec<T> d_noise;
};

// With r = x - mu and alpha = Sigma^-1 r:
//   d/dmu = alpha
//   d/dA  = alpha (alpha^T A) - Sigma^-1 A,   Sigma^-1 A = D^-1 A M^-1
//   d/dd  = 0.5 (alpha^2 - diag Sigma^-1)
template <typename T>
LogDensityGrad<T> log_density_grad(const FactorGaussian<T>& g, const Vec<T>& x) {
  if (x.size() != g.dim()) throw ShapeError("log_density_grad: point has the wrong dimension");
  const WoodburySolver<T> solver(g);
  const Vec<T> r = x - g.mean;
  LogDensityGrad<T> out;
  out.d_mean = solver.solve(r);
  const T quad = r.dot(out.d_mean);
  out.value = T(-0.5) * (static_cast<T>(g.dim()) * kLog2Pi<T> + solver.log_det() + quad);

  Vec<T> diag_inv = solver.inv_noise();
  if (g.rank() > 0) {
    // D^-1 A M^-1, computed as (M^-1 (D^-1 A)^T)^T
    const Mat<T> sinv_a = solver.inner().solve(solver.scaled_factors().transpose()).transpose();
    diag_inv -= (sinv_a.cwiseProduct(solver.scaled_factors())).rowwise().sum();
    const Vec<T> at_alpha = g.factors.transpose() * out.d_mean;
    out.d_factors = out.d_mean * at_alpha.transpose() - sinv_a;
  } else {
    out.d_factors.resize(g.dim(), 0);
  }
  out.d_noise = T(0.5) * (out.d_mean.array().square() - diag_inv.array()).matrix();
  return out;
}

/// Draws `count` samples as columns: x = mu + A z + sqrt(d) .* eps.
template <typename T, typename Rng>
Mat<T> sample(const FactorGaussian<T>& g, Rng& rng, Index count) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index n = g.dim(), l = g.rank();
  Mat<T> out(n, count);
  Vec<T> z(l), eps(n);
  const Vec<T> sd = g.noise.cwiseSqrt();
  for (Index s = 0; s < count; ++s) {
    for (Index j = 0; j < l; ++j) z(j) = static_cast<T>(normal(rng));
    for (Index i = 0; i < n; ++i) eps(i) = static_cast<T>(normal(rng));
    out.col(s) = g.mean + sd.cwiseProduct(eps);
    if (l > 0) out.col(s).noalias() += g.factors * z;
  }
  return out;
}

/// Throws IndexError unless idx is strictly increasing within [0, n).
inline void check_index_list(std::span<const Index> idx, Index n) {
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw IndexError("index " + std::to_string(idx[i]) + " out of range");
    if (i > 0 && idx[i] <= idx[i - 1]) throw IndexError("index list must be sorted and unique");
  }
}

template <typename T>
Vec<T> gather(const Vec<T>& x, std::span<const Index> idx) {
  Vec<T> out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = x(idx[i]);
  return out;
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& m, std::span<const Index> idx) {
  Mat<T> out(static_cast<Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = m.row(idx[i]);
  return out;
}

/// Marginal over the coordinates `idx`: (mu_idx, A_idx., d_idx).
template <typename T>
FactorGaussian<T> restrict(const FactorGaussian<T>& g, std::span<const Index> idx) {
  check_index_list(idx, g.dim());
  return {gather(g.mean, idx), gather_rows(g.factors, idx), gather(g.noise, idx)};
}

template <typename T>
FactorGaussian<T> restrict(const FactorGaussian<T>& g, const std::vector<Index>& idx) {
  return restrict(g, std::span<const Index>(idx));
}

}  // namespace dmfa
