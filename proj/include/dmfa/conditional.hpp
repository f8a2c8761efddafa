#pragma once
// Closed-form conditionals p(x_m | x_o) of factor Gaussians and their mixtures.
//
// With Sigma = A A^T + D, Sigma_mo = A_m A_o^T and B = A_o^T D_o^-1 A_o, the
// Schur-complement formulas collapse to rank-l expressions:
//
//   mu_m|o    = mu_m + A_m (I + B)^-1 A_o^T D_o^-1 (x_o - mu_o)
//   Sigma_m|o = A_m (I + B)^-1 A_m^T + D_m
//
// so the conditional is again a factor Gaussian with factors A_m L^-T, where
// I + B = L L^T, and the untouched noise d_m.

#include <limits>
#include <vector>

#include "dmfa/error.hpp"
#include "dmfa/lowrank_gauss.hpp"
#include "dmfa/masking.hpp"
#include "dmfa/mfa.hpp"

namespace dmfa {

template <typename T>
struct GaussianConditional {
  FactorGaussian<T> density;  // over the missing coordinates
  T log_marginal = 0;         // log N(x_o; mu_o, Sigma_oo)
};

template <typename T>
GaussianConditional<T> condition(const FactorGaussian<T>& g, const Vec<T>& x_o, const SplitIndex& split) {
  split.validate(g.dim());
  if (split.observed.empty()) throw EmptyObservedError("nothing observed: use restrict() for the marginal");
  if (split.missing.empty()) throw EmptyMaskError("nothing missing: the conditional is empty");
  if (x_o.size() != static_cast<Index>(split.observed.size())) {
    throw ShapeError("observed values do not match the split");
  }

  const FactorGaussian<T> g_o = restrict(g, split.observed);
  const WoodburySolver<T> solver(g_o);
  const Vec<T> r = x_o - g_o.mean;

  GaussianConditional<T> out;
  out.log_marginal = solver.log_density(x_o);

  const Vec<T> mu_m = gather(g.mean, std::span<const Index>(split.missing));
  const Mat<T> a_m = gather_rows(g.factors, std::span<const Index>(split.missing));
  out.density.noise = gather(g.noise, std::span<const Index>(split.missing));
  if (g.rank() == 0) {
    out.density.mean = mu_m;
    out.density.factors = a_m;
    return out;
  }
  const Vec<T> proj = solver.scaled_factors().transpose() * r;  // A_o^T D_o^-1 r
  out.density.mean = mu_m + a_m * solver.inner().solve(proj);
  // A_m L^-T = (L^-1 A_m^T)^T
  out.density.factors = solver.inner().matrixL().solve(a_m.transpose()).transpose();
  return out;
}

template <typename T>
FactorGaussian<T> conditional_gaussian(const FactorGaussian<T>& g, const Vec<T>& x_o, const SplitIndex& split) {
  return condition(g, x_o, split).density;
}

template <typename T>
struct MixtureConditional {
  MfaModel<T> model;  // over the missing coordinates, reweighted
  T log_marginal = 0;  // log p(x_o) under the full mixture
  T max_weight = 0;    // collapse diagnostic: largest conditional weight
};

/// Component-wise conditionals with weights p_i N_i(x_o) / sum_j p_j N_j(x_o).
template <typename T>
MixtureConditional<T> conditional_mixture(const MfaModel<T>& mix, const Vec<T>& x_o, const SplitIndex& split) {
  if (mix.size() < 1) throw ConfigError("conditional_mixture: empty mixture");
  MixtureConditional<T> out;
  Vec<T> logw(mix.size());
  for (Index i = 0; i < mix.size(); ++i) {
    auto c = condition(mix.components[static_cast<std::size_t>(i)], x_o, split);
    logw(i) = mix.log_weights(i) + c.log_marginal;
    out.model.components.push_back(std::move(c.density));
  }
  out.log_marginal = log_sum_exp(logw);
  out.model.log_weights = logw.array() - out.log_marginal;
  out.max_weight = std::exp(out.model.log_weights.maxCoeff());
  return out;
}

enum class ImputeMode { TopComponent, MixtureMean };

inline const char* to_string(ImputeMode m) {
  return m == ImputeMode::TopComponent ? "top-component" : "mixture-mean";
}

inline ImputeMode parse_impute_mode(const std::string& s) {
  if (s == "top-component") return ImputeMode::TopComponent;
  if (s == "mixture-mean") return ImputeMode::MixtureMean;
  throw ConfigError("unknown imputation mode '" + s + "'");
}

/// Point estimate of the missing values: mean of the heaviest component (ties
/// go to the lowest index) or the mixture expectation.
template <typename T>
Vec<T> mixture_imputation(const MfaModel<T>& mix_cond, ImputeMode mode) {
  if (mix_cond.size() < 1) throw ConfigError("mixture_imputation: empty mixture");
  if (mode == ImputeMode::TopComponent) {
    Index best = 0;
    for (Index i = 1; i < mix_cond.size(); ++i)
      if (mix_cond.log_weights(i) > mix_cond.log_weights(best)) best = i;
    return mix_cond.components[static_cast<std::size_t>(best)].mean;
  }
  Vec<T> out = Vec<T>::Zero(mix_cond.dim());
  for (Index i = 0; i < mix_cond.size(); ++i)
    out += std::exp(mix_cond.log_weights(i)) * mix_cond.components[static_cast<std::size_t>(i)].mean;
  return out;
}

}  // namespace dmfa
