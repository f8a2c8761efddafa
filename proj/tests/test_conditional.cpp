#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "dmfa/conditional.hpp"
#include "oracles.hpp"

using namespace dmfa;
using oracle::MatD;
using oracle::VecD;

namespace {

SplitIndex make_split(const std::vector<Index>& obs, const std::vector<Index>& mis) { return {obs, mis}; }

VecD pick(const VecD& x, const std::vector<Index>& idx) {
  VecD out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i)) = x(idx[i]);
  return out;
}

MfaModel<double> weighted(std::vector<double> w, std::vector<FactorGaussian<double>> comps) {
  MfaModel<double> m;
  m.log_weights.resize(static_cast<Index>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i) m.log_weights(static_cast<Index>(i)) = std::log(w[i]);
  m.components = std::move(comps);
  return m;
}

FactorGaussian<double> point1(double mean) { return {VecD::Constant(1, mean), MatD::Zero(1, 0), VecD::Ones(1)}; }

}  // namespace

TEST(ConditionalGaussian, TextbookTwoDimensional) {
  // Sigma = [[1, .5], [.5, 1]] as A = (sqrt .5, sqrt .5), d = (.5, .5).
  MatD a(2, 1);
  a << std::sqrt(0.5), std::sqrt(0.5);
  const FactorGaussian<double> g{VecD::Zero(2), a, VecD::Constant(2, 0.5)};
  const auto c = conditional_gaussian(g, VecD(VecD::Constant(1, 1.0)), make_split({0}, {1}));
  EXPECT_NEAR(c.mean(0), 0.5, 1e-14);
  EXPECT_NEAR(oracle::dense_cov(c)(0, 0), 0.75, 1e-14);
}

TEST(ConditionalGaussian, IndependentCoordinatesGiveMarginal) {
  std::mt19937_64 rng(1);
  auto g = oracle::random_gaussian(6, 2, rng);
  g.factors.setZero();
  const auto c = conditional_gaussian(g, VecD(VecD::Constant(3, 4.0)), make_split({0, 2, 4}, {1, 3, 5}));
  for (Index i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(c.mean(i), g.mean(2 * i + 1));
    EXPECT_DOUBLE_EQ(oracle::dense_cov(c)(i, i), g.noise(2 * i + 1));
  }
}

TEST(ConditionalGaussian, MatchesDenseSchurOracle) {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 20; ++t) {
    const auto g = oracle::random_gaussian(24, 4, rng);
    std::vector<Index> perm(24);
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Index> obs(perm.begin(), perm.begin() + 10), mis(perm.begin() + 10, perm.end());
    std::sort(obs.begin(), obs.end());
    std::sort(mis.begin(), mis.end());
    VecD x(24);
    for (auto& v : x) v = normal(rng);
    const VecD xo = pick(x, obs), xm = pick(x, mis);
    const auto c = condition(g, xo, make_split(obs, mis));
    const auto ref = oracle::condition(g.mean, oracle::dense_cov(g), obs, mis, xo);
    EXPECT_LT(oracle::rel_err(c.density.mean, ref.mean), 1e-8);
    EXPECT_LT(oracle::rel_err(oracle::dense_cov(c.density), ref.cov), 1e-8);
    EXPECT_LT(oracle::rel_err(c.log_marginal, ref.log_marginal), 1e-8);
    EXPECT_LT(oracle::rel_err(log_density(c.density, xm), oracle::mvn_logpdf(xm, ref.mean, ref.cov)), 1e-8);
  }
}

TEST(ConditionalGaussian, ObservedAtMeanKeepsMissingMean) {
  std::mt19937_64 rng(2);
  const auto g = oracle::random_gaussian(8, 3, rng);
  const std::vector<Index> obs{0, 1, 5}, mis{2, 3, 4, 6, 7};
  const auto c = conditional_gaussian(g, pick(g.mean, obs), make_split(obs, mis));
  EXPECT_EQ(c.mean, pick(g.mean, mis));
}

TEST(ConditionalGaussian, ChainRuleOfDensities) {
  std::mt19937_64 rng(44);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 20; ++t) {
    const auto g = oracle::random_gaussian(10, 3, rng);
    std::vector<Index> obs, mis;
    oracle::random_split(10, rng, obs, mis);
    VecD x(10);
    for (auto& v : x) v = normal(rng);
    const auto c = condition(g, pick(x, obs), make_split(obs, mis));
    EXPECT_LT(oracle::rel_err(log_density(g, x), c.log_marginal + log_density(c.density, pick(x, mis))), 1e-8);
  }
}

TEST(ConditionalGaussian, CovarianceIsPositiveDefinite) {
  std::mt19937_64 rng(9);
  const auto g = oracle::random_gaussian(12, 5, rng);
  std::vector<Index> obs, mis;
  oracle::random_split(12, rng, obs, mis);
  const auto c = conditional_gaussian(g, VecD(VecD::Zero(static_cast<Index>(obs.size()))), make_split(obs, mis));
  Eigen::SelfAdjointEigenSolver<MatD> es(oracle::dense_cov(c));
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  EXPECT_TRUE((c.noise.array() > 0).all());
}

TEST(ConditionalGaussian, RejectsDegenerateSplits) {
  std::mt19937_64 rng(3);
  const auto g = oracle::random_gaussian(3, 1, rng);
  EXPECT_THROW(condition(g, VecD(0), make_split({}, {0, 1, 2})), EmptyObservedError);
  EXPECT_THROW(condition(g, VecD(VecD::Zero(3)), make_split({0, 1, 2}, {})), EmptyMaskError);
  EXPECT_THROW(condition(g, VecD(VecD::Zero(2)), make_split({0, 1}, {1})), IndexError);
  EXPECT_THROW(condition(g, VecD(VecD::Zero(1)), make_split({0, 1}, {2})), ShapeError);
}

TEST(ConditionalMixture, SingletonEqualsGaussianConditional) {
  std::mt19937_64 rng(4);
  const auto mix = oracle::random_mixture(1, 6, 2, rng);
  const std::vector<Index> obs{1, 4}, mis{0, 2, 3, 5};
  const VecD xo = VecD::Constant(2, 0.3);
  const auto cm = conditional_mixture(mix, xo, make_split(obs, mis));
  const auto cg = conditional_gaussian(mix.components[0], xo, make_split(obs, mis));
  EXPECT_NEAR(cm.model.log_weights(0), 0.0, 1e-15);
  EXPECT_EQ(cm.model.components[0].mean, cg.mean);
  EXPECT_EQ(cm.model.components[0].factors, cg.factors);
}

TEST(ConditionalMixture, ReweightingOfTwoUnitGaussians) {
  // Observed marginals N(0,1) and N(2,1), x_o = 0.
  auto make = [](double m0) {
    return FactorGaussian<double>{(VecD(2) << m0, 0).finished(), MatD::Zero(2, 1), VecD::Ones(2)};
  };
  const auto mix = weighted({0.5, 0.5}, {make(0), make(2)});
  const auto cm = conditional_mixture(mix, VecD(VecD::Zero(1)), make_split({0}, {1}));
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(std::exp(cm.model.log_weights(0)), e2 / (e2 + 1), 1e-14);
  EXPECT_NEAR(std::exp(cm.model.log_weights(0)), 0.880797, 1e-6);
  EXPECT_NEAR(cm.max_weight, e2 / (e2 + 1), 1e-14);
}

TEST(ConditionalMixture, MatchesDenseBayesOracle) {
  std::mt19937_64 rng(55);
  std::normal_distribution<double> normal;
  for (int t = 0; t < 20; ++t) {
    const auto mix = oracle::random_mixture(3, 9, 2, rng);
    std::vector<Index> obs, mis;
    oracle::random_split(9, rng, obs, mis);
    VecD x(9);
    for (auto& v : x) v = normal(rng);
    const VecD xo = pick(x, obs);
    const auto cm = conditional_mixture(mix, xo, make_split(obs, mis));
    VecD logw(3);
    for (Index i = 0; i < 3; ++i) {
      const auto& g = mix.components[static_cast<std::size_t>(i)];
      const auto ref = oracle::condition(g.mean, oracle::dense_cov(g), obs, mis, xo);
      logw(i) = mix.log_weights(i) + ref.log_marginal;
      const auto& c = cm.model.components[static_cast<std::size_t>(i)];
      EXPECT_LT(oracle::rel_err(c.mean, ref.mean), 1e-8);
      EXPECT_LT(oracle::rel_err(oracle::dense_cov(c), ref.cov), 1e-8);
    }
    const double total = std::log(logw.array().exp().sum());
    for (Index i = 0; i < 3; ++i)
      EXPECT_LT(oracle::rel_err(std::exp(cm.model.log_weights(i)), std::exp(logw(i) - total)), 1e-8);
    EXPECT_NEAR(std::exp(log_sum_exp(cm.model.log_weights)), 1.0, 1e-12);
  }
}

TEST(ConditionalMixture, WeightsInvariantToLogWeightShift) {
  std::mt19937_64 rng(6);
  auto mix = oracle::random_mixture(3, 5, 1, rng);
  const std::vector<Index> obs{0, 2}, mis{1, 3, 4};
  const VecD xo = VecD::Constant(2, -0.4);
  const auto a = conditional_mixture(mix, xo, make_split(obs, mis));
  mix.log_weights.array() += 17.5;
  const auto b = conditional_mixture(mix, xo, make_split(obs, mis));
  EXPECT_LT((a.model.log_weights - b.model.log_weights).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConditionalMixture, PermutingComponentsPermutesOutput) {
  std::mt19937_64 rng(7);
  const auto mix = oracle::random_mixture(3, 5, 2, rng);
  MfaModel<double> rev;
  rev.log_weights = mix.log_weights.reverse();
  rev.components.assign(mix.components.rbegin(), mix.components.rend());
  const std::vector<Index> obs{1, 2}, mis{0, 3, 4};
  const VecD xo = VecD::Constant(2, 0.1);
  const auto a = conditional_mixture(mix, xo, make_split(obs, mis));
  const auto b = conditional_mixture(rev, xo, make_split(obs, mis));
  for (Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(a.model.log_weights(i), b.model.log_weights(2 - i), 1e-12);
    EXPECT_EQ(a.model.components[static_cast<std::size_t>(i)].mean,
              b.model.components[static_cast<std::size_t>(2 - i)].mean);
  }
  EXPECT_EQ(mixture_imputation(a.model, ImputeMode::TopComponent),
            mixture_imputation(b.model, ImputeMode::TopComponent));
}

TEST(MixtureImputation, SingletonBothModes) {
  const auto mix = weighted({1.0}, {point1(3.25)});
  EXPECT_DOUBLE_EQ(mixture_imputation(mix, ImputeMode::TopComponent)(0), 3.25);
  EXPECT_DOUBLE_EQ(mixture_imputation(mix, ImputeMode::MixtureMean)(0), 3.25);
}

TEST(MixtureImputation, TopComponentAndMixtureMean) {
  const auto mix = weighted({0.9, 0.1}, {point1(0), point1(10)});
  EXPECT_DOUBLE_EQ(mixture_imputation(mix, ImputeMode::TopComponent)(0), 0.0);
  EXPECT_NEAR(mixture_imputation(mix, ImputeMode::MixtureMean)(0), 1.0, 1e-14);
}

TEST(MixtureImputation, TieGoesToLowestIndex) {
  const auto mix = weighted({0.5, 0.5}, {point1(1), point1(3)});
  EXPECT_DOUBLE_EQ(mixture_imputation(mix, ImputeMode::TopComponent)(0), 1.0);
}

TEST(MixtureImputation, ModeNamesRoundTrip) {
  for (auto m : {ImputeMode::TopComponent, ImputeMode::MixtureMean}) EXPECT_EQ(parse_impute_mode(to_string(m)), m);
  EXPECT_THROW(parse_impute_mode("median"), ConfigError);
}
