#include <gtest/gtest.h>

#include <random>

#include "dmfa/eval.hpp"
#include "fixtures.hpp"

using namespace dmfa;

namespace {

const ImageShape kShape{1, 6, 6};
const PatchSize kPatch{3, 3};

Dataset random_images(std::size_t count, std::uint64_t seed) {
  Dataset d{kShape, {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t i = 0; i < count * kShape.size(); ++i) d.values.push_back(u(rng));
  return d;
}

MfaModel<float> random_mfa(int k, Index n, int l, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 0.3f);
  std::uniform_real_distribution<float> u(0.05f, 0.2f);
  MfaModel<float> mix;
  mix.log_weights = Vec<float>::Constant(k, -std::log(static_cast<float>(k)));
  for (int c = 0; c < k; ++c) {
    FactorGaussian<float> g{Vec<float>(n), Mat<float>(n, l), Vec<float>(n)};
    for (Index i = 0; i < n; ++i) {
      g.mean(i) = 0.5f + nd(rng);
      g.noise(i) = u(rng);
      for (int j = 0; j < l; ++j) g.factors(i, j) = nd(rng);
    }
    mix.components.push_back(g);
  }
  return mix;
}

NetworkSpec small_spec() {
  NetworkSpec s;
  s.shape = kShape;
  s.latent = 2;
  s.widths = {3, 4, 4, 5};
  s.seed = 3;
  return s;
}

/// -log p(x_m | x_o) = log p(x_o) - log p(x) for one Gaussian.
double conditional_nll_by_chain_rule(const FactorGaussian<double>& g, const MaskedSample& s) {
  const auto idx = SplitIndex::from_mask(s.mask);
  Vec<double> x(g.dim()), xo(static_cast<Index>(idx.observed.size()));
  for (Index i = 0; i < g.dim(); ++i) x(i) = s.ground_truth[static_cast<std::size_t>(i)];
  for (std::size_t i = 0; i < idx.observed.size(); ++i) xo(static_cast<Index>(i)) = x(idx.observed[i]);
  return log_density(restrict(g, idx.observed), xo) - log_density(g, x);
}

}  // namespace

TEST(EvaluateMfa, SingleComponentMatchesChainRule) {
  const auto mix = random_mfa(1, 36, 2, 1);
  const Dataset test = random_images(8, 2);
  const Metrics m = evaluate_mfa(mix, test, kPatch, 5);
  const auto g = mix.cast<double>().components[0];
  double nll = 0;
  for (std::size_t i = 0; i < test.count(); ++i) nll += conditional_nll_by_chain_rule(g, eval_sample(test, i, kPatch, 5));
  EXPECT_NEAR(m.mean_nll, nll / 8, 1e-8);
  EXPECT_EQ(m.count, 8u);
  EXPECT_EQ(m.model, "mfa");
  EXPECT_DOUBLE_EQ(m.mean_max_weight, 1.0);
}

TEST(EvaluateMfa, MixtureMeanEqualsTopComponentForOneComponent) {
  const auto mix = random_mfa(1, 36, 2, 3);
  const Dataset test = random_images(4, 4);
  const Metrics a = evaluate_mfa(mix, test, kPatch, 1, ImputeMode::TopComponent);
  const Metrics b = evaluate_mfa(mix, test, kPatch, 1, ImputeMode::MixtureMean);
  EXPECT_EQ(a.mean_mse, b.mean_mse);
  EXPECT_EQ(a.mean_nll, b.mean_nll);
}

TEST(EvaluateDmfa, MatchesDirectScoring) {
  DmfaNetwork<float> net(small_spec());
  const Dataset test = random_images(5, 6);
  const Metrics m = evaluate_dmfa(net, test, kPatch, 9);
  double nll = 0, mse = 0;
  for (std::size_t i = 0; i < test.count(); ++i) {
    const auto s = eval_sample(test, i, kPatch, 9);
    const auto gf = net.forward(s);
    const FactorGaussian<double> g{gf.mean.cast<double>(), gf.factors.cast<double>(), gf.noise.cast<double>()};
    nll += restricted_nll(g, s);
    for (std::size_t k = 0; k < s.ground_truth.size(); ++k)
      if (s.mask.bits[k]) mse += std::pow(g.mean(static_cast<Index>(k)) - s.ground_truth[k], 2);
  }
  EXPECT_NEAR(m.mean_nll, nll / 5, 1e-3);
  EXPECT_NEAR(m.mean_mse, mse / 5, 1e-5);
  EXPECT_EQ(m.model, "dmfa");
}

TEST(Evaluate, SameMaskSeedSameMetrics) {
  DmfaNetwork<float> net(small_spec());
  const auto mix = random_mfa(2, 36, 2, 7);
  const Dataset test = random_images(6, 8);
  const Metrics a = evaluate_dmfa(net, test, kPatch, 11), b = evaluate_dmfa(net, test, kPatch, 11);
  EXPECT_EQ(json(a), json(b));
  const Metrics c = evaluate_mfa(mix, test, kPatch, 11), d = evaluate_mfa(mix, test, kPatch, 11);
  EXPECT_EQ(json(c), json(d));
  EXPECT_NE(evaluate_mfa(mix, test, kPatch, 12).mean_nll, c.mean_nll);
}

TEST(Evaluate, ModelsShareMasks) {
  const Dataset test = random_images(20, 9);
  for (std::size_t i = 0; i < test.count(); ++i) {
    const auto s = eval_sample(test, i, kPatch, 4);
    EXPECT_EQ(s.mask.bits, eval_patch_mask(kShape, kPatch, 4, i).bits);
    EXPECT_EQ(s.mask.missing_count(), 9u);
  }
}

TEST(Evaluate, MetricsJsonStatesUnits) {
  const Metrics m = aggregate("mfa", {{1.0, 2.0, 0.5}, {3.0, 4.0, 1.0}}, 42);
  EXPECT_DOUBLE_EQ(m.mean_nll, 2.0);
  EXPECT_DOUBLE_EQ(m.mean_mse, 3.0);
  EXPECT_DOUBLE_EQ(m.mean_max_weight, 0.75);
  const json j = m;
  EXPECT_EQ(j.at("pixel_scale"), "unit-interval");
  EXPECT_EQ(j.at("mask_seed"), 42);
  EXPECT_TRUE(j.contains("nll_unit"));
  EXPECT_TRUE(j.contains("mean_max_weight"));
  EXPECT_FALSE(json(aggregate("dmfa", {{1.0, 1.0, 1.0}}, 0)).contains("mean_max_weight"));
  EXPECT_THROW(aggregate("dmfa", {}, 0), ConfigError);
}

TEST(Evaluate, ShapeMismatchRejected) {
  DmfaNetwork<float> net(small_spec());
  const Dataset other{{1, 8, 8}, std::vector<float>(64, 0.5f)};
  EXPECT_THROW(evaluate_dmfa(net, other, kPatch, 0), ShapeError);
  EXPECT_THROW(evaluate_mfa(random_mfa(1, 36, 1, 1), other, kPatch, 0), ShapeError);
}

TEST(Impute, ObservedPixelsAreKeptExactly) {
  DmfaNetwork<float> net(small_spec());
  const auto mix = random_mfa(3, 36, 2, 10).cast<double>();
  const Dataset test = random_images(5, 11);
  for (std::size_t i = 0; i < test.count(); ++i) {
    const auto s = eval_sample(test, i, kPatch, 3);
    for (const auto& out : {impute_dmfa(net, s), impute_mfa(mix, s, ImputeMode::TopComponent),
                            impute_mfa(mix, s, ImputeMode::MixtureMean)}) {
      ASSERT_EQ(out.size(), s.ground_truth.size());
      for (std::size_t k = 0; k < out.size(); ++k)
        if (!s.mask.bits[k]) ASSERT_EQ(out[k], s.ground_truth[k]);
    }
  }
}

TEST(ImputationGrid, LayoutAndClamping) {
  fixture::TempDir dir;
  const Dataset test = random_images(3, 12);
  std::vector<MaskedSample> rows;
  for (std::size_t i = 0; i < 3; ++i) rows.push_back(eval_sample(test, i, kPatch, 1));
  const NamedImputer bright{"bright", [](const MaskedSample& s) { return std::vector<float>(s.ground_truth.size(), 1.3f); }};
  const NamedImputer dark{"dark", [](const MaskedSample& s) { return std::vector<float>(s.ground_truth.size(), -0.2f); }};
  const ImageShape grid = export_imputation_grid({bright, dark}, rows, dir / "grid.pgm");
  EXPECT_EQ(grid, (ImageShape{1, 18, 24}));
  const auto img = read_pnm(dir / "grid.pgm");
  ASSERT_EQ(img.shape, grid);
  auto at = [&](int y, int x) { return img.values[static_cast<std::size_t>(y) * 24 + x]; };
  for (int y = 0; y < 18; ++y) {
    EXPECT_EQ(at(y, 12), 1.0f);
    EXPECT_EQ(at(y, 23), 0.0f);
  }
  // Original in column 0 and masked input in column 1.
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * 6 + x;
      EXPECT_NEAR(at(y, x), rows[0].ground_truth[k], 0.5 / 255 + 1e-6);
      EXPECT_NEAR(at(y, 6 + x), rows[0].mask.bits[k] ? kMaskedFill : rows[0].ground_truth[k], 0.5 / 255 + 1e-6);
    }
}

TEST(ImputationGrid, NoModelsGivesTwoColumns) {
  fixture::TempDir dir;
  const Dataset test = random_images(2, 13);
  std::vector<MaskedSample> rows{eval_sample(test, 0, kPatch, 1), eval_sample(test, 1, kPatch, 1)};
  EXPECT_EQ(export_imputation_grid({}, rows, dir / "g.pgm"), (ImageShape{1, 12, 12}));
  EXPECT_THROW(export_imputation_grid({}, {}, dir / "e.pgm"), ConfigError);
}

TEST(ParameterImages, OneImagePerParameterWithSidecar) {
  fixture::TempDir dir;
  const ImageShape shape{1, 4, 5};
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  FactorGaussian<float> g{Vec<float>(20), Mat<float>(20, 4), Vec<float>(20)};
  for (Index i = 0; i < 20; ++i) {
    g.mean(i) = u(rng);
    g.noise(i) = 0.01f + u(rng);
    for (int j = 0; j < 4; ++j) g.factors(i, j) = u(rng) - 0.5f;
  }
  g.factors.col(2).setConstant(0.7f);
  const auto out = export_parameter_images(g, shape, dir / "params", "c0_");
  ASSERT_EQ(out.images.size(), 6u);
  for (const auto& p : out.images) EXPECT_TRUE(fs::exists(p)) << p;

  const auto mean = read_pnm(out.images[0]);
  for (Index i = 0; i < 20; ++i) EXPECT_NEAR(mean.values[static_cast<std::size_t>(i)], g.mean(i), 1.0 / 255);

  const auto flat = read_pnm(out.images[3]);
  for (float v : flat.values) EXPECT_NEAR(v, 0.5f, 1.0 / 255);

  const auto f0 = read_pnm(out.images[1]);
  EXPECT_EQ(*std::min_element(f0.values.begin(), f0.values.end()), 0.0f);
  EXPECT_EQ(*std::max_element(f0.values.begin(), f0.values.end()), 1.0f);

  std::ifstream in(out.sidecar);
  const json side = json::parse(in);
  EXPECT_EQ(side.at("latent"), 4);
  EXPECT_TRUE(side.at("factors").at(2).at("degenerate").get<bool>());
  EXPECT_FALSE(side.at("factors").at(0).at("degenerate").get<bool>());
  EXPECT_TRUE(side.at("noise").contains("median"));
}

TEST(ParameterImages, RejectsShapeMismatch) {
  fixture::TempDir dir;
  FactorGaussian<float> g{Vec<float>::Zero(9), Mat<float>::Zero(9, 1), Vec<float>::Ones(9)};
  EXPECT_THROW(export_parameter_images(g, {1, 4, 4}, dir / "p"), ShapeError);
}
