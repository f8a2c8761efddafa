#pragma once
// Scoring of conditional densities on masked test images, imputation grids and
// parameter-image export.
//
// Conventions: pixels in [0,1]; NLL in nats per image over the missing
// coordinates; MSE is the per-image sum of squared errors over the missing
// coordinates. Every model is scored on the same masks, drawn from mask_seed.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmfa/conditional.hpp"
#include "dmfa/dmfa.hpp"
#include "dmfa/masking.hpp"
#include "dmfa/mfa.hpp"
#include "dmfa/parallel.hpp"
#include "dmfa/tensorio.hpp"

namespace dmfa {

inline constexpr const char* kPixelScale = "unit-interval";

struct Metrics {
  std::string model;
  double mean_nll = 0;
  double mean_mse = 0;
  std::size_t count = 0;
  std::string pixel_scale = kPixelScale;
  std::uint64_t mask_seed = 0;
  double mean_max_weight = 1;  // MFA only: average largest conditional weight
};

inline void to_json(json& j, const Metrics& m) {
  j = {{"model", m.model},
       {"mean_nll", m.mean_nll},
       {"mean_mse", m.mean_mse},
       {"count", m.count},
       {"pixel_scale", m.pixel_scale},
       {"nll_unit", "nats per image, missing coordinates only"},
       {"mse_unit", "sum of squared errors per image, missing coordinates only"},
       {"mask_seed", m.mask_seed}};
  if (m.model == "mfa") j["mean_max_weight"] = m.mean_max_weight;
}

struct ImageScore {
  double nll = 0;
  double mse = 0;
  double max_weight = 1;
};

inline Metrics aggregate(std::string model, const std::vector<ImageScore>& scores, std::uint64_t mask_seed) {
  if (scores.empty()) throw ConfigError("evaluation needs at least one test image");
  Metrics m;
  m.model = std::move(model);
  m.count = scores.size();
  m.mask_seed = mask_seed;
  double nll = 0, mse = 0, w = 0;
  for (const auto& s : scores) {  // fixed order
    nll += s.nll;
    mse += s.mse;
    w += s.max_weight;
  }
  m.mean_nll = nll / static_cast<double>(m.count);
  m.mean_mse = mse / static_cast<double>(m.count);
  m.mean_max_weight = w / static_cast<double>(m.count);
  return m;
}

inline MaskedSample eval_sample(const Dataset& test, std::size_t i, PatchSize patch, std::uint64_t mask_seed) {
  return apply_mask(test.sample(i), eval_patch_mask(test.shape, patch, mask_seed, i));
}

/// Full-space imputation: observed pixels copied, missing ones from `fill`.
inline std::vector<float> fill_missing(const MaskedSample& s, const Vec<double>& fill_m) {
  std::vector<float> out = s.ground_truth;
  Index r = 0;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (s.mask.bits[i]) out[i] = static_cast<float>(fill_m(r++));
  return out;
}

// --- DMFA -----------------------------------------------------------------

inline std::vector<ImageScore> score_dmfa(DmfaNetwork<float>& net, const Dataset& test, PatchSize patch,
                                          std::uint64_t mask_seed, std::size_t batch = 64) {
  if (test.shape != net.spec().shape) throw ShapeError("test data shape does not match the network");
  std::vector<ImageScore> scores(test.count());
  for (std::size_t start = 0; start < test.count(); start += batch) {
    const std::size_t b = std::min(batch, test.count() - start);
    std::vector<MaskedSample> samples;
    std::vector<const MaskedSample*> ptrs;
    for (std::size_t s = 0; s < b; ++s) samples.push_back(eval_sample(test, start + s, patch, mask_seed));
    for (const auto& s : samples) ptrs.push_back(&s);
    const Mat<float> head = net.forward_head(ptrs);
    parallel_for(b, [&](std::size_t s) {
      const FactorGaussian<double> g = decode_head<double>(head.col(static_cast<Index>(s)), net.dim(), net.latent());
      const MaskedSample& ms = samples[s];
      ImageScore& out = scores[start + s];
      out.nll = restricted_nll(g, ms);
      for (std::size_t i = 0; i < ms.ground_truth.size(); ++i) {
        if (!ms.mask.bits[i]) continue;
        const double e = g.mean(static_cast<Index>(i)) - ms.ground_truth[i];
        out.mse += e * e;
      }
    });
  }
  return scores;
}

inline Metrics evaluate_dmfa(DmfaNetwork<float>& net, const Dataset& test, PatchSize patch, std::uint64_t mask_seed) {
  return aggregate("dmfa", score_dmfa(net, test, patch, mask_seed), mask_seed);
}

/// Imputation with the mean of the predicted Gaussian.
inline std::vector<float> impute_dmfa(DmfaNetwork<float>& net, const MaskedSample& s) {
  const FactorGaussian<float> g = net.forward(s);
  std::vector<float> out = s.ground_truth;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (s.mask.bits[i]) out[i] = g.mean(static_cast<Index>(i));
  return out;
}

// --- MFA ------------------------------------------------------------------

inline ImageScore score_mfa_sample(const MfaModel<double>& mix, const MaskedSample& s, ImputeMode mode) {
  const SplitSample<double> parts = split<double>(s.ground_truth, s.mask);
  const MixtureConditional<double> cond = conditional_mixture(mix, parts.observed, parts.index);
  ImageScore out;
  out.nll = -mixture_log_density(cond.model, parts.missing);
  out.mse = (mixture_imputation(cond.model, mode) - parts.missing).squaredNorm();
  out.max_weight = cond.max_weight;
  return out;
}

inline Metrics evaluate_mfa(const MfaModel<float>& mix, const Dataset& test, PatchSize patch, std::uint64_t mask_seed,
                            ImputeMode mode = ImputeMode::TopComponent) {
  if (static_cast<std::size_t>(mix.dim()) != test.dim()) throw ShapeError("test data dimension does not match the MFA");
  const MfaModel<double> mix64 = mix.cast<double>();
  std::vector<ImageScore> scores(test.count());
  parallel_for(test.count(), [&](std::size_t i) {
    scores[i] = score_mfa_sample(mix64, eval_sample(test, i, patch, mask_seed), mode);
  });
  return aggregate("mfa", scores, mask_seed);
}

inline std::vector<float> impute_mfa(const MfaModel<double>& mix, const MaskedSample& s, ImputeMode mode) {
  const SplitSample<double> parts = split<double>(s.ground_truth, s.mask);
  const MixtureConditional<double> cond = conditional_mixture(mix, parts.observed, parts.index);
  return fill_missing(s, mixture_imputation(cond.model, mode));
}

// --- figures --------------------------------------------------------------

using Imputer = std::function<std::vector<float>(const MaskedSample&)>;

struct NamedImputer {
  std::string name;
  Imputer impute;
};

/// Grey level used for missing pixels in the "masked" column.
inline constexpr float kMaskedFill = 0.5f;

/// One row per sample; columns: original, masked input, one imputation per
/// model. Returns the grid shape.
inline ImageShape export_imputation_grid(const std::vector<NamedImputer>& models, const std::vector<MaskedSample>& rows,
                                         const fs::path& path) {
  if (rows.empty()) throw ConfigError("imputation grid needs at least one sample");
  const ImageShape tile = rows.front().mask.shape;
  const int cols = 2 + static_cast<int>(models.size());
  const ImageShape grid{tile.channels, tile.height * static_cast<int>(rows.size()), tile.width * cols};
  std::vector<float> canvas(grid.size(), 0.0f);
  auto blit = [&](int r, int c, const std::vector<float>& img) {
    for (int ch = 0; ch < tile.channels; ++ch)
      for (int y = 0; y < tile.height; ++y)
        for (int x = 0; x < tile.width; ++x) {
          const std::size_t src = (static_cast<std::size_t>(ch) * tile.height + y) * tile.width + x;
          const std::size_t dst = (static_cast<std::size_t>(ch) * grid.height + r * tile.height + y) * grid.width +
                                  c * tile.width + x;
          canvas[dst] = img[src];
        }
  };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const MaskedSample& s = rows[r];
    if (s.mask.shape != tile) throw ShapeError("imputation grid rows must share one image shape");
    blit(static_cast<int>(r), 0, s.ground_truth);
    std::vector<float> masked = s.values;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (s.mask.bits[i]) masked[i] = kMaskedFill;
    blit(static_cast<int>(r), 1, masked);
    for (std::size_t m = 0; m < models.size(); ++m) blit(static_cast<int>(r), 2 + static_cast<int>(m), models[m].impute(s));
  }
  write_pnm(path, grid, canvas);
  return grid;
}

struct ParameterImages {
  std::vector<fs::path> images;  // mean, factor_0..factor_{l-1}, noise
  fs::path sidecar;
};

/// Writes the mean (unnormalized, clamped), every factor (min-max normalized
/// per image) and the noise (log scale, min-max normalized) as images, plus a
/// JSON sidecar with the display scales.
inline ParameterImages export_parameter_images(const FactorGaussian<float>& g, const ImageShape& shape,
                                               const fs::path& dir, const std::string& prefix = "") {
  if (static_cast<std::size_t>(g.dim()) != shape.size()) throw ShapeError("Gaussian dimension does not match shape");
  fs::create_directories(dir);
  ParameterImages out;
  json side = {{"shape", shape}, {"latent", g.rank()}, {"factors", json::array()}};

  auto normalized = [](const Vec<float>& v, json& info) {
    const float lo = v.minCoeff(), hi = v.maxCoeff();
    info["min"] = lo;
    info["max"] = hi;
    std::vector<float> img(static_cast<std::size_t>(v.size()));
    if (!(hi > lo)) {
      info["degenerate"] = true;
      std::fill(img.begin(), img.end(), 0.5f);
    } else {
      info["degenerate"] = false;
      for (Index i = 0; i < v.size(); ++i) img[static_cast<std::size_t>(i)] = (v(i) - lo) / (hi - lo);
    }
    return img;
  };

  out.images.push_back(dir / (prefix + "mean.pgm"));
  if (shape.channels == 3) out.images.back().replace_extension(".ppm");
  write_pnm(out.images.back(), shape, std::vector<float>(g.mean.data(), g.mean.data() + g.dim()));
  side["mean"] = {{"transform", "clamp to [0,1]"}};

  for (Index j = 0; j < g.rank(); ++j) {
    json info = {{"index", j}, {"transform", "min-max"}};
    const auto img = normalized(g.factors.col(j), info);
    out.images.push_back(dir / (prefix + "factor_" + std::to_string(j) + (shape.channels == 3 ? ".ppm" : ".pgm")));
    write_pnm(out.images.back(), shape, img);
    side["factors"].push_back(info);
  }

  json noise_info = {{"transform", "log then min-max"}};
  const auto noise_img = normalized(g.noise.array().log().matrix(), noise_info);
  noise_info["median"] = [&] {
    std::vector<float> d(g.noise.data(), g.noise.data() + g.dim());
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    return d[d.size() / 2];
  }();
  out.images.push_back(dir / (prefix + "noise" + (shape.channels == 3 ? ".ppm" : ".pgm")));
  write_pnm(out.images.back(), shape, noise_img);
  side["noise"] = noise_info;

  out.sidecar = dir / (prefix + "scales.json");
  std::ofstream(out.sidecar) << side.dump(2) << '\n';
  return out;
}

}  // namespace dmfa
