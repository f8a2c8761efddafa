#pragma once
// Missingness simulation. Convention: mask bit 1 = missing.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "dmfa/error.hpp"
#include "dmfa/lowrank_gauss.hpp"
#include "dmfa/rng.hpp"
#include "dmfa/tensorio.hpp"

namespace dmfa {

struct Mask {
  std::vector<std::uint8_t> bits;  // channel-major like the data, 1 = missing
  ImageShape shape;

  std::size_t missing_count() const {
    std::size_t c = 0;
    for (auto b : bits) c += b;
    return c;
  }

  static Mask none(const ImageShape& shape) { return {std::vector<std::uint8_t>(shape.size(), 0), shape}; }
};

struct PatchSize {
  int height = 0;
  int width = 0;
};

/// Rectangle of missing pixels, identical across channels, with its top-left
/// corner uniform over all positions where it fits.
template <typename Rng>
Mask random_patch_mask(const ImageShape& shape, PatchSize patch, Rng& rng) {
  if (patch.height < 1 || patch.width < 1) throw ConfigError("patch dimensions must be positive");
  if (patch.height > shape.height || patch.width > shape.width) {
    throw ConfigError("patch " + std::to_string(patch.height) + "x" + std::to_string(patch.width) +
                      " does not fit a " + std::to_string(shape.height) + "x" + std::to_string(shape.width) +
                      " image");
  }
  std::uniform_int_distribution<int> row(0, shape.height - patch.height);
  std::uniform_int_distribution<int> col(0, shape.width - patch.width);
  const int top = row(rng);
  const int left = col(rng);
  Mask m = Mask::none(shape);
  const std::size_t plane = shape.pixels();
  for (int c = 0; c < shape.channels; ++c)
    for (int y = top; y < top + patch.height; ++y)
      for (int x = left; x < left + patch.width; ++x)
        m.bits[c * plane + static_cast<std::size_t>(y) * shape.width + x] = 1;
  return m;
}

/// Independent per-sample mask stream keyed by (seed, epoch, sample index).
inline Mask sample_patch_mask(const ImageShape& shape, PatchSize patch, std::uint64_t seed, std::uint64_t epoch,
                              std::uint64_t index) {
  auto rng = make_rng(seed, 0x4d41534bull, epoch, index);
  return random_patch_mask(shape, patch, rng);
}

/// Evaluation masks: one per test image, shared by every scored model.
inline Mask eval_patch_mask(const ImageShape& shape, PatchSize patch, std::uint64_t mask_seed, std::uint64_t index) {
  auto rng = make_rng(mask_seed, 0x4556414cull, index);
  return random_patch_mask(shape, patch, rng);
}

struct MaskedSample {
  std::vector<float> values;  // missing coordinates zeroed
  Mask mask;
  std::vector<float> ground_truth;
};

inline MaskedSample apply_mask(std::span<const float> x, const Mask& mask) {
  if (x.size() != mask.bits.size()) throw ShapeError("apply_mask: sample and mask lengths differ");
  MaskedSample s;
  s.mask = mask;
  s.ground_truth.assign(x.begin(), x.end());
  s.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) s.values[i] = mask.bits[i] ? 0.0f : x[i];
  return s;
}

/// Partition of the coordinates into observed (o) and missing (m) sets.
struct SplitIndex {
  std::vector<Index> observed;
  std::vector<Index> missing;

  Index dim() const { return static_cast<Index>(observed.size() + missing.size()); }

  /// Throws IndexError unless observed and missing partition [0, n).
  void validate(Index n) const {
    check_index_list(observed, n);
    check_index_list(missing, n);
    if (dim() != n) throw IndexError("split does not cover every coordinate");
    std::size_t i = 0, j = 0;
    while (i < observed.size() && j < missing.size()) {
      if (observed[i] == missing[j]) throw IndexError("coordinate is both observed and missing");
      observed[i] < missing[j] ? ++i : ++j;
    }
  }

  static SplitIndex from_mask(const Mask& mask) {
    SplitIndex s;
    for (std::size_t i = 0; i < mask.bits.size(); ++i)
      (mask.bits[i] ? s.missing : s.observed).push_back(static_cast<Index>(i));
    return s;
  }
};

template <typename T>
struct SplitSample {
  Vec<T> observed;
  Vec<T> missing;
  SplitIndex index;
};

template <typename T = double>
SplitSample<T> split(std::span<const float> x, const Mask& mask) {
  if (x.size() != mask.bits.size()) throw ShapeError("split: sample and mask lengths differ");
  SplitSample<T> out;
  out.index = SplitIndex::from_mask(mask);
  const Vec<T> full = Eigen::Map<const Vec<float>>(x.data(), static_cast<Index>(x.size())).template cast<T>();
  out.observed = gather(full, std::span<const Index>(out.index.observed));
  out.missing = gather(full, std::span<const Index>(out.index.missing));
  return out;
}

/// Inverse of split: writes x_o and x_m back to their coordinates.
template <typename T>
Vec<T> scatter(const Vec<T>& observed, const Vec<T>& missing, const SplitIndex& idx) {
  if (observed.size() != static_cast<Index>(idx.observed.size()) ||
      missing.size() != static_cast<Index>(idx.missing.size())) {
    throw ShapeError("scatter: value counts do not match the split");
  }
  Vec<T> out(idx.dim());
  for (std::size_t i = 0; i < idx.observed.size(); ++i) out(idx.observed[i]) = observed(static_cast<Index>(i));
  for (std::size_t i = 0; i < idx.missing.size(); ++i) out(idx.missing[i]) = missing(static_cast<Index>(i));
  return out;
}

/// Mask as a black/white PGM (white = missing); first channel only.
inline void export_mask_pgm(const fs::path& path, const Mask& mask) {
  const ImageShape plane{1, mask.shape.height, mask.shape.width};
  std::vector<float> v(plane.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.bits[i] ? 1.0f : 0.0f;
  write_pnm(path, plane, v);
}

}  // namespace dmfa
