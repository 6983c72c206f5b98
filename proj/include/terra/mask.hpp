#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "terra/error.hpp"
#include "terra/random.hpp"
#include "terra/raster.hpp"

namespace terra {

enum class MaskStrategy { random, uniform };

inline MaskStrategy parse_mask_strategy(const std::string& s) {
  if (s == "random") return MaskStrategy::random;
  if (s == "uniform") return MaskStrategy::uniform;
  throw UsageError("unknown mask strategy '" + s + "' (expected random or uniform)");
}

inline const char* to_string(MaskStrategy s) { return s == MaskStrategy::random ? "random" : "uniform"; }

/// Hidden token indices over a flattened row-major lattice.
struct MaskPlan {
  std::size_t n_tokens = 0;
  std::vector<std::size_t> masked;  // sorted, distinct
  double ratio = 0.0;
  std::uint64_t seed = 0;
  MaskStrategy strategy = MaskStrategy::random;

  std::size_t n_visible() const { return n_tokens - masked.size(); }

  std::vector<std::size_t> visible() const {
    std::vector<std::size_t> out;
    out.reserve(n_visible());
    std::size_t k = 0;
    for (std::size_t i = 0; i < n_tokens; ++i) {
      if (k < masked.size() && masked[k] == i) {
        ++k;
        continue;
      }
      out.push_back(i);
    }
    return out;
  }

  std::vector<std::uint8_t> is_masked() const {
    std::vector<std::uint8_t> m(n_tokens, 0);
    for (auto i : masked) m[i] = 1;
    return m;
  }
};

inline std::size_t masked_count(std::size_t n_tokens, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_tokens)));
}

/// Random: seeded Fisher–Yates, first round(ratio·N) indices hidden.
/// Uniform: a centered regular lattice with the largest integer stride that
/// still keeps ⌈(1−ratio)·N⌉ cells visible; everything else is hidden, and the
/// plan's ratio records the achieved fraction. `width` is the lattice row
/// length (0 means a square lattice).
inline MaskPlan make_mask(std::size_t n_tokens, double ratio, std::uint64_t seed,
                          MaskStrategy strategy = MaskStrategy::random, std::size_t width = 0) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw UsageError("mask ratio must be in [0, 1]");
  MaskPlan plan;
  plan.n_tokens = n_tokens;
  plan.seed = seed;
  plan.strategy = strategy;
  if (strategy == MaskStrategy::random) {
    std::vector<std::size_t> order(n_tokens);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    order.resize(masked_count(n_tokens, ratio));
    std::sort(order.begin(), order.end());
    plan.masked = std::move(order);
    plan.ratio = ratio;
    return plan;
  }

  if (width == 0) width = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_tokens))));
  if (width == 0 || n_tokens % width != 0) throw UsageError("uniform masking needs n_tokens divisible by width");
  const std::size_t height = n_tokens / width;
  const auto want = static_cast<std::size_t>(std::ceil((1.0 - ratio) * static_cast<double>(n_tokens) - 1e-9));
  std::vector<std::uint8_t> keep(n_tokens, 0);
  if (want > 0) {
    auto count = [&](std::size_t k) { return ((height - 1) / k + 1) * ((width - 1) / k + 1); };
    std::size_t stride = 1;
    while (stride + 1 <= std::max(width, height) && count(stride + 1) >= want) ++stride;
    const std::size_t off_r = ((height - 1) % stride) / 2;
    const std::size_t off_c = ((width - 1) % stride) / 2;
    for (std::size_t r = off_r; r < height; r += stride)
      for (std::size_t c = off_c; c < width; c += stride) keep[r * width + c] = 1;
  }
  for (std::size_t i = 0; i < n_tokens; ++i)
    if (!keep[i]) plan.masked.push_back(i);
  plan.ratio = n_tokens ? static_cast<double>(plan.masked.size()) / static_cast<double>(n_tokens) : 0.0;
  return plan;
}

/// Plan hiding exactly the invalid cells of a sparse tile.
inline MaskPlan mask_from_tile(const GridTile& tile) {
  if (tile.valid_count() == 0) throw EmptyInputError("tile has no valid cells");
  MaskPlan plan;
  plan.n_tokens = tile.size();
  for (std::size_t i = 0; i < tile.size(); ++i)
    if (!tile.is_valid(i)) plan.masked.push_back(i);
  plan.ratio = sparsity(tile);
  return plan;
}

/// Copy of `tile` with the plan's hidden cells invalidated.
inline GridTile apply_mask(const GridTile& tile, const MaskPlan& plan) {
  if (plan.n_tokens != tile.size()) throw GeometryError("mask plan does not match tile size");
  GridTile out = tile;
  for (auto i : plan.masked) out.invalidate(i);
  return out;
}

}  // namespace terra
