#pragma once

// Whole-raster inference: overlapping model tiles blended into one DEM.

#include <cstdint>
#include <vector>

#include "terra/baselines.hpp"
#include "terra/model.hpp"
#include "terra/parallel.hpp"
#include "terra/raster.hpp"

namespace terra {

struct InferOptions {
  double overlap = 0.5;
  Blend blend = Blend::hann;
  bool overwrite_visible = true;
};

struct InferReport {
  std::size_t tiles = 0;
  std::size_t empty_tiles = 0;  // no measured cell; covered by IDW instead
  std::size_t idw_cells = 0;
  double input_sparsity = 0;
};

/// Interpolates every invalid cell of `sparse`. The raster is cut into model
/// tiles (last row/column of tiles flush with the edge), each tile with at
/// least one measured cell is inferred, and the results are blended. Cells
/// covered only by tiles without measurements are filled by IDW.
template <class T>
GridTile infer_raster(const GridTile& sparse, const ModelParams<T>& params, const InferOptions& opt = {},
                      InferReport* report = nullptr) {
  const std::size_t side = params.config.tile_side;
  if (sparse.width() < side || sparse.height() < side)
    throw GeometryError("raster is " + std::to_string(sparse.width()) + "x" + std::to_string(sparse.height()) +
                        ", smaller than the model's " + std::to_string(side) + "x" + std::to_string(side) + " tile");
  if (sparse.valid_count() == 0) throw EmptyInputError("input raster has no measured cells");
  const std::size_t stride = tile_stride(side, opt.overlap);
  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (auto r : tile_offsets(sparse.height(), side, stride, true))
    for (auto c : tile_offsets(sparse.width(), side, stride, true)) windows.emplace_back(r, c);

  std::vector<GridTile> outputs(windows.size());
  std::vector<std::uint8_t> used(windows.size(), 0);
  parallel_for(windows.size(), [&](std::size_t k) {
    const GridTile t = crop(sparse, windows[k].first, windows[k].second, side, side);
    if (t.valid_count() == 0) return;
    outputs[k] = infer(t, params, opt.overwrite_visible);
    used[k] = 1;
  });
  std::vector<GridTile> kept;
  for (std::size_t k = 0; k < windows.size(); ++k)
    if (used[k]) kept.push_back(std::move(outputs[k]));

  GridTile out(sparse.geometry);
  out.nodata = sparse.nodata;
  if (!kept.empty()) {
    const GridTile blended = mosaic(kept, opt.blend);
    // The mosaic spans only the kept tiles; place it back on the full grid.
    const double cs = sparse.cell_size();
    const auto c0 = static_cast<std::size_t>(std::llround((blended.geometry.origin_x - sparse.geometry.origin_x) / cs));
    const auto top = sparse.geometry.origin_y + static_cast<double>(sparse.height()) * cs;
    const auto btop = blended.geometry.origin_y + static_cast<double>(blended.height()) * cs;
    const auto r0 = static_cast<std::size_t>(std::llround((top - btop) / cs));
    for (std::size_t r = 0; r < blended.height(); ++r)
      for (std::size_t c = 0; c < blended.width(); ++c) {
        const auto i = blended.index(r, c);
        if (blended.is_valid(i)) out.set(out.index(r0 + r, c0 + c), blended.values[i]);
      }
  }
  std::size_t idw_cells = 0;
  if (!out.fully_valid()) {
    const GridTile fill = idw_fill(sparse);
    for (std::size_t i = 0; i < out.size(); ++i)
      if (!out.is_valid(i)) out.set(i, fill.values[i]), ++idw_cells;
  }
  if (opt.overwrite_visible)
    for (std::size_t i = 0; i < out.size(); ++i)
      if (sparse.is_valid(i)) out.values[i] = sparse.values[i];
  if (report) *report = {windows.size(), windows.size() - kept.size(), idw_cells, sparsity(sparse)};
  return out;
}

}  // namespace terra
