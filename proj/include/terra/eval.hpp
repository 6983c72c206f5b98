#pragma once

// Accuracy assessment: elevation and slope difference statistics, D8 stream
// extraction, and stream precision/recall against a buffered reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numbers>
#include <queue>
#include <string>
#include <vector>

#include "json.hpp"

#include "terra/error.hpp"
#include "terra/loss.hpp"
#include "terra/mask.hpp"
#include "terra/parallel.hpp"
#include "terra/raster.hpp"
#include "terra/stats.hpp"

namespace terra {

inline std::vector<double> default_stream_thresholds() { return {20000.0, 100000.0, 2000000.0}; }

namespace detail {

inline void require_same_geometry(const GridTile& a, const GridTile& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw GeometryError("rasters differ in size: " + std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                        " vs " + std::to_string(b.width()) + "x" + std::to_string(b.height()));
  if (a.cell_size() != b.cell_size()) throw GeometryError("rasters differ in cell size");
}

inline void require_fully_valid(const GridTile& t, const char* what) {
  if (!t.fully_valid()) throw UsageError(std::string(what) + " needs a raster without NODATA cells");
}

}  // namespace detail

/// Slope (degrees) of both rasters, then diff_stats of pred − ref over all cells.
inline DiffStats slope_stats(const GridTile& pred, const GridTile& ref, double cell_size) {
  detail::require_same_geometry(pred, ref);
  detail::require_fully_valid(pred, "slope statistics");
  detail::require_fully_valid(ref, "slope statistics");
  if (!(cell_size > 0)) throw UsageError("cell_size must be positive");
  const auto sp = slope_field(pred.values, pred.width(), pred.height(), cell_size);
  const auto sr = slope_field(ref.values, ref.width(), ref.height(), cell_size);
  DiffAccumulator acc;
  const double deg = 180.0 / std::numbers::pi;
  for (std::size_t i = 0; i < sp.size(); ++i) acc.add((sp[i] - sr[i]) * deg);
  return acc.finish();
}

// ---------------------------------------------------------------------------
// hydrology

/// D8 neighbour offsets in tie-break order: E, SE, S, SW, W, NW, N, NE
/// (row 0 is north).
inline constexpr int kD8Row[8] = {0, 1, 1, 1, 0, -1, -1, -1};
inline constexpr int kD8Col[8] = {1, 1, 0, -1, -1, -1, 0, 1};
inline constexpr std::int8_t kNoFlow = -1;  // drains off the raster edge

/// Priority-flood depression filling. Every cell ends with a non-ascending
/// path to the edge, and no cell is raised above what that requires.
inline GridTile fill_sinks(const GridTile& dem) {
  detail::require_fully_valid(dem, "fill_sinks");
  const std::size_t w = dem.width(), h = dem.height();
  GridTile out = dem;
  if (w == 0 || h == 0) return out;
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> open;
  std::vector<std::uint8_t> done(w * h, 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) {
        const auto i = r * w + c;
        done[i] = 1;
        open.emplace(out.values[i], i);
      }
  while (!open.empty()) {
    const auto [z, i] = open.top();
    open.pop();
    const long r = static_cast<long>(i / w), c = static_cast<long>(i % w);
    for (int k = 0; k < 8; ++k) {
      const long nr = r + kD8Row[k], nc = c + kD8Col[k];
      if (nr < 0 || nc < 0 || nr >= static_cast<long>(h) || nc >= static_cast<long>(w)) continue;
      const auto j = static_cast<std::size_t>(nr) * w + static_cast<std::size_t>(nc);
      if (done[j]) continue;
      done[j] = 1;
      out.values[j] = std::max(out.values[j], z);
      open.emplace(out.values[j], j);
    }
  }
  return out;
}

/// D8 receiver index (0..7 into the offset tables) or kNoFlow for cells that
/// drain off the edge. Steepest drop wins, ties go to the earlier direction.
/// Cells without a lower neighbour are routed across their flat towards the
/// nearest already-draining cell (breadth-first, fixed neighbour order).
inline std::vector<std::int8_t> flow_directions(const GridTile& dem) {
  detail::require_fully_valid(dem, "flow routing");
  const std::size_t w = dem.width(), h = dem.height();
  std::vector<std::int8_t> dir(w * h, kNoFlow);
  std::vector<std::uint8_t> resolved(w * h, 0);
  const double diag = std::sqrt(2.0);
  auto inside = [&](long r, long c) { return r >= 0 && c >= 0 && r < static_cast<long>(h) && c < static_cast<long>(w); };
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const auto i = r * w + c;
      double best = 0;
      for (int k = 0; k < 8; ++k) {
        const long nr = static_cast<long>(r) + kD8Row[k], nc = static_cast<long>(c) + kD8Col[k];
        if (!inside(nr, nc)) continue;
        const double drop = (dem.values[i] - dem.values[static_cast<std::size_t>(nr) * w + nc]) / (k % 2 ? diag : 1.0);
        if (drop > best) best = drop, dir[i] = static_cast<std::int8_t>(k);
      }
      const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
      resolved[i] = dir[i] != kNoFlow || edge;
    }
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < w * h; ++i)
    if (resolved[i]) queue.push_back(i);
  while (!queue.empty()) {
    const auto i = queue.front();
    queue.pop_front();
    const long r = static_cast<long>(i / w), c = static_cast<long>(i % w);
    for (int k = 0; k < 8; ++k) {
      const long nr = r + kD8Row[k], nc = c + kD8Col[k];
      if (!inside(nr, nc)) continue;
      const auto j = static_cast<std::size_t>(nr) * w + static_cast<std::size_t>(nc);
      if (resolved[j] || dem.values[j] != dem.values[i]) continue;
      dir[j] = static_cast<std::int8_t>((k + 4) % 8);  // points back at i
      resolved[j] = 1;
      queue.push_back(j);
    }
  }
  // Unfilled pits can remain unresolved; they keep kNoFlow and act as sinks.
  return dir;
}

/// Number of cells draining through each cell, itself included.
inline std::vector<std::uint64_t> flow_accumulation(const GridTile& dem) {
  const std::size_t w = dem.width(), h = dem.height();
  const auto dir = flow_directions(dem);
  auto receiver = [&](std::size_t i) -> std::ptrdiff_t {
    if (dir[i] == kNoFlow) return -1;
    return static_cast<std::ptrdiff_t>((i / w + kD8Row[dir[i]]) * w + (i % w + kD8Col[dir[i]]));
  };
  std::vector<std::uint32_t> indegree(w * h, 0);
  for (std::size_t i = 0; i < w * h; ++i)
    if (auto j = receiver(i); j >= 0) ++indegree[static_cast<std::size_t>(j)];
  std::vector<std::uint64_t> acc(w * h, 1);
  std::vector<std::size_t> stack;
  for (std::size_t i = w * h; i-- > 0;)
    if (indegree[i] == 0) stack.push_back(i);
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    if (auto j = receiver(i); j >= 0) {
      const auto ju = static_cast<std::size_t>(j);
      acc[ju] += acc[i];
      if (--indegree[ju] == 0) stack.push_back(ju);
    }
  }
  return acc;
}

/// Smallest whole cell count n with n·cell_area ≥ threshold_m2.
inline std::uint64_t stream_cell_cutoff(double threshold_m2, double cell_size) {
  if (!(cell_size > 0)) throw UsageError("cell_size must be positive");
  if (!(threshold_m2 >= 0) || !std::isfinite(threshold_m2)) throw UsageError("threshold must be a finite value >= 0");
  const double area = cell_size * cell_size;
  auto n = static_cast<std::uint64_t>(std::max(0.0, std::ceil(threshold_m2 / area)));
  while (n > 0 && static_cast<double>(n - 1) * area >= threshold_m2) --n;
  while (static_cast<double>(n) * area < threshold_m2) ++n;
  return n;
}

using StreamMask = std::vector<std::uint8_t>;

inline StreamMask streams_from_accumulation(const std::vector<std::uint64_t>& acc, std::uint64_t cutoff) {
  StreamMask s(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) s[i] = acc[i] >= cutoff;
  return s;
}

/// fill_sinks → flow_accumulation → accumulation·cell_area ≥ threshold.
inline StreamMask extract_streams(const GridTile& dem, double threshold_m2) {
  const auto cutoff = stream_cell_cutoff(threshold_m2, dem.cell_size());
  return streams_from_accumulation(flow_accumulation(fill_sinks(dem)), cutoff);
}

/// Stream mask as a 0/1 raster on the DEM's grid.
inline GridTile stream_raster(const StreamMask& s, const GridGeometry& g) {
  if (s.size() != g.cells()) throw GeometryError("stream mask does not match geometry");
  GridTile out(g, 0.0, true);
  for (std::size_t i = 0; i < s.size(); ++i) out.values[i] = s[i];
  return out;
}

/// One-grid (3×3) dilation.
inline StreamMask dilate(const StreamMask& s, std::size_t w, std::size_t h) {
  StreamMask out(s.size(), 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (!s[r * w + c]) continue;
      for (std::size_t rr = r ? r - 1 : 0; rr <= std::min(h - 1, r + 1); ++rr)
        for (std::size_t cc = c ? c - 1 : 0; cc <= std::min(w - 1, c + 1); ++cc) out[rr * w + cc] = 1;
    }
  return out;
}

enum class FnMode { symmetric, unbuffered };

inline FnMode parse_fn_mode(const std::string& s) {
  if (s == "symmetric") return FnMode::symmetric;
  if (s == "unbuffered") return FnMode::unbuffered;
  throw UsageError("unknown FN mode '" + s + "'");
}
inline const char* to_string(FnMode m) { return m == FnMode::symmetric ? "symmetric" : "unbuffered"; }

struct StreamResult {
  double threshold_m2 = 0;
  std::uint64_t tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0;
  bool precision_defined = true;  // false when no predicted stream cells
  bool recall_defined = true;     // false when no reference stream cells
};

/// TP/FP: predicted stream cells inside/outside the buffered reference
/// network. FN: reference stream cells not covered by the buffered (symmetric)
/// or raw (unbuffered) predicted network.
inline StreamResult stream_pr_masks(const StreamMask& pred_s, const StreamMask& ref_s, std::size_t w, std::size_t h,
                                    double threshold_m2, FnMode mode = FnMode::symmetric) {
  const auto ref_net = dilate(ref_s, w, h);
  const auto pred_cover = mode == FnMode::symmetric ? dilate(pred_s, w, h) : pred_s;
  StreamResult res;
  res.threshold_m2 = threshold_m2;
  for (std::size_t i = 0; i < w * h; ++i) {
    if (pred_s[i]) (ref_net[i] ? res.tp : res.fp)++;
    if (ref_s[i] && !pred_cover[i]) ++res.fn;
  }
  res.precision_defined = res.tp + res.fp > 0;
  res.precision = res.precision_defined ? static_cast<double>(res.tp) / static_cast<double>(res.tp + res.fp) : 0.0;
  std::uint64_t ref_count = 0;
  for (auto v : ref_s) ref_count += v;
  res.recall_defined = ref_count > 0;
  res.recall = res.tp + res.fn > 0 ? static_cast<double>(res.tp) / static_cast<double>(res.tp + res.fn) : 0.0;
  return res;
}

inline StreamResult stream_pr(const GridTile& pred, const GridTile& ref, double threshold_m2,
                              FnMode mode = FnMode::symmetric) {
  detail::require_same_geometry(pred, ref);
  return stream_pr_masks(extract_streams(pred, threshold_m2), extract_streams(ref, threshold_m2), ref.width(),
                         ref.height(), threshold_m2, mode);
}

inline void check_thresholds(const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw UsageError("at least one stream threshold is required");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] >= 0) || !std::isfinite(thresholds[i])) throw UsageError("stream thresholds must be >= 0");
    if (i && !(thresholds[i] > thresholds[i - 1])) throw UsageError("stream thresholds must be strictly increasing");
  }
}

/// stream_pr at each threshold; flow accumulation is computed once per DEM.
inline std::vector<StreamResult> pr_threshold_sweep(const GridTile& pred, const GridTile& ref,
                                                    const std::vector<double>& thresholds,
                                                    FnMode mode = FnMode::symmetric) {
  detail::require_same_geometry(pred, ref);
  check_thresholds(thresholds);
  const auto acc_p = flow_accumulation(fill_sinks(pred));
  const auto acc_r = flow_accumulation(fill_sinks(ref));
  std::vector<StreamResult> out;
  for (double t : thresholds) {
    const auto cutoff = stream_cell_cutoff(t, ref.cell_size());
    out.push_back(stream_pr_masks(streams_from_accumulation(acc_p, cutoff), streams_from_accumulation(acc_r, cutoff),
                                  ref.width(), ref.height(), t, mode));
  }
  return out;
}

// ---------------------------------------------------------------------------
// report

struct EvalReport {
  DiffStats elevation;
  DiffStats slope;  // degrees
  std::vector<StreamResult> streams;
  FnMode fn_mode = FnMode::symmetric;
};

inline EvalReport evaluate(const GridTile& pred, const GridTile& ref, const std::vector<double>& thresholds,
                           FnMode mode = FnMode::symmetric) {
  detail::require_same_geometry(pred, ref);
  EvalReport r;
  r.elevation = diff_stats(pred, ref);
  r.slope = slope_stats(pred, ref, ref.cell_size());
  r.streams = pr_threshold_sweep(pred, ref, thresholds, mode);
  r.fn_mode = mode;
  return r;
}

inline nlohmann::ordered_json to_json(const DiffStats& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"mae", s.mae}, {"rmse", s.rmse}, {"count", s.count}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["elevation_m"] = to_json(r.elevation);
  j["slope_deg"] = to_json(r.slope);
  j["fn_mode"] = to_string(r.fn_mode);
  auto streams = nlohmann::ordered_json::array();
  for (const auto& s : r.streams)
    streams.push_back({{"threshold_m2", s.threshold_m2},
                       {"tp", s.tp},
                       {"fp", s.fp},
                       {"fn", s.fn},
                       {"precision", s.precision},
                       {"recall", s.recall},
                       {"precision_defined", s.precision_defined},
                       {"recall_defined", s.recall_defined}});
  j["streams"] = streams;
  return j;
}

/// Flat CSV: metric,value with 8 statistic rows and 3 rows per threshold.
inline std::string to_csv(const EvalReport& r) {
  std::string out = "metric,value\n";
  auto row = [&](const std::string& k, double v) { out += k + "," + format_double(v) + "\n"; };
  row("elevation_mean_m", r.elevation.mean);
  row("elevation_std_m", r.elevation.std);
  row("elevation_mae_m", r.elevation.mae);
  row("elevation_rmse_m", r.elevation.rmse);
  row("slope_mean_deg", r.slope.mean);
  row("slope_std_deg", r.slope.std);
  row("slope_mae_deg", r.slope.mae);
  row("slope_rmse_deg", r.slope.rmse);
  for (const auto& s : r.streams) {
    const std::string t = format_double(s.threshold_m2);
    row("stream_precision@" + t, s.precision);
    row("stream_recall@" + t, s.recall);
    row("stream_tp@" + t, static_cast<double>(s.tp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// sparsity sweep

/// Fills every invalid cell of a sparse raster; measured cells are inputs.
using Interpolator = std::function<GridTile(const GridTile& sparse)>;

struct NamedInterpolator {
  std::string name;
  Interpolator run;
};

struct SparsityRow {
  double level = 0;
  std::string method;
  DiffStats stats;
};

/// For each level, hides round(level·N) random cells of `ref` (seeded per
/// level), runs every method on the same sparse raster and scores it on all
/// cells against `ref`.
inline std::vector<SparsityRow> sparsity_sweep(const GridTile& ref, const std::vector<double>& levels,
                                               const std::vector<NamedInterpolator>& methods, std::uint64_t seed) {
  detail::require_fully_valid(ref, "sparsity sweep");
  if (levels.empty()) throw UsageError("sparsity sweep needs at least one level");
  if (methods.empty()) throw UsageError("sparsity sweep needs at least one method");
  std::vector<SparsityRow> rows;
  Rng rng(seed);
  for (double level : levels) {
    if (!(level >= 0 && level < 1)) throw UsageError("sparsity levels must be in [0, 1)");
    const auto plan = make_mask(ref.size(), level, rng.next_u64(), MaskStrategy::random, ref.width());
    const GridTile sparse = apply_mask(ref, plan);
    for (const auto& m : methods) {
      const GridTile pred = m.run(sparse);
      detail::require_same_geometry(pred, ref);
      rows.push_back({level, m.name, diff_stats(pred, ref)});
    }
  }
  return rows;
}

}  // namespace terra
