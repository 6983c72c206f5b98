#pragma once

// File-level glue shared by the command-line tool and the test suites.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "terra/baselines.hpp"
#include "terra/config.hpp"
#include "terra/eval.hpp"
#include "terra/inference.hpp"
#include "terra/model.hpp"
#include "terra/raster.hpp"
#include "terra/train.hpp"

namespace terra {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

/// `.asc` files of a directory in lexicographic order.
inline std::vector<std::string> list_grids(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".asc") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<GridTile> load_tiles(const std::string& dir) {
  std::vector<GridTile> tiles;
  for (const auto& p : list_grids(dir)) tiles.push_back(load_ascii_grid(p));
  return tiles;
}

/// Numbered file name with zero padding wide enough for `count` entries.
inline std::string numbered(const std::string& stem, std::size_t i, std::size_t count, const std::string& ext) {
  const std::size_t width = std::max<std::size_t>(4, std::to_string(count ? count - 1 : 0).size());
  std::string n = std::to_string(i);
  return stem + std::string(width - std::min(width, n.size()), '0') + n + ext;
}

/// Diamond-square tiles with seeds base, base+1, ... and relief drawn from
/// [relief/4, relief] by a generator seeded with `seed`.
inline std::vector<GridTile> synth_dataset(std::uint64_t seed, std::size_t count, std::size_t size, double roughness,
                                           double relief, double cell_size = 30.0) {
  Rng rng(seed);
  std::vector<GridTile> tiles;
  tiles.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = relief * rng.uniform(0.25, 1.0);
    tiles.push_back(synth_terrain(rng.next_u64(), size, roughness, r, cell_size));
  }
  return tiles;
}

inline std::string training_log_csv(const std::vector<EpochRecord>& history, bool wall_seconds) {
  std::string out = "epoch,train_loss,val_loss,val_rmse_m,wall_seconds\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "," +
           format_double(r.val_rmse_m) + "," + format_double(wall_seconds ? r.wall_seconds : 0.0) + "\n";
  return out;
}

/// Stored scalar type of a model or checkpoint file.
inline std::string stored_precision(const Container& c) {
  if (const auto* p = c.find_meta("precision")) return *p;
  for (const auto& b : c.blocks)
    if (b.name.rfind("param/", 0) == 0) return b.dtype == 1 ? "float" : "double";
  throw FormatError("file holds no model parameters");
}

// ---------------------------------------------------------------------------
// tables

inline std::string diff_stats_header() { return "mean,std,mae,rmse"; }

inline std::string diff_stats_csv(const DiffStats& s) {
  return format_double(s.mean) + "," + format_double(s.std) + "," + format_double(s.mae) + "," + format_double(s.rmse);
}

inline std::string mask_ratio_table_csv(const std::vector<SweepRow>& rows) {
  std::string out = "mask_ratio," + diff_stats_header() + "\n";
  for (const auto& r : rows) out += format_double(r.mask_ratio) + "," + diff_stats_csv(r.stats) + "\n";
  return out;
}

inline std::string sparsity_table_csv(const std::vector<SparsityRow>& rows) {
  std::string out = "sparsity,method," + diff_stats_header() + "\n";
  for (const auto& r : rows) out += format_double(r.level) + "," + r.method + "," + diff_stats_csv(r.stats) + "\n";
  return out;
}

/// max/min RMSE over levels, per method, in first-seen method order.
inline std::vector<std::pair<std::string, double>> rmse_spread(const std::vector<SparsityRow>& rows) {
  std::vector<std::pair<std::string, std::pair<double, double>>> acc;
  for (const auto& r : rows) {
    auto it = std::find_if(acc.begin(), acc.end(), [&](const auto& a) { return a.first == r.method; });
    if (it == acc.end()) acc.push_back({r.method, {r.stats.rmse, r.stats.rmse}});
    else it->second = {std::min(it->second.first, r.stats.rmse), std::max(it->second.second, r.stats.rmse)};
  }
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [m, mm] : acc) out.emplace_back(m, mm.first > 0 ? mm.second / mm.first : INFINITY);
  return out;
}

// ---------------------------------------------------------------------------
// interpolators by name

inline Interpolator baseline_interpolator(const std::string& method, const RunConfig& cfg) {
  if (method == "idw")
    return [&cfg](const GridTile& s) { return idw_fill(s, cfg.interp_k, cfg.idw_power); };
  if (method == "nn")
    return [&cfg](const GridTile& s) {
      GridTile out = nn_interpolate({valid_cell_points(s), s.geometry, cfg.interp_k, cfg.idw_power}, cfg.nn_supersample);
      out.nodata = s.nodata;
      return out;
    };
  if (method == "ok")
    return [&cfg](const GridTile& s) {
      const auto pts = valid_cell_points(s);
      const auto vm = fit_variogram_to(pts, cfg.variogram, cfg.variogram_bins);
      GridTile out = ok_interpolate({pts, s.geometry, cfg.interp_k, cfg.idw_power}, vm);
      out.nodata = s.nodata;
      return out;
    };
  throw UsageError("unknown interpolation method '" + method + "' (expected ok, nn or idw)");
}

template <class T>
Interpolator model_interpolator(const ModelParams<T>& params, const InferOptions& opt) {
  return [&params, opt](const GridTile& s) { return infer_raster(s, params, opt); };
}

}  // namespace terra
