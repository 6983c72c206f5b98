#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "terra/error.hpp"
#include "terra/random.hpp"

namespace terra {

inline constexpr double kDefaultNodata = -9999.0;

/// Placement of a regular grid. Origin is the lower-left corner in meters;
/// row 0 is the northernmost row.
struct GridGeometry {
  std::size_t width = 0;
  std::size_t height = 0;
  double cell_size = 1.0;
  double origin_x = 0.0;
  double origin_y = 0.0;

  std::size_t cells() const { return width * height; }
  double center_x(std::size_t col) const { return origin_x + (static_cast<double>(col) + 0.5) * cell_size; }
  double center_y(std::size_t row) const {
    return origin_y + (static_cast<double>(height - row) - 0.5) * cell_size;
  }
  bool operator==(const GridGeometry&) const = default;
};

/// Elevation raster with a per-cell validity mask. Invalid cells hold `nodata`.
struct GridTile {
  GridGeometry geometry;
  double nodata = kDefaultNodata;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;

  GridTile() = default;
  explicit GridTile(const GridGeometry& g, double fill = kDefaultNodata, bool is_valid = false)
      : geometry(g), values(g.cells(), is_valid ? fill : kDefaultNodata), valid(g.cells(), is_valid ? 1 : 0) {
    if (!(g.cell_size > 0.0)) throw GeometryError("cell_size must be positive");
  }

  std::size_t width() const { return geometry.width; }
  std::size_t height() const { return geometry.height; }
  double cell_size() const { return geometry.cell_size; }
  std::size_t size() const { return values.size(); }
  std::size_t index(std::size_t row, std::size_t col) const { return row * geometry.width + col; }
  double& at(std::size_t row, std::size_t col) { return values[index(row, col)]; }
  double at(std::size_t row, std::size_t col) const { return values[index(row, col)]; }
  bool is_valid(std::size_t i) const { return valid[i] != 0; }

  void set(std::size_t i, double v) {
    values[i] = v;
    valid[i] = 1;
  }
  void invalidate(std::size_t i) {
    values[i] = nodata;
    valid[i] = 0;
  }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
  }
  bool fully_valid() const { return valid_count() == size(); }
};

struct Point3 {
  double x = 0, y = 0, z = 0;
};
using SparsePoints = std::vector<Point3>;

/// Affine map between meters and normalized units: normalized = (v - shift) / scale.
struct NormStats {
  double shift = 0.0;
  double scale = 1.0;
};

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Shortest decimal that round-trips to the same double, with a trailing
/// ".0" on integral values.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, ptr);
  if (std::isfinite(v) && s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

// ---------------------------------------------------------------------------
// ESRI ASCII grid

inline GridTile load_ascii_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);

  std::optional<double> ncols, nrows, xll, yll, cellsize;
  bool x_center = false, y_center = false;
  double nodata = kDefaultNodata;
  std::string line;
  long lineno = 0;
  std::streampos body_start = in.tellg();
  long body_line = 0;

  while (true) {
    body_start = in.tellg();
    if (!std::getline(in, line)) break;
    ++lineno;
    auto tokens = detail::split_ws(line);
    if (tokens.empty()) continue;
    const std::string key = detail::lower(tokens[0]);
    if (!std::isalpha(static_cast<unsigned char>(key[0]))) {
      body_line = lineno - 1;
      break;
    }
    if (tokens.size() != 2) throw ParseError(path, lineno, "malformed header line");
    const auto value = detail::parse_double(tokens[1]);
    if (!value) throw ParseError(path, lineno, "non-numeric header value '" + std::string(tokens[1]) + "'");
    if (key == "ncols") {
      ncols = value;
    } else if (key == "nrows") {
      nrows = value;
    } else if (key == "xllcorner" || key == "xllcenter") {
      xll = value;
      x_center = key == "xllcenter";
    } else if (key == "yllcorner" || key == "yllcenter") {
      yll = value;
      y_center = key == "yllcenter";
    } else if (key == "cellsize") {
      cellsize = value;
    } else if (key == "nodata_value") {
      nodata = *value;
    } else {
      throw ParseError(path, lineno, "unknown header key '" + std::string(tokens[0]) + "'");
    }
    body_line = lineno;
  }
  if (!ncols || !nrows || !xll || !yll || !cellsize)
    throw ParseError(path, lineno, "incomplete header (need ncols, nrows, xllcorner, yllcorner, cellsize)");
  if (*ncols < 1 || *nrows < 1 || *ncols != std::floor(*ncols) || *nrows != std::floor(*nrows))
    throw ParseError(path, 1, "ncols/nrows must be positive integers");
  if (!(*cellsize > 0)) throw ParseError(path, 1, "cellsize must be positive");

  GridGeometry g;
  g.width = static_cast<std::size_t>(*ncols);
  g.height = static_cast<std::size_t>(*nrows);
  g.cell_size = *cellsize;
  g.origin_x = x_center ? *xll - 0.5 * *cellsize : *xll;
  g.origin_y = y_center ? *yll - 0.5 * *cellsize : *yll;
  GridTile tile(g);
  tile.nodata = nodata;

  in.clear();
  in.seekg(body_start);
  lineno = body_line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto tokens = detail::split_ws(line);
    if (tokens.empty()) continue;
    if (row >= g.height) throw ParseError(path, lineno, "more data rows than nrows");
    if (tokens.size() != g.width)
      throw ParseError(path, lineno,
                       "row has " + std::to_string(tokens.size()) + " values, expected " + std::to_string(g.width));
    for (std::size_t c = 0; c < g.width; ++c) {
      const auto v = detail::parse_double(tokens[c]);
      if (!v) throw ParseError(path, lineno, "non-numeric value '" + std::string(tokens[c]) + "'");
      const std::size_t i = tile.index(row, c);
      if (*v == nodata) {
        tile.invalidate(i);
      } else {
        tile.set(i, *v);
      }
    }
    ++row;
  }
  if (row != g.height)
    throw ParseError(path, lineno, "found " + std::to_string(row) + " data rows, expected " + std::to_string(g.height));
  return tile;
}

inline void save_ascii_grid(const GridTile& tile, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  const auto& g = tile.geometry;
  out << "ncols " << g.width << "\n"
      << "nrows " << g.height << "\n"
      << "xllcorner " << format_double(g.origin_x) << "\n"
      << "yllcorner " << format_double(g.origin_y) << "\n"
      << "cellsize " << format_double(g.cell_size) << "\n"
      << "NODATA_value " << format_double(tile.nodata) << "\n";
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      const std::size_t i = tile.index(r, c);
      if (c) out << ' ';
      out << format_double(tile.is_valid(i) ? tile.values[i] : tile.nodata);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Points

inline SparsePoints load_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 0, "missing header");

  auto split = [](std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
      if (i == s.size() || s[i] == ',') {
        out.push_back(detail::trim(s.substr(start, i - start)));
        start = i + 1;
      }
    }
    return out;
  };

  int cx = -1, cy = -1, cz = -1;
  const auto header = split(line);
  for (std::size_t i = 0; i < header.size(); ++i) {
    const auto name = detail::lower(header[i]);
    if (name == "x") cx = static_cast<int>(i);
    if (name == "y") cy = static_cast<int>(i);
    if (name == "z") cz = static_cast<int>(i);
  }
  if (cx < 0 || cy < 0 || cz < 0) throw ParseError(path, 0, "header must name columns x, y and z");

  SparsePoints points;
  long row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto fields = split(line);
    const auto need = static_cast<std::size_t>(std::max({cx, cy, cz}));
    if (fields.size() <= need) throw ParseError(path, row, "row " + std::to_string(row) + ": missing column");
    const auto x = detail::parse_double(fields[cx]);
    const auto y = detail::parse_double(fields[cy]);
    const auto z = detail::parse_double(fields[cz]);
    if (!x || !y || !z || !std::isfinite(*x) || !std::isfinite(*y) || !std::isfinite(*z))
      throw ParseError(path, row, "row " + std::to_string(row) + ": unparsable number");
    points.push_back({*x, *y, *z});
  }
  return points;
}

inline void save_points_csv(const SparsePoints& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "x,y,z\n";
  for (const auto& p : points) out << format_double(p.x) << ',' << format_double(p.y) << ',' << format_double(p.z) << '\n';
}

/// Cell centers of the valid cells, in row-major order.
inline SparsePoints valid_cell_points(const GridTile& tile) {
  SparsePoints pts;
  for (std::size_t r = 0; r < tile.height(); ++r)
    for (std::size_t c = 0; c < tile.width(); ++c)
      if (tile.is_valid(tile.index(r, c)))
        pts.push_back({tile.geometry.center_x(c), tile.geometry.center_y(r), tile.at(r, c)});
  return pts;
}

struct RasterizeResult {
  GridTile tile;
  std::size_t dropped = 0;
};

/// Bins points into the cells of `geometry`, averaging points that share a cell.
inline RasterizeResult rasterize_points(const SparsePoints& points, const GridGeometry& geometry) {
  RasterizeResult result{GridTile(geometry), 0};
  std::vector<double> sum(geometry.cells(), 0.0);
  std::vector<std::size_t> count(geometry.cells(), 0);
  const double w = static_cast<double>(geometry.width) * geometry.cell_size;
  const double h = static_cast<double>(geometry.height) * geometry.cell_size;
  for (const auto& p : points) {
    const double dx = p.x - geometry.origin_x;
    const double dy = p.y - geometry.origin_y;
    if (!(dx >= 0 && dx < w && dy >= 0 && dy < h)) {
      ++result.dropped;
      continue;
    }
    auto col = static_cast<std::size_t>(std::floor(dx / geometry.cell_size));
    auto up = static_cast<std::size_t>(std::floor(dy / geometry.cell_size));
    col = std::min(col, geometry.width - 1);
    up = std::min(up, geometry.height - 1);
    const std::size_t i = (geometry.height - 1 - up) * geometry.width + col;
    sum[i] += p.z;
    ++count[i];
  }
  if (result.dropped == points.size()) throw EmptyInputError("no points fall inside the target grid");
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (count[i]) result.tile.set(i, sum[i] / static_cast<double>(count[i]));
  return result;
}

// ---------------------------------------------------------------------------
// Statistics and tiling

/// Fraction of cells without a measurement.
inline double sparsity(const GridTile& tile) {
  if (tile.size() == 0) throw GeometryError("sparsity of an empty tile");
  return static_cast<double>(tile.size() - tile.valid_count()) / static_cast<double>(tile.size());
}

inline GridTile crop(const GridTile& dem, std::size_t row0, std::size_t col0, std::size_t rows, std::size_t cols) {
  if (row0 + rows > dem.height() || col0 + cols > dem.width()) throw GeometryError("crop window outside raster");
  GridGeometry g = dem.geometry;
  g.width = cols;
  g.height = rows;
  g.origin_x = dem.geometry.origin_x + static_cast<double>(col0) * g.cell_size;
  g.origin_y = dem.geometry.origin_y + static_cast<double>(dem.height() - row0 - rows) * g.cell_size;
  GridTile out(g);
  out.nodata = dem.nodata;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t src = dem.index(row0 + r, col0 + c);
      const std::size_t dst = out.index(r, c);
      if (dem.is_valid(src)) out.set(dst, dem.values[src]);
      else out.invalidate(dst);
    }
  return out;
}

inline std::size_t tile_stride(std::size_t tile_size, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw UsageError("overlap must be in [0, 1)");
  const auto stride = static_cast<long>(std::lround(static_cast<double>(tile_size) * (1.0 - overlap)));
  return static_cast<std::size_t>(std::max(1L, stride));
}

/// Window offsets along one axis; with `cover_edge` a final window flush with
/// the far edge is added so every cell is covered.
inline std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t tile_size, std::size_t stride,
                                             bool cover_edge) {
  std::vector<std::size_t> offs;
  for (std::size_t o = 0; o + tile_size <= extent; o += stride) offs.push_back(o);
  if (cover_edge && !offs.empty() && offs.back() + tile_size < extent) offs.push_back(extent - tile_size);
  return offs;
}

/// Row-major square tiles; partial tiles at the right/bottom edges are dropped.
inline std::vector<GridTile> tile(const GridTile& dem, std::size_t tile_size, double overlap) {
  if (tile_size == 0 || tile_size > std::min(dem.width(), dem.height()))
    throw GeometryError("tile size " + std::to_string(tile_size) + " exceeds raster extent");
  const std::size_t stride = tile_stride(tile_size, overlap);
  std::vector<GridTile> tiles;
  for (auto r : tile_offsets(dem.height(), tile_size, stride, false))
    for (auto c : tile_offsets(dem.width(), tile_size, stride, false)) tiles.push_back(crop(dem, r, c, tile_size, tile_size));
  return tiles;
}

enum class Blend { average, hann };

/// Hann weight of position i in a window of n, never zero at the ends.
inline double hann_weight(std::size_t i, std::size_t n) {
  const double s = std::sin(std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  return s * s;
}

inline GridTile mosaic(const std::vector<GridTile>& tiles, Blend blend) {
  if (tiles.empty()) throw EmptyInputError("mosaic of zero tiles");
  const double cs = tiles.front().cell_size();
  double min_x = tiles.front().geometry.origin_x, min_y = tiles.front().geometry.origin_y;
  double max_x = min_x, max_y = min_y;
  for (const auto& t : tiles) {
    if (std::abs(t.cell_size() - cs) > 1e-9 * cs) throw GeometryError("mosaic tiles have mixed cell sizes");
    min_x = std::min(min_x, t.geometry.origin_x);
    min_y = std::min(min_y, t.geometry.origin_y);
    max_x = std::max(max_x, t.geometry.origin_x + static_cast<double>(t.width()) * cs);
    max_y = std::max(max_y, t.geometry.origin_y + static_cast<double>(t.height()) * cs);
  }
  auto lattice = [&](double offset) {
    const double k = offset / cs;
    const double rk = std::round(k);
    if (std::abs(k - rk) > 1e-6) throw GeometryError("mosaic tiles are not aligned to a common lattice");
    return static_cast<std::size_t>(rk);
  };
  GridGeometry g;
  g.cell_size = cs;
  g.origin_x = min_x;
  g.origin_y = min_y;
  g.width = lattice(max_x - min_x);
  g.height = lattice(max_y - min_y);
  GridTile out(g);
  out.nodata = tiles.front().nodata;
  std::vector<double> acc(g.cells(), 0.0), weight(g.cells(), 0.0), first(g.cells(), 0.0);
  std::vector<std::uint32_t> count(g.cells(), 0);
  for (const auto& t : tiles) {
    const std::size_t c0 = lattice(t.geometry.origin_x - min_x);
    const std::size_t r0 = g.height - lattice(t.geometry.origin_y - min_y) - t.height();
    for (std::size_t r = 0; r < t.height(); ++r)
      for (std::size_t c = 0; c < t.width(); ++c) {
        const std::size_t i = t.index(r, c);
        if (!t.is_valid(i)) continue;
        const double w = blend == Blend::average ? 1.0 : hann_weight(r, t.height()) * hann_weight(c, t.width());
        const std::size_t o = out.index(r0 + r, c0 + c);
        acc[o] += w * t.values[i];
        weight[o] += w;
        if (count[o]++ == 0) first[o] = t.values[i];
      }
  }
  // Cells seen by a single tile are copied, so non-overlapping mosaics are exact.
  for (std::size_t i = 0; i < acc.size(); ++i)
    if (count[i] == 1) out.set(i, first[i]);
    else if (count[i] > 1) out.set(i, acc[i] / weight[i]);
  return out;
}

inline GridTile downsample_mean(const GridTile& dem, std::size_t factor) {
  if (factor < 1) throw UsageError("downsample factor must be >= 1");
  GridGeometry g = dem.geometry;
  g.width = dem.width() / factor;
  g.height = dem.height() / factor;
  g.cell_size = dem.cell_size() * static_cast<double>(factor);
  // Trailing rows are dropped from the bottom, so the origin moves up.
  g.origin_y = dem.geometry.origin_y + static_cast<double>(dem.height() - g.height * factor) * dem.cell_size();
  if (g.width == 0 || g.height == 0) throw GeometryError("downsample factor larger than raster");
  GridTile out(g);
  out.nodata = dem.nodata;
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c) {
      double sum = 0;
      std::size_t n = 0;
      for (std::size_t dr = 0; dr < factor; ++dr)
        for (std::size_t dc = 0; dc < factor; ++dc) {
          const std::size_t i = dem.index(r * factor + dr, c * factor + dc);
          if (dem.is_valid(i)) {
            sum += dem.values[i];
            ++n;
          }
        }
      if (n) out.set(out.index(r, c), sum / static_cast<double>(n));
    }
  return out;
}

/// Diamond-square fractal surface on the next 2^k+1 lattice, cropped to
/// size×size and rescaled to [0, relief]. Displacement amplitude is multiplied
/// by `roughness` at every level.
inline GridTile synth_terrain(std::uint64_t seed, std::size_t size, double roughness, double relief,
                              double cell_size = 30.0) {
  if (size < 2) throw UsageError("terrain size must be >= 2");
  if (!(roughness > 0.0 && roughness <= 1.0)) throw UsageError("roughness must be in (0, 1]");
  std::size_t n = 1;
  while (n + 1 < size) n *= 2;
  const std::size_t side = n + 1;
  std::vector<double> h(side * side, 0.0);
  auto at = [&](std::size_t r, std::size_t c) -> double& { return h[r * side + c]; };
  Rng rng(seed);
  at(0, 0) = rng.uniform(-1, 1);
  at(0, n) = rng.uniform(-1, 1);
  at(n, 0) = rng.uniform(-1, 1);
  at(n, n) = rng.uniform(-1, 1);
  double amp = 1.0;
  for (std::size_t step = n; step > 1; step /= 2) {
    const std::size_t half = step / 2;
    for (std::size_t r = half; r < side; r += step)
      for (std::size_t c = half; c < side; c += step)
        at(r, c) = 0.25 * (at(r - half, c - half) + at(r - half, c + half) + at(r + half, c - half) +
                           at(r + half, c + half)) +
                   amp * rng.uniform(-1, 1);
    for (std::size_t r = 0; r < side; r += half)
      for (std::size_t c = (r / half) % 2 == 0 ? half : 0; c < side; c += step) {
        double sum = 0;
        int cnt = 0;
        if (r >= half) sum += at(r - half, c), ++cnt;
        if (r + half < side) sum += at(r + half, c), ++cnt;
        if (c >= half) sum += at(r, c - half), ++cnt;
        if (c + half < side) sum += at(r, c + half), ++cnt;
        at(r, c) = sum / cnt + amp * rng.uniform(-1, 1);
      }
    amp *= roughness;
  }
  GridGeometry g{size, size, cell_size, 0.0, 0.0};
  GridTile out(g);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      lo = std::min(lo, at(r, c));
      hi = std::max(hi, at(r, c));
    }
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) out.set(out.index(r, c), (at(r, c) - lo) / span * relief);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Mean and population standard deviation of the valid cells.
inline NormStats norm_stats(const GridTile& tile) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < tile.size(); ++i)
    if (tile.is_valid(i)) sum += tile.values[i], ++n;
  if (n == 0) throw EmptyInputError("normalize: tile has no valid cells");
  const double mean = sum / static_cast<double>(n);
  double ss = 0;
  for (std::size_t i = 0; i < tile.size(); ++i)
    if (tile.is_valid(i)) ss += (tile.values[i] - mean) * (tile.values[i] - mean);
  const double std = std::sqrt(ss / static_cast<double>(n));
  return {mean, std < 1e-9 ? 1.0 : std};
}

inline GridTile apply_norm(const GridTile& tile, const NormStats& s) {
  GridTile out = tile;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out.is_valid(i)) out.values[i] = (out.values[i] - s.shift) / s.scale;
  return out;
}

inline std::pair<GridTile, NormStats> normalize(const GridTile& tile) {
  const NormStats s = norm_stats(tile);
  return {apply_norm(tile, s), s};
}

inline GridTile denormalize(const GridTile& tile, const NormStats& s) {
  GridTile out = tile;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out.is_valid(i)) out.values[i] = out.values[i] * s.scale + s.shift;
  return out;
}

}  // namespace terra
