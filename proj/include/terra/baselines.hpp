#pragma once

// Classical interpolators: ordinary kriging, discrete Sibson natural
// neighbour, and inverse distance weighting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "terra/error.hpp"
#include "terra/parallel.hpp"
#include "terra/random.hpp"
#include "terra/raster.hpp"
#include "terra/spatial.hpp"

namespace terra {

enum class VariogramKind { exponential, spherical, gaussian };

inline VariogramKind parse_variogram_kind(const std::string& s) {
  if (s == "exponential") return VariogramKind::exponential;
  if (s == "spherical") return VariogramKind::spherical;
  if (s == "gaussian") return VariogramKind::gaussian;
  throw UsageError("unknown variogram kind '" + s + "'");
}

inline const char* to_string(VariogramKind k) {
  switch (k) {
    case VariogramKind::exponential: return "exponential";
    case VariogramKind::spherical: return "spherical";
    case VariogramKind::gaussian: return "gaussian";
  }
  return "?";
}

struct VariogramBin {
  double lag = 0;    // mean pair distance in the bin
  double gamma = 0;  // semivariance
  std::size_t pairs = 0;
};

/// Unit-sill correlation shape: 0 at h = 0, rising to 1.
inline double variogram_shape(VariogramKind kind, double h, double range) {
  const double r = h / range;
  switch (kind) {
    case VariogramKind::exponential: return 1.0 - std::exp(-r);
    case VariogramKind::gaussian: return 1.0 - std::exp(-r * r);
    case VariogramKind::spherical: return r >= 1.0 ? 1.0 : 1.5 * r - 0.5 * r * r * r;
  }
  return 0.0;
}

struct VariogramModel {
  VariogramKind kind = VariogramKind::exponential;
  double nugget = 0;
  double sill = 1;
  double range = 1;
  bool degenerate = false;
  std::vector<VariogramBin> bins;

  /// γ(h) for h > 0 and the nugget at h = 0.
  double at(double h) const { return nugget + (sill - nugget) * variogram_shape(kind, h, range); }

  /// Entry of the kriging matrix: zero at zero separation, so the nugget acts
  /// as a discontinuity and kriging stays exact at the samples.
  double kriging_gamma(double h) const { return h > 0 ? at(h) : 0.0; }
};

// ---------------------------------------------------------------------------
// semivariogram

/// Deterministic subset of at most `limit` samples (all of them when fewer).
inline SparsePoints subsample_points(const SparsePoints& pts, std::size_t limit, std::uint64_t seed) {
  if (pts.size() <= limit) return pts;
  std::vector<std::size_t> idx(pts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  SparsePoints out;
  out.reserve(limit);
  for (auto i : idx) out.push_back(pts[i]);
  return out;
}

/// Half the bounding-box diagonal of the samples.
inline double default_max_lag(const SparsePoints& pts) {
  if (pts.empty()) throw EmptyInputError("no samples");
  double x0 = pts[0].x, x1 = x0, y0 = pts[0].y, y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x), x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y), y1 = std::max(y1, p.y);
  }
  return 0.5 * std::hypot(x1 - x0, y1 - y0);
}

/// Pairs with 0 < d ≤ max_lag binned into n_bins equal-width lag classes.
/// Empty bins are omitted.
inline std::vector<VariogramBin> empirical_semivariogram(const SparsePoints& pts, std::size_t n_bins, double max_lag) {
  if (pts.size() < 2) throw EmptyInputError("semivariogram needs at least 2 samples");
  if (n_bins == 0) throw UsageError("semivariogram needs at least one bin");
  if (!(max_lag > 0)) throw UsageError("max_lag must be positive");
  const double width = max_lag / static_cast<double>(n_bins);
  std::vector<double> lag(n_bins, 0.0), sq(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double d = std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y);
      if (!(d > 0) || d > max_lag) continue;
      const auto b = std::min(n_bins - 1, static_cast<std::size_t>(d / width));
      const double dz = pts[i].z - pts[j].z;
      lag[b] += d;
      sq[b] += dz * dz;
      ++count[b];
    }
  std::vector<VariogramBin> bins;
  for (std::size_t b = 0; b < n_bins; ++b)
    if (count[b] > 0) {
      const double n = static_cast<double>(count[b]);
      bins.push_back({lag[b] / n, sq[b] / (2.0 * n), count[b]});
    }
  return bins;
}

namespace detail {

struct SillFit {
  double nugget = 0, partial = 0, sse = 0;
};

// For a fixed range the model is linear in (nugget, partial sill); solve the
// weighted 2x2 normal equations and project onto nugget ≥ 0, partial > 0.
inline SillFit fit_linear_part(const std::vector<VariogramBin>& bins, VariogramKind kind, double range) {
  double sw = 0, sf = 0, sff = 0, sg = 0, sfg = 0;
  for (const auto& b : bins) {
    const double w = static_cast<double>(b.pairs), f = variogram_shape(kind, b.lag, range);
    sw += w, sf += w * f, sff += w * f * f, sg += w * b.gamma, sfg += w * f * b.gamma;
  }
  SillFit fit;
  const double det = sw * sff - sf * sf;
  if (std::abs(det) > 1e-12 * sw * sff) {
    fit.nugget = (sff * sg - sf * sfg) / det;
    fit.partial = (sw * sfg - sf * sg) / det;
  } else {
    fit.nugget = -1;
  }
  if (fit.nugget < 0) {
    fit.nugget = 0;
    fit.partial = sff > 0 ? sfg / sff : 0;
  }
  const double tiny = 1e-12 * std::max(1.0, sg / std::max(sw, 1.0));
  if (fit.partial <= tiny) {
    fit.partial = tiny;
    fit.nugget = std::max(0.0, (sg - fit.partial * sf) / sw);
  }
  for (const auto& b : bins) {
    const double r = fit.nugget + fit.partial * variogram_shape(kind, b.lag, range) - b.gamma;
    fit.sse += static_cast<double>(b.pairs) * r * r;
  }
  return fit;
}

}  // namespace detail

/// Weighted least squares (weights = pair counts) over nugget, sill and range.
/// Nugget and partial sill are solved in closed form for each range; the
/// range is found by a fixed multi-start grid refined with golden-section
/// search in log space.
inline VariogramModel fit_variogram(const std::vector<VariogramBin>& bins, VariogramKind kind) {
  if (bins.size() < 3) throw EmptyInputError("variogram fit needs at least 3 nonempty bins");
  VariogramModel m;
  m.kind = kind;
  m.bins = bins;
  double max_lag = 0, max_gamma = 0;
  for (const auto& b : bins) {
    if (b.pairs == 0) throw UsageError("variogram bin with zero pairs");
    max_lag = std::max(max_lag, b.lag);
    max_gamma = std::max(max_gamma, b.gamma);
  }
  if (!(max_gamma > 0)) {
    m.nugget = 0;
    m.sill = std::numeric_limits<double>::min();
    m.range = max_lag > 0 ? max_lag : 1.0;
    m.degenerate = true;
    return m;
  }
  auto sse = [&](double log_r) { return detail::fit_linear_part(bins, kind, std::exp(log_r)).sse; };

  const double lo = std::log(max_lag * 1e-3), hi = std::log(max_lag * 1e2);
  constexpr int kStarts = 41;
  std::vector<double> grid(kStarts), vals(kStarts);
  int best = 0;
  for (int i = 0; i < kStarts; ++i) {
    grid[i] = lo + (hi - lo) * i / (kStarts - 1);
    vals[i] = sse(grid[i]);
    if (vals[i] < vals[best]) best = i;
  }
  double a = grid[std::max(0, best - 1)], b = grid[std::min(kStarts - 1, best + 1)];
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = sse(c), fd = sse(d);
  for (int it = 0; it < 200 && b - a > 1e-12; ++it) {
    if (fc < fd) {
      b = d, d = c, fd = fc;
      c = b - phi * (b - a), fc = sse(c);
    } else {
      a = c, c = d, fc = fd;
      d = a + phi * (b - a), fd = sse(d);
    }
  }
  double log_r = 0.5 * (a + b);
  if (vals[best] < sse(log_r)) log_r = grid[best];
  m.range = std::exp(log_r);
  const auto fit = detail::fit_linear_part(bins, kind, m.range);
  m.nugget = fit.nugget;
  m.sill = fit.nugget + fit.partial;
  return m;
}

/// Empirical bins (12 lag classes up to half the sample extent) and a fit.
/// Large sample sets are subsampled deterministically to bound the pair count.
inline VariogramModel fit_variogram_to(const SparsePoints& pts, VariogramKind kind = VariogramKind::exponential,
                                       std::size_t n_bins = 12, std::size_t max_samples = 2000,
                                       std::uint64_t seed = 0) {
  const auto sub = subsample_points(pts, max_samples, seed);
  return fit_variogram(empirical_semivariogram(sub, n_bins, default_max_lag(sub)), kind);
}

// ---------------------------------------------------------------------------
// shared request type

struct InterpRequest {
  SparsePoints samples;
  GridGeometry target;
  std::size_t k = 32;
  double power = 2.0;
};

namespace detail {

inline PointIndex index_samples(const SparsePoints& pts) {
  std::vector<double> xs(pts.size()), ys(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) xs[i] = pts[i].x, ys[i] = pts[i].y;
  return PointIndex(xs, ys);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ordinary kriging

/// Solves A·x = b in place by Gaussian elimination with partial pivoting.
/// Returns false when a pivot is below `tol` times the largest entry of A.
inline bool solve_dense(std::vector<double>& a, std::vector<double>& b, std::size_t n, double tol = 1e-14) {
  double scale = 0;
  for (double v : a) scale = std::max(scale, std::abs(v));
  if (!(scale > 0)) return false;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[p * n + c])) p = r;
    if (!(std::abs(a[p * n + c]) > tol * scale)) return false;
    if (p != c) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[c * n + j], a[p * n + j]);
      std::swap(b[c], b[p]);
    }
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / a[c * n + c];
      if (f == 0) continue;
      for (std::size_t j = c; j < n; ++j) a[r * n + j] -= f * a[c * n + j];
      b[r] -= f * b[c];
    }
  }
  for (std::size_t c = n; c-- > 0;) {
    double s = b[c];
    for (std::size_t j = c + 1; j < n; ++j) s -= a[c * n + j] * b[j];
    b[c] = s / a[c * n + c];
  }
  return true;
}

struct KrigingWeights {
  std::vector<double> lambda;  // one per sample, sums to 1
  double mu = 0;               // Lagrange multiplier
  bool regularized = false;
};

/// Ordinary-kriging weights of `pts` for a target at (x, y). An empty result
/// means the system stayed singular after regularization.
inline std::optional<KrigingWeights> kriging_weights(const SparsePoints& pts, double x, double y,
                                                     const VariogramModel& vm) {
  const std::size_t k = pts.size(), n = k + 1;
  std::vector<double> a(n * n, 0.0), b(n, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j)
      a[i * n + j] = vm.kriging_gamma(std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y));
    a[i * n + k] = 1.0;
    a[k * n + i] = 1.0;
    b[i] = vm.kriging_gamma(std::hypot(pts[i].x - x, pts[i].y - y));
  }
  b[k] = 1.0;
  KrigingWeights w;
  auto a2 = a;
  auto b2 = b;
  if (!solve_dense(a2, b2, n)) {
    for (std::size_t i = 0; i < k; ++i) a[i * n + i] += 1e-10;
    if (!solve_dense(a, b, n)) return std::nullopt;
    b2 = std::move(b);
    w.regularized = true;
  }
  w.lambda.assign(b2.begin(), b2.begin() + static_cast<std::ptrdiff_t>(k));
  w.mu = b2[k];
  return w;
}

struct KrigingReport {
  std::size_t singular_cells = 0;
  std::size_t regularized_cells = 0;
};

/// Local ordinary kriging over the k nearest samples of each cell centre.
/// Cells whose system stays singular are left invalid and counted.
inline GridTile ok_interpolate(const InterpRequest& req, const VariogramModel& vm, KrigingReport* report = nullptr) {
  if (req.samples.size() < 2) throw EmptyInputError("ordinary kriging needs at least 2 samples");
  if (req.k < 1) throw UsageError("k must be >= 1");
  const auto& g = req.target;
  GridTile out(g);
  const PointIndex index = detail::index_samples(req.samples);
  const std::size_t k = std::min(req.k, req.samples.size());
  std::atomic<std::size_t> singular{0}, regularized{0};
  parallel_for(g.height, [&](std::size_t row) {
    std::vector<Neighbor> nb;
    SparsePoints local;
    for (std::size_t col = 0; col < g.width; ++col) {
      const double x = g.center_x(col), y = g.center_y(row);
      index.knn(x, y, k, nb);
      local.clear();
      for (const auto& n : nb) local.push_back(req.samples[n.index]);
      const auto w = kriging_weights(local, x, y, vm);
      if (!w) {
        ++singular;
        continue;
      }
      if (w->regularized) ++regularized;
      double z = 0;
      for (std::size_t i = 0; i < local.size(); ++i) z += w->lambda[i] * local[i].z;
      out.set(out.index(row, col), z);
    }
  });
  if (report) *report = {singular.load(), regularized.load()};
  return out;
}

// ---------------------------------------------------------------------------
// natural neighbour (discrete Sibson)

/// Rasterizes the Voronoi diagram of the samples at `supersample`× the target
/// resolution. Each target cell centre is inserted as a virtual site; its
/// Sibson weights are the shares of sub-cells it would take from each sample's
/// Voronoi cell (sub-cells equidistant to both count half). A cell that takes
/// nothing gets the nearest sample's value.
inline GridTile nn_interpolate(const InterpRequest& req, std::size_t supersample = 4) {
  if (req.samples.empty()) throw EmptyInputError("natural neighbour needs at least 1 sample");
  if (supersample < 1) throw UsageError("supersample must be >= 1");
  const auto& g = req.target;
  const PointIndex index = detail::index_samples(req.samples);
  const std::size_t sw = g.width * supersample, sh = g.height * supersample;
  const double sub = g.cell_size / static_cast<double>(supersample);
  // Sub-cell centres in metres; row 0 is north.
  auto sub_x = [&](std::size_t c) { return g.origin_x + (static_cast<double>(c) + 0.5) * sub; };
  auto sub_y = [&](std::size_t r) { return g.origin_y + (static_cast<double>(sh - r) - 0.5) * sub; };

  std::vector<std::uint32_t> owner(sw * sh);
  std::vector<double> owner_d2(sw * sh);
  parallel_for(sh, [&](std::size_t r) {
    for (std::size_t c = 0; c < sw; ++c) {
      const auto nb = index.nearest(sub_x(c), sub_y(r));
      owner[r * sw + c] = static_cast<std::uint32_t>(nb.index);
      owner_d2[r * sw + c] = nb.d2;
    }
  });
  const double reach = std::sqrt(*std::max_element(owner_d2.begin(), owner_d2.end()));
  const auto win = static_cast<std::ptrdiff_t>(std::ceil(reach / sub)) + 1;

  GridTile out(g);
  parallel_for(g.height, [&](std::size_t row) {
    std::vector<double> stolen(req.samples.size(), 0.0);
    std::vector<std::uint32_t> touched;
    for (std::size_t col = 0; col < g.width; ++col) {
      const double x = g.center_x(col), y = g.center_y(row);
      const auto hit = index.nearest(x, y);
      if (hit.d2 == 0) {
        out.set(out.index(row, col), req.samples[hit.index].z);
        continue;
      }
      const auto cr = static_cast<std::ptrdiff_t>(row * supersample + supersample / 2);
      const auto cc = static_cast<std::ptrdiff_t>(col * supersample + supersample / 2);
      const auto r0 = std::max<std::ptrdiff_t>(0, cr - win), r1 = std::min<std::ptrdiff_t>(sh, cr + win + 1);
      const auto c0 = std::max<std::ptrdiff_t>(0, cc - win), c1 = std::min<std::ptrdiff_t>(sw, cc + win + 1);
      double total = 0;
      touched.clear();
      for (auto r = r0; r < r1; ++r) {
        const double dy = sub_y(static_cast<std::size_t>(r)) - y;
        for (auto c = c0; c < c1; ++c) {
          const std::size_t s = static_cast<std::size_t>(r) * sw + static_cast<std::size_t>(c);
          const double dx = sub_x(static_cast<std::size_t>(c)) - x;
          const double d2 = dx * dx + dy * dy;
          double share = 0;
          if (d2 < owner_d2[s]) share = 1.0;
          else if (d2 == owner_d2[s]) share = 0.5;
          else continue;
          if (stolen[owner[s]] == 0) touched.push_back(owner[s]);
          stolen[owner[s]] += share;
          total += share;
        }
      }
      double z;
      if (total > 0) {
        std::sort(touched.begin(), touched.end());
        z = 0;
        for (auto j : touched) z += stolen[j] / total * req.samples[j].z;
        for (auto j : touched) stolen[j] = 0;
      } else {
        z = req.samples[hit.index].z;
      }
      out.set(out.index(row, col), z);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// inverse distance weighting

/// Σ wᵢzᵢ / Σ wᵢ with wᵢ = dᵢ^−p over the k nearest samples; a sample at zero
/// distance is returned as is.
inline GridTile idw_interpolate(const InterpRequest& req) {
  if (req.samples.empty()) throw EmptyInputError("IDW needs at least 1 sample");
  if (!(req.power > 0)) throw UsageError("IDW power must be positive");
  if (req.k < 1) throw UsageError("k must be >= 1");
  const auto& g = req.target;
  const PointIndex index = detail::index_samples(req.samples);
  const std::size_t k = std::min(req.k, req.samples.size());
  GridTile out(g);
  parallel_for(g.height, [&](std::size_t row) {
    std::vector<Neighbor> nb;
    for (std::size_t col = 0; col < g.width; ++col) {
      index.knn(g.center_x(col), g.center_y(row), k, nb);
      double z;
      if (nb.front().d2 == 0) {
        z = req.samples[nb.front().index].z;
      } else {
        double sw = 0, swz = 0;
        for (const auto& n : nb) {
          const double w = std::pow(n.d2, -0.5 * req.power);
          sw += w;
          swz += w * req.samples[n.index].z;
        }
        z = swz / sw;
      }
      out.set(out.index(row, col), z);
    }
  });
  return out;
}

/// IDW fill of a tile's invalid cells from its valid ones.
inline GridTile idw_fill(const GridTile& sparse, std::size_t k = 32, double power = 2.0) {
  InterpRequest req{valid_cell_points(sparse), sparse.geometry, k, power};
  GridTile out = idw_interpolate(req);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (sparse.is_valid(i)) out.values[i] = sparse.values[i];
  out.nodata = sparse.nodata;
  return out;
}

}  // namespace terra
