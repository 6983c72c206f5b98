#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "support.hpp"
#include "terra/baselines.hpp"

using namespace terra;

namespace {

SparsePoints random_points(std::size_t n, std::uint64_t seed, double extent = 300.0) {
  Rng rng(seed);
  SparsePoints pts(n);
  for (auto& p : pts) p = {rng.uniform(0.0, extent), rng.uniform(0.0, extent), rng.uniform(100.0, 400.0)};
  return pts;
}

VariogramModel exp_model(double nugget = 0.0, double sill = 50.0, double range = 80.0) {
  VariogramModel m;
  m.nugget = nugget;
  m.sill = sill;
  m.range = range;
  return m;
}

// Random samples placed on cell centres of `g`, so sample-coincident cells exist.
SparsePoints on_centres(const GridGeometry& g, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> idx(g.cells());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(std::span<std::size_t>(idx));
  SparsePoints pts;
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back({g.center_x(idx[i] % g.width), g.center_y(idx[i] / g.width), rng.uniform(-50.0, 50.0)});
  return pts;
}

const GridGeometry kGrid{16, 16, 10.0, 0.0, 0.0};

double z_at(const GridTile& t, const GridGeometry& g, const Point3& p) {
  const auto col = static_cast<std::size_t>((p.x - g.origin_x) / g.cell_size);
  const auto row = g.height - 1 - static_cast<std::size_t>((p.y - g.origin_y) / g.cell_size);
  return t.at(row, col);
}

}  // namespace

// ---------------------------------------------------------------------------
// semivariogram

TEST(Semivariogram, ConstantValuesGiveZero) {
  auto pts = random_points(30, 1);
  for (auto& p : pts) p.z = 7.0;
  for (const auto& b : empirical_semivariogram(pts, 6, 200.0)) EXPECT_EQ(b.gamma, 0.0);
}

TEST(Semivariogram, TwoPoints) {
  const SparsePoints pts{{0, 0, 0}, {3, 4, 2}};
  const auto bins = empirical_semivariogram(pts, 4, 10.0);
  ASSERT_EQ(bins.size(), 1u);
  EXPECT_DOUBLE_EQ(bins[0].lag, 5.0);
  EXPECT_DOUBLE_EQ(bins[0].gamma, 2.0);
  EXPECT_EQ(bins[0].pairs, 1u);
}

TEST(Semivariogram, MatchesPairwiseOracle) {
  const auto pts = random_points(20, 2);
  const std::size_t nb = 5;
  const double max_lag = 250.0, width = max_lag / nb;
  std::vector<double> sq(nb, 0), lag(nb, 0);
  std::vector<std::size_t> cnt(nb, 0);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j <= i) continue;
      const double d = std::sqrt((pts[i].x - pts[j].x) * (pts[i].x - pts[j].x) +
                                 (pts[i].y - pts[j].y) * (pts[i].y - pts[j].y));
      if (d > max_lag) continue;
      const std::size_t b = std::min<std::size_t>(nb - 1, static_cast<std::size_t>(std::floor(d / width)));
      sq[b] += (pts[i].z - pts[j].z) * (pts[i].z - pts[j].z);
      lag[b] += d;
      ++cnt[b];
    }
  const auto bins = empirical_semivariogram(pts, nb, max_lag);
  std::size_t k = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (cnt[b] == 0) continue;
    ASSERT_LT(k, bins.size());
    EXPECT_EQ(bins[k].pairs, cnt[b]);
    EXPECT_NEAR(bins[k].gamma, sq[b] / (2.0 * cnt[b]), 1e-12 * std::max(1.0, bins[k].gamma));
    EXPECT_NEAR(bins[k].lag, lag[b] / cnt[b], 1e-12 * bins[k].lag);
    ++k;
  }
  EXPECT_EQ(k, bins.size());
}

TEST(Semivariogram, RejectsTooFewSamples) {
  EXPECT_THROW(empirical_semivariogram({{0, 0, 1}}, 4, 10.0), EmptyInputError);
}

TEST(VariogramFit, RecoversExponentialParameters) {
  const VariogramModel truth = exp_model(4.0, 60.0, 75.0);
  std::vector<VariogramBin> bins;
  for (int i = 1; i <= 15; ++i) {
    const double h = 20.0 * i;
    bins.push_back({h, truth.at(h), static_cast<std::size_t>(100 + 7 * i)});
  }
  const auto fit = fit_variogram(bins, VariogramKind::exponential);
  EXPECT_FALSE(fit.degenerate);
  EXPECT_NEAR(fit.nugget, truth.nugget, 0.01 * truth.nugget);
  EXPECT_NEAR(fit.sill, truth.sill, 0.01 * truth.sill);
  EXPECT_NEAR(fit.range, truth.range, 0.01 * truth.range);
}

TEST(VariogramFit, RecoversSphericalAndGaussian) {
  for (auto kind : {VariogramKind::spherical, VariogramKind::gaussian}) {
    VariogramModel truth = exp_model(1.0, 30.0, 120.0);
    truth.kind = kind;
    std::vector<VariogramBin> bins;
    for (int i = 1; i <= 15; ++i) bins.push_back({15.0 * i, truth.at(15.0 * i), 50});
    const auto fit = fit_variogram(bins, kind);
    EXPECT_NEAR(fit.sill, truth.sill, 0.01 * truth.sill) << to_string(kind);
    EXPECT_NEAR(fit.range, truth.range, 0.01 * truth.range) << to_string(kind);
  }
}

TEST(VariogramFit, ZeroVarianceIsDegenerate) {
  std::vector<VariogramBin> bins{{10, 0, 5}, {20, 0, 5}, {30, 0, 5}};
  const auto m = fit_variogram(bins, VariogramKind::exponential);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.nugget, 0.0);
  EXPECT_GT(m.sill, m.nugget);
}

TEST(VariogramFit, DeterministicAndConstrained) {
  const auto bins = empirical_semivariogram(random_points(200, 3), 12, 200.0);
  const auto a = fit_variogram(bins, VariogramKind::exponential);
  const auto b = fit_variogram(bins, VariogramKind::exponential);
  EXPECT_EQ(a.nugget, b.nugget);
  EXPECT_EQ(a.sill, b.sill);
  EXPECT_EQ(a.range, b.range);
  EXPECT_GE(a.nugget, 0.0);
  EXPECT_GT(a.sill, a.nugget);
  EXPECT_GT(a.range, 0.0);
  EXPECT_DOUBLE_EQ(a.at(0.0), a.nugget);
  for (double h = 1; h < 400; h += 7) EXPECT_LE(a.at(h), a.at(h + 7));
}

TEST(VariogramFit, NeedsThreeBins) {
  EXPECT_THROW(fit_variogram({{1, 1, 1}, {2, 2, 1}}, VariogramKind::exponential), EmptyInputError);
}

// ---------------------------------------------------------------------------
// ordinary kriging

TEST(Kriging, ExactAtSamples) {
  const auto pts = on_centres(kGrid, 40, 4);
  const auto vm = fit_variogram_to(pts);
  const auto out = ok_interpolate({pts, kGrid, 32, 2.0}, vm);
  double scale = 0;
  for (const auto& p : pts) scale = std::max(scale, std::abs(p.z));
  for (const auto& p : pts) EXPECT_NEAR(z_at(out, kGrid, p), p.z, 1e-6 * scale);
}

TEST(Kriging, WeightsSumToOne) {
  const auto pts = random_points(12, 5);
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const auto w = kriging_weights(pts, rng.uniform(0, 300), rng.uniform(0, 300), exp_model(2.0));
    ASSERT_TRUE(w.has_value());
    double s = 0;
    for (double l : w->lambda) s += l;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Kriging, TwoPointMidpoint) {
  const SparsePoints pts{{0, 0, 10}, {0, 2, 20}};
  for (auto kind : {VariogramKind::exponential, VariogramKind::spherical, VariogramKind::gaussian}) {
    auto vm = exp_model(0.5, 3.0, 1.7);
    vm.kind = kind;
    // One column of three 1 m cells centred at y = 2, 1, 0.
    const GridGeometry g{1, 3, 1.0, -0.5, -0.5};
    const auto out = ok_interpolate({pts, g, 32, 2.0}, vm);
    EXPECT_NEAR(out.at(1, 0), 15.0, 1e-9) << to_string(kind);
    EXPECT_NEAR(out.at(0, 0), 20.0, 1e-9);
    EXPECT_NEAR(out.at(2, 0), 10.0, 1e-9);
  }
}

TEST(Kriging, MatchesBruteForceSolve) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto pts = random_points(5, 100 + seed, 50.0);
    const auto vm = exp_model(1.0, 20.0, 30.0);
    const double x = 25.0, y = 17.0;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(6, 6);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(6);
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) {
        const double h = std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y);
        a(i, j) = i == j ? 0.0 : vm.nugget + (vm.sill - vm.nugget) * (1 - std::exp(-h / vm.range));
      }
      a(i, 5) = a(5, i) = 1.0;
      const double h0 = std::hypot(pts[i].x - x, pts[i].y - y);
      b(i) = vm.nugget + (vm.sill - vm.nugget) * (1 - std::exp(-h0 / vm.range));
    }
    b(5) = 1.0;
    const Eigen::VectorXd sol = a.fullPivLu().solve(b);
    double expect = 0;
    for (int i = 0; i < 5; ++i) expect += sol(i) * pts[i].z;

    const auto w = kriging_weights(pts, x, y, vm);
    ASSERT_TRUE(w.has_value());
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(w->lambda[i], sol(i), 1e-9);
    EXPECT_NEAR(w->mu, sol(5), 1e-9);

    // The same cell through the gridded interpolator.
    const GridGeometry g{1, 1, 2.0, x - 1.0, y - 1.0};
    EXPECT_NEAR(ok_interpolate({pts, g, 5, 2.0}, vm).at(0, 0), expect, 1e-9);
  }
}

TEST(Kriging, DuplicateSamplesAreRegularizedOrSingular) {
  const SparsePoints pts{{0, 0, 1}, {0, 0, 1}, {5, 5, 3}};
  const auto w = kriging_weights(pts, 2.0, 2.0, exp_model());
  if (w) {
    EXPECT_TRUE(w->regularized);
  } else {
    KrigingReport rep;
    ok_interpolate({pts, GridGeometry{2, 2, 1.0, 1.0, 1.0}, 3, 2.0}, exp_model(), &rep);
    EXPECT_GT(rep.singular_cells, 0u);
  }
}

TEST(Kriging, Preconditions) {
  EXPECT_THROW(ok_interpolate({{{0, 0, 1}}, kGrid, 32, 2.0}, exp_model()), EmptyInputError);
  EXPECT_THROW(ok_interpolate({random_points(4, 1), kGrid, 0, 2.0}, exp_model()), UsageError);
}

// ---------------------------------------------------------------------------
// natural neighbour and IDW

TEST(NaturalNeighbour, ExactAndBounded) {
  const auto pts = on_centres(kGrid, 30, 7);
  const auto out = nn_interpolate({pts, kGrid, 32, 2.0}, 4);
  double lo = 1e300, hi = -1e300;
  for (const auto& p : pts) lo = std::min(lo, p.z), hi = std::max(hi, p.z);
  for (const auto& p : pts) EXPECT_EQ(z_at(out, kGrid, p), p.z);
  ASSERT_TRUE(out.fully_valid());
  for (double v : out.values) {
    EXPECT_GE(v, lo - 1e-12);
    EXPECT_LE(v, hi + 1e-12);
  }
}

TEST(NaturalNeighbour, MidpointOfTwoSamples) {
  // Samples at the centres of the first and last columns of one row; the
  // middle column is equidistant.
  const GridGeometry g{5, 1, 10.0, 0.0, 0.0};
  const SparsePoints pts{{5.0, 5.0, 100.0}, {45.0, 5.0, 140.0}};
  const auto out = nn_interpolate({pts, g, 32, 2.0}, 8);
  EXPECT_NEAR(out.at(0, 2), 120.0, 1e-3 * 40.0);
}

TEST(NaturalNeighbour, SingleSampleFillsEverything) {
  const auto out = nn_interpolate({{{12.0, 13.0, 4.5}}, kGrid, 32, 2.0});
  for (double v : out.values) EXPECT_EQ(v, 4.5);
  EXPECT_THROW(nn_interpolate({{}, kGrid, 32, 2.0}), EmptyInputError);
}

TEST(Idw, ExactAndBounded) {
  const auto pts = on_centres(kGrid, 30, 8);
  const auto out = idw_interpolate({pts, kGrid, 8, 2.0});
  double lo = 1e300, hi = -1e300;
  for (const auto& p : pts) lo = std::min(lo, p.z), hi = std::max(hi, p.z);
  for (const auto& p : pts) EXPECT_EQ(z_at(out, kGrid, p), p.z);
  for (double v : out.values) {
    EXPECT_GE(v, lo - 1e-12);
    EXPECT_LE(v, hi + 1e-12);
  }
}

TEST(Idw, MatchesDirectSum) {
  const auto pts = random_points(25, 9, 160.0);
  for (double p : {1.0, 2.0, 3.5}) {
    const auto out = idw_interpolate({pts, kGrid, pts.size(), p});
    for (std::size_t r = 0; r < kGrid.height; ++r)
      for (std::size_t c = 0; c < kGrid.width; ++c) {
        double sw = 0, swz = 0;
        for (const auto& s : pts) {
          const double d = std::hypot(s.x - kGrid.center_x(c), s.y - kGrid.center_y(r));
          sw += 1.0 / std::pow(d, p);
          swz += s.z / std::pow(d, p);
        }
        EXPECT_NEAR(out.at(r, c), swz / sw, 1e-12 * std::abs(swz / sw));
      }
  }
}

TEST(Idw, SymmetricPairGivesMean) {
  const GridGeometry g{3, 1, 1.0, 0.0, 0.0};
  const auto out = idw_interpolate({{{0.5, 0.5, 2.0}, {2.5, 0.5, 8.0}}, g, 2, 3.0});
  EXPECT_DOUBLE_EQ(out.at(0, 1), 5.0);
}

TEST(Idw, Preconditions) {
  EXPECT_THROW(idw_interpolate({{}, kGrid, 4, 2.0}), EmptyInputError);
  EXPECT_THROW(idw_interpolate({random_points(3, 1), kGrid, 4, 0.0}), UsageError);
  EXPECT_THROW(idw_interpolate({random_points(3, 1), kGrid, 0, 2.0}), UsageError);
}

TEST(IdwFill, KeepsMeasuredCells) {
  GridTile t(kGrid);
  Rng rng(10);
  for (std::size_t i = 0; i < t.size(); i += 7) t.set(i, rng.uniform(0, 10));
  const auto out = idw_fill(t);
  ASSERT_TRUE(out.fully_valid());
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t.is_valid(i)) {
      EXPECT_EQ(out.values[i], t.values[i]);
    }
}

// ---------------------------------------------------------------------------
// shared properties

TEST(Baselines, TranslationEquivariantInElevation) {
  const auto pts = on_centres(kGrid, 40, 11);
  Rng rng(12);
  const double shift = rng.uniform(-500.0, 500.0);
  auto moved = pts;
  for (auto& p : moved) p.z += shift;
  const auto vm = fit_variogram_to(pts);
  const auto vm2 = fit_variogram_to(moved);
  const std::vector<std::pair<GridTile, GridTile>> cases{
      {ok_interpolate({pts, kGrid, 16, 2.0}, vm), ok_interpolate({moved, kGrid, 16, 2.0}, vm2)},
      {nn_interpolate({pts, kGrid, 16, 2.0}), nn_interpolate({moved, kGrid, 16, 2.0})},
      {idw_interpolate({pts, kGrid, 16, 2.0}), idw_interpolate({moved, kGrid, 16, 2.0})}};
  for (const auto& [a, b] : cases)
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b.values[i], a.values[i] + shift, 1e-8);
}

TEST(Baselines, Deterministic) {
  const auto pts = on_centres(kGrid, 40, 13);
  const auto vm = fit_variogram_to(pts);
  EXPECT_EQ(ok_interpolate({pts, kGrid, 16, 2.0}, vm).values, ok_interpolate({pts, kGrid, 16, 2.0}, vm).values);
  EXPECT_EQ(nn_interpolate({pts, kGrid, 16, 2.0}).values, nn_interpolate({pts, kGrid, 16, 2.0}).values);
  EXPECT_EQ(idw_interpolate({pts, kGrid, 16, 2.0}).values, idw_interpolate({pts, kGrid, 16, 2.0}).values);
}
