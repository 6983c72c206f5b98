#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "terra/error.hpp"
#include "terra/raster.hpp"

namespace terra {

/// Population statistics of a difference Δ = predicted − reference.
struct DiffStats {
  double mean = 0;
  double std = 0;
  double mae = 0;
  double rmse = 0;
  std::size_t count = 0;
};

/// Streaming accumulator; merging follows insertion order, so results are
/// reproducible for a fixed order of `add` calls.
class DiffAccumulator {
 public:
  void add(double d) {
    sum_ += d;
    sum_abs_ += std::abs(d);
    sum_sq_ += d * d;
    ++n_;
    values_.push_back(d);
  }

  std::size_t size() const { return n_; }

  DiffStats finish() const {
    if (n_ == 0) throw EmptyInputError("difference statistics over zero cells");
    DiffStats s;
    const double n = static_cast<double>(n_);
    s.count = n_;
    s.mean = sum_ / n;
    s.mae = sum_abs_ / n;
    s.rmse = std::sqrt(sum_sq_ / n);
    double ss = 0;
    for (double d : values_) ss += (d - s.mean) * (d - s.mean);
    s.std = std::sqrt(ss / n);
    return s;
  }

 private:
  double sum_ = 0, sum_abs_ = 0, sum_sq_ = 0;
  std::size_t n_ = 0;
  std::vector<double> values_;
};

/// Stats of pred − ref over the cells valid in both rasters.
inline DiffStats diff_stats(const GridTile& pred, const GridTile& ref) {
  if (pred.width() != ref.width() || pred.height() != ref.height())
    throw GeometryError("rasters differ in size: " + std::to_string(pred.width()) + "x" + std::to_string(pred.height()) +
                        " vs " + std::to_string(ref.width()) + "x" + std::to_string(ref.height()));
  DiffAccumulator acc;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred.is_valid(i) && ref.is_valid(i)) acc.add(pred.values[i] - ref.values[i]);
  if (acc.size() == 0) throw EmptyInputError("rasters share no valid cells");
  return acc.finish();
}

}  // namespace terra
