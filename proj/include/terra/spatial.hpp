#pragma once

// k-nearest-neighbour queries over 2-D points using a uniform bucket grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "terra/error.hpp"

namespace terra {

struct Neighbor {
  double d2 = 0;  // squared distance
  std::size_t index = 0;

  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
  }
};

class PointIndex {
 public:
  PointIndex() = default;

  PointIndex(std::span<const double> xs, std::span<const double> ys) : xs_(xs.begin(), xs.end()), ys_(ys.begin(), ys.end()) {
    if (xs.size() != ys.size()) throw ShapeError("point index: x and y differ in length");
    if (xs.empty()) throw EmptyInputError("point index over zero points");
    const auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
    const auto [ylo, yhi] = std::minmax_element(ys.begin(), ys.end());
    x0_ = *xlo;
    y0_ = *ylo;
    const double w = *xhi - x0_, h = *yhi - y0_;
    // About two points per bucket; degenerate (collinear) sets fall back to
    // spacing along the longer side.
    const double n = static_cast<double>(xs.size());
    bucket_ = std::max(std::sqrt(2.0 * w * h / n), std::max(w, h) / n);
    if (!(bucket_ > 0) || !std::isfinite(bucket_)) bucket_ = 1.0;
    nx_ = static_cast<std::size_t>(std::floor(w / bucket_)) + 1;
    ny_ = static_cast<std::size_t>(std::floor(h / bucket_)) + 1;
    start_.assign(nx_ * ny_ + 1, 0);
    std::vector<std::size_t> cell(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      cell[i] = bucket_of(xs[i], ys[i]);
      ++start_[cell[i] + 1];
    }
    for (std::size_t c = 0; c < nx_ * ny_; ++c) start_[c + 1] += start_[c];
    items_.resize(xs.size());
    auto fill = start_;
    for (std::size_t i = 0; i < xs.size(); ++i) items_[fill[cell[i]]++] = i;
  }

  std::size_t size() const { return xs_.size(); }
  double x(std::size_t i) const { return xs_[i]; }
  double y(std::size_t i) const { return ys_[i]; }

  /// The k nearest points to (qx, qy), ascending by distance then index.
  void knn(double qx, double qy, std::size_t k, std::vector<Neighbor>& out) const {
    out.clear();
    k = std::min(k, xs_.size());
    if (k == 0) return;
    const auto bx = clamp_bucket((qx - x0_) / bucket_, nx_);
    const auto by = clamp_bucket((qy - y0_) / bucket_, ny_);
    const std::ptrdiff_t max_ring = static_cast<std::ptrdiff_t>(std::max(nx_, ny_));
    for (std::ptrdiff_t r = 0; r <= max_ring; ++r) {
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const std::ptrdiff_t cy = by + dy;
        if (cy < 0 || cy >= static_cast<std::ptrdiff_t>(ny_)) continue;
        const bool edge_row = dy == -r || dy == r;
        for (std::ptrdiff_t dx = -r; dx <= r; dx += edge_row ? 1 : 2 * r) {
          const std::ptrdiff_t cx = bx + dx;
          if (cx >= 0 && cx < static_cast<std::ptrdiff_t>(nx_)) scan(static_cast<std::size_t>(cy) * nx_ + cx, qx, qy, k, out);
          if (r == 0) break;
        }
      }
      if (out.size() == k) {
        const double reach = static_cast<double>(r) * bucket_;
        if (out.front().d2 < reach * reach) break;
      }
    }
    std::sort_heap(out.begin(), out.end());
  }

  Neighbor nearest(double qx, double qy) const {
    std::vector<Neighbor> one;
    knn(qx, qy, 1, one);
    return one.front();
  }

 private:
  std::size_t bucket_of(double px, double py) const {
    return static_cast<std::size_t>(clamp_bucket((py - y0_) / bucket_, ny_)) * nx_ +
           static_cast<std::size_t>(clamp_bucket((px - x0_) / bucket_, nx_));
  }
  static std::ptrdiff_t clamp_bucket(double f, std::size_t n) {
    if (!(f > 0)) return 0;
    if (f >= static_cast<double>(n)) return static_cast<std::ptrdiff_t>(n) - 1;
    return static_cast<std::ptrdiff_t>(f);
  }
  // `out` is a max-heap (by Neighbor order) of at most k entries.
  void scan(std::size_t c, double qx, double qy, std::size_t k, std::vector<Neighbor>& out) const {
    for (std::size_t j = start_[c]; j < start_[c + 1]; ++j) {
      const std::size_t i = items_[j];
      const double dx = xs_[i] - qx, dy = ys_[i] - qy;
      const Neighbor nb{dx * dx + dy * dy, i};
      if (out.size() < k) {
        out.push_back(nb);
        std::push_heap(out.begin(), out.end());
      } else if (nb < out.front()) {
        std::pop_heap(out.begin(), out.end());
        out.back() = nb;
        std::push_heap(out.begin(), out.end());
      }
    }
  }

  std::vector<double> xs_, ys_;
  double x0_ = 0, y0_ = 0, bucket_ = 1;
  std::size_t nx_ = 1, ny_ = 1;
  std::vector<std::size_t> start_, items_;
};

}  // namespace terra
