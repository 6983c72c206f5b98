#pragma once

// Topography-aware reconstruction loss: elevation MSE plus gamma times the MSE
// between Sobel slope fields.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "terra/autodiff.hpp"
#include "terra/error.hpp"

namespace terra {

enum class SlopeDomain { normalized, meters };
enum class LossSupport { all_grids, masked_only };

struct LossConfig {
  double gamma = 1.0;
  SlopeDomain slope_domain = SlopeDomain::normalized;
  LossSupport support = LossSupport::all_grids;
};

inline SlopeDomain parse_slope_domain(const std::string& s) {
  if (s == "normalized") return SlopeDomain::normalized;
  if (s == "meters") return SlopeDomain::meters;
  throw UsageError("unknown slope domain '" + s + "'");
}
inline LossSupport parse_loss_support(const std::string& s) {
  if (s == "all_grids") return LossSupport::all_grids;
  if (s == "masked_only") return LossSupport::masked_only;
  throw UsageError("unknown loss support '" + s + "'");
}
inline const char* to_string(SlopeDomain d) { return d == SlopeDomain::normalized ? "normalized" : "meters"; }
inline const char* to_string(LossSupport s) { return s == LossSupport::all_grids ? "all_grids" : "masked_only"; }

struct LossValue {
  double total = 0;
  double mse_part = 0;
  double gradient_part = 0;
};

template <class T>
struct LossVars {
  ad::Var<T> total, mse, gradient;
  LossValue value() const {
    return {static_cast<double>(total.item()), static_cast<double>(mse.item()), static_cast<double>(gradient.item())};
  }
};

namespace detail {

template <class T>
void check_fields(const ad::Var<T>& a, const ad::Var<T>& b, const char* op) {
  if (a.shape() != b.shape() || a.shape().size() != 2)
    throw ShapeError(std::string(op) + ": fields must share a 2-D shape, got " + ad::to_string(a.shape()) + " and " +
                     ad::to_string(b.shape()));
}

/// Mean of `sq` over the support cells (all cells when `support` is empty).
template <class T>
ad::Var<T> support_mean(ad::Var<T> sq, std::span<const std::uint8_t> support) {
  if (support.empty()) return ad::mean(sq);
  if (support.size() != sq.numel()) throw ShapeError("loss support mask size mismatch");
  std::size_t count = 0;
  std::vector<T> w(support.size());
  for (std::size_t i = 0; i < support.size(); ++i) {
    w[i] = support[i] ? T(1) : T(0);
    count += support[i] ? 1 : 0;
  }
  auto weights = sq.tape().constant(sq.shape(), std::move(w));
  auto s = ad::sum(ad::mul(sq, weights));
  return count ? ad::scale(s, T(1) / static_cast<T>(count)) : ad::scale(s, T(0));
}

}  // namespace detail

/// Mean squared difference of two [H,W] fields.
template <class T>
ad::Var<T> mse_loss(ad::Var<T> recon, ad::Var<T> target, std::span<const std::uint8_t> support = {}) {
  detail::check_fields(recon, target, "mse_loss");
  return detail::support_mean(ad::square(ad::sub(target, recon)), support);
}

/// Slope angle in radians from Sobel gradients scaled by 1/(8·cell_size).
template <class T>
ad::Var<T> sobel_slope(ad::Var<T> field, double cell_size) {
  const auto& s = field.shape();
  if (s.size() != 2 || s[0] < 2 || s[1] < 2) throw ShapeError("sobel_slope: field must be at least 2x2");
  if (!(cell_size > 0)) throw ShapeError("sobel_slope: cell size must be positive");
  const T k = static_cast<T>(1.0 / (8.0 * cell_size));
  auto dx = ad::scale(ad::conv2d_fixed(field, ad::kSobelX), k);
  auto dy = ad::scale(ad::conv2d_fixed(field, ad::kSobelY), k);
  return ad::atan(ad::sqrt(ad::add(ad::square(dx), ad::square(dy))));
}

template <class T>
ad::Var<T> gradient_loss(ad::Var<T> recon, ad::Var<T> target, double cell_size,
                         std::span<const std::uint8_t> support = {}) {
  detail::check_fields(recon, target, "gradient_loss");
  return detail::support_mean(ad::square(ad::sub(sobel_slope(target, cell_size), sobel_slope(recon, cell_size))),
                              support);
}

/// mse + gamma·gradient. The gradient term is only recorded when gamma > 0.
template <class T>
LossVars<T> total_loss(ad::Var<T> recon, ad::Var<T> target, double cell_size, const LossConfig& cfg,
                       std::span<const std::uint8_t> support = {}) {
  if (cfg.gamma < 0) throw UsageError("gamma must be >= 0");
  auto mse = mse_loss(recon, target, support);
  if (cfg.gamma == 0) {
    auto zero = recon.tape().constant(ad::Shape{}, {T(0)});
    return {mse, mse, zero};
  }
  auto grad = gradient_loss(recon, target, cell_size, support);
  return {ad::add(mse, ad::scale(grad, static_cast<T>(cfg.gamma))), mse, grad};
}

/// Slope field in radians for plain rasters (row-major, width w, height h).
inline std::vector<double> slope_field(std::span<const double> v, std::size_t w, std::size_t h, double cell_size) {
  if (w < 2 || h < 2) throw ShapeError("slope_field: raster must be at least 2x2");
  auto at = [&](long r, long c) {
    r = std::clamp<long>(r, 0, static_cast<long>(h) - 1);
    c = std::clamp<long>(c, 0, static_cast<long>(w) - 1);
    return v[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
  };
  std::vector<double> out(w * h);
  for (long r = 0; r < static_cast<long>(h); ++r)
    for (long c = 0; c < static_cast<long>(w); ++c) {
      double gx = 0, gy = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const double z = at(r + dr, c + dc);
          gx += ad::kSobelX[(dr + 1) * 3 + dc + 1] * z;
          gy += ad::kSobelY[(dr + 1) * 3 + dc + 1] * z;
        }
      gx /= 8.0 * cell_size;
      gy /= 8.0 * cell_size;
      out[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] = std::atan(std::sqrt(gx * gx + gy * gy));
    }
  return out;
}

}  // namespace terra
