#pragma once

// Helpers shared by the unit tests and the acceptance runner: finite-difference
// gradient checks and small fixtures.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "terra/model.hpp"
#include "terra/random.hpp"
#include "terra/train.hpp"

namespace terra::testing {

/// ||a − b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale < 1e-300 ? 0.0 : std::sqrt(diff) / scale;
}

inline ad::Tensor<double> random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return ad::Tensor<double>(std::move(shape), std::move(v));
}

using Builder = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Worst relative error between backprop and central differences over all
/// inputs of a scalar-valued graph.
inline double op_gradient_error(std::vector<ad::Tensor<double>> inputs, const Builder& build, double step = 1e-5) {
  auto run = [&](std::vector<std::vector<double>>* grads) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      vars.push_back(grads ? tape.leaf(inputs[i], &(*grads)[i]) : tape.constant(inputs[i]));
    auto out = build(tape, vars);
    if (grads) tape.backward(out);
    return out.item();
  };
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t.numel(), 0.0);
  run(&analytic);
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> numeric(inputs[i].numel());
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      const double x0 = inputs[i].data[j];
      inputs[i].data[j] = x0 + step;
      const double up = run(nullptr);
      inputs[i].data[j] = x0 - step;
      const double down = run(nullptr);
      inputs[i].data[j] = x0;
      numeric[j] = (up - down) / (2 * step);
    }
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

/// Contracts a tensor-valued op with fixed random weights so its full
/// Jacobian is exercised through one scalar.
inline ad::Var<double> project(ad::Var<double> out, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(out.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return ad::sum(ad::mul(out, out.tape().constant(out.shape(), std::move(w))));
}

/// Gradient check of the training loss through a whole model. Each parameter
/// tensor is probed at up to `coords` random coordinates (all when smaller);
/// returns the worst per-tensor relative error.
inline double model_gradient_error(ModelParams<double> params, const GridTile& tile, const MaskPlan& plan,
                                   const LossConfig& loss, std::uint64_t seed, std::size_t coords = 24,
                                   double step = 1e-5, std::string* worst_name = nullptr) {
  auto grads = params.zero_grads();
  tile_loss_and_grads(params, tile, plan, loss, &grads);
  Rng rng(seed);
  double worst = 0;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& data = params.tensors[i].data;
    std::vector<std::size_t> probe(data.size());
    for (std::size_t j = 0; j < probe.size(); ++j) probe[j] = j;
    if (probe.size() > coords) {
      rng.shuffle(std::span<std::size_t>(probe));
      probe.resize(coords);
    }
    std::vector<double> a, n;
    for (auto j : probe) {
      const double x0 = data[j];
      data[j] = x0 + step;
      const double up = tile_loss_and_grads<double>(params, tile, plan, loss, nullptr);
      data[j] = x0 - step;
      const double down = tile_loss_and_grads<double>(params, tile, plan, loss, nullptr);
      data[j] = x0;
      a.push_back(grads[i][j]);
      n.push_back((up - down) / (2 * step));
    }
    const double e = relative_error(a, n);
    if (e > worst) {
      worst = e;
      if (worst_name) *worst_name = params.names[i];
    }
  }
  return worst;
}

/// Parameters with every tensor (including zero-initialized biases, betas and
/// the mask token) perturbed, so no gradient path is trivially inactive.
inline ModelParams<double> jittered_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_params<double>(cfg, seed);
  Rng rng(seed + 17);
  for (auto& t : p.tensors)
    for (auto& x : t.data) x += 0.05 * rng.normal();
  return p;
}

/// Generic square raster with the given values (row-major, top row first).
inline GridTile grid(std::size_t w, std::size_t h, std::vector<double> values, double cell = 30.0) {
  GridTile t(GridGeometry{w, h, cell, 0.0, 0.0});
  for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
  return t;
}

}  // namespace terra::testing
