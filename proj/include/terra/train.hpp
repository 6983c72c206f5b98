#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "terra/autodiff.hpp"
#include "terra/container.hpp"
#include "terra/loss.hpp"
#include "terra/mask.hpp"
#include "terra/model.hpp"
#include "terra/parallel.hpp"
#include "terra/random.hpp"
#include "terra/raster.hpp"
#include "terra/stats.hpp"

namespace terra {

enum class LrSchedule { constant, cosine };

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw UsageError("unknown lr schedule '" + s + "'");
}
inline const char* to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

struct TrainConfig {
  double mask_ratio = 0.95;
  MaskStrategy mask_strategy = MaskStrategy::random;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  AdamConfig adam;
  LrSchedule lr_schedule = LrSchedule::constant;
  std::size_t warmup_steps = 0;
  std::uint64_t seed = 0;
  double val_fraction = 0.11;
  LossConfig loss;

  void validate() const {
    if (!(mask_ratio >= 0 && mask_ratio <= 1)) throw UsageError("mask_ratio must be in [0, 1]");
    if (!(val_fraction > 0 && val_fraction < 1)) throw UsageError("val_fraction must be in (0, 1)");
    if (batch_size == 0) throw UsageError("batch_size must be >= 1");
    if (adam.learning_rate < 0) throw UsageError("learning_rate must be >= 0");
    if (loss.gamma < 0) throw UsageError("gamma must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// dataset

struct Dataset {
  std::vector<GridTile> train;
  std::vector<GridTile> val;
};

/// Seeded shuffle, then the first round(val_fraction·n) tiles (at least one,
/// at most n−1) become the validation split. Every tile must be fully valid.
inline Dataset make_dataset(const std::vector<GridTile>& tiles, double val_fraction, std::uint64_t seed) {
  if (tiles.size() < 2) throw EmptyInputError("a dataset needs at least 2 tiles");
  if (!(val_fraction > 0 && val_fraction < 1)) throw UsageError("val_fraction must be in (0, 1)");
  for (std::size_t i = 0; i < tiles.size(); ++i)
    if (!tiles[i].fully_valid()) throw UsageError("tile " + std::to_string(i) + " has invalid cells");
  std::vector<std::size_t> order(tiles.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(tiles.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, tiles.size() - 1);
  Dataset d;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_val ? d.val : d.train).push_back(tiles[order[k]]);
  return d;
}

// ---------------------------------------------------------------------------
// Adam

/// One bias-corrected Adam update of a flat parameter block at step t ≥ 1.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t,
                 const AdamConfig& cfg, double lr) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw ShapeError("adam: parameter, gradient and moment sizes differ");
  if (t < 1) throw UsageError("adam: step counter starts at 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(cfg.eps);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    if (cfg.weight_decay != 0) param[i] *= decay;
    param[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
  }
}

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ModelParams<T>& p) { return {p.zero_grads(), p.zero_grads(), 0}; }
};

template <class T>
void adam_step(ModelParams<T>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state,
               const AdamConfig& cfg, double lr) {
  if (grads.size() != params.tensors.size()) throw ShapeError("adam: gradient count mismatch");
  ++state.t;
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    adam_update<T>(params.tensors[i].data, grads[i], state.m[i], state.v[i], state.t, cfg, lr);
}

// ---------------------------------------------------------------------------
// training

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_rmse_m = 0;
  double wall_seconds = 0;
};

struct ValMetrics {
  double loss = 0;
  double rmse_m = 0;           // over hidden cells, meters
  double baseline_rmse_m = 0;  // per-tile visible-mean predictor, same cells
};

/// Loss of one tile under one mask plan. Gradients are accumulated into
/// `grads` and the denormalized reconstruction written to `recon_m` when given.
template <class T>
double tile_loss_and_grads(const ModelParams<T>& params, const GridTile& tile, const MaskPlan& plan,
                           const LossConfig& loss_cfg, std::vector<std::vector<T>>* grads,
                           std::vector<double>* recon_m = nullptr) {
  const auto& cfg = params.config;
  const auto prep = prepare_tile<T>(tile, plan);
  ad::Tape<T> tape;
  tape.set_check_finite(false);
  ModelGraph<T> g(tape, params, grads);
  auto pred = predict_normalized(g, std::span<const T>(prep.input), plan);
  if (recon_m) {
    recon_m->resize(tile.size());
    const auto pv = pred.value();
    for (std::size_t i = 0; i < pv.size(); ++i)
      (*recon_m)[i] = static_cast<double>(pv[i]) * prep.stats.scale + prep.stats.shift;
  }
  const ad::Shape field{cfg.tile_side, cfg.tile_side};
  auto recon = ad::reshape(pred, field);
  auto target = tape.constant(field, prep.target);
  double cell = 1.0;
  if (loss_cfg.slope_domain == SlopeDomain::meters) {
    const T s = static_cast<T>(prep.stats.scale), sh = static_cast<T>(prep.stats.shift);
    recon = ad::add_scalar(ad::scale(recon, s), sh);
    target = ad::add_scalar(ad::scale(target, s), sh);
    cell = tile.cell_size();
  }
  std::vector<std::uint8_t> support;
  if (loss_cfg.support == LossSupport::masked_only) support = plan.is_masked();
  auto loss = total_loss(recon, target, cell, loss_cfg, support);
  const double value = static_cast<double>(loss.total.item());
  if (!std::isfinite(value)) return value;
  if (grads) tape.backward(loss.total);
  return value;
}

/// Fixed validation plans: one per tile, derived from the training seed only.
inline std::vector<MaskPlan> validation_plans(std::size_t n_tiles, std::size_t side, const TrainConfig& cfg) {
  Rng rng(cfg.seed ^ 0x5A17D47A5EEDULL);
  std::vector<MaskPlan> plans;
  for (std::size_t i = 0; i < n_tiles; ++i)
    plans.push_back(make_mask(side * side, cfg.mask_ratio, rng.next_u64(), cfg.mask_strategy, side));
  return plans;
}

/// Validation loss plus RMSE (meters) over the hidden cells, for the model and
/// for predicting each tile's visible mean. Never mutates `params`.
template <class T>
ValMetrics validate(const std::vector<GridTile>& val, const ModelParams<T>& params, const TrainConfig& cfg) {
  if (val.empty()) throw EmptyInputError("validation split is empty");
  const auto plans = validation_plans(val.size(), params.config.tile_side, cfg);
  std::vector<double> losses(val.size());
  std::vector<std::pair<double, double>> sq(val.size());  // (model, baseline) sums
  std::vector<std::size_t> counts(val.size());
  parallel_for(val.size(), [&](std::size_t i) {
    check_tile_geometry(val[i], params.config);
    std::vector<double> recon;
    losses[i] = tile_loss_and_grads<T>(params, val[i], plans[i], cfg.loss, nullptr, &recon);
    const NormStats vis = norm_stats(apply_mask(val[i], plans[i]));
    double a = 0, b = 0;
    for (auto k : plans[i].masked) {
      a += (recon[k] - val[i].values[k]) * (recon[k] - val[i].values[k]);
      b += (vis.shift - val[i].values[k]) * (vis.shift - val[i].values[k]);
    }
    sq[i] = {a, b};
    counts[i] = plans[i].masked.size();
  });
  ValMetrics m;
  double a = 0, b = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    m.loss += losses[i];
    a += sq[i].first;
    b += sq[i].second;
    n += counts[i];
  }
  m.loss /= static_cast<double>(val.size());
  m.rmse_m = n ? std::sqrt(a / static_cast<double>(n)) : 0.0;
  m.baseline_rmse_m = n ? std::sqrt(b / static_cast<double>(n)) : 0.0;
  return m;
}

template <class T>
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& cfg)
      : cfg_(cfg), params_(init_params<T>(model_cfg, cfg.seed * 0x9E3779B97F4A7C15ULL + 1)),
        adam_(AdamState<T>::zeros_like(params_)), rng_(cfg.seed) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }
  std::size_t epoch() const { return epoch_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const AdamState<T>& adam() const { return adam_; }
  const Rng& rng() const { return rng_; }

  double learning_rate(std::size_t steps_per_epoch) const {
    const double base = cfg_.adam.learning_rate;
    const double step = static_cast<double>(adam_.t + 1);
    double lr = base;
    if (cfg_.warmup_steps > 0 && step <= static_cast<double>(cfg_.warmup_steps))
      lr = base * step / static_cast<double>(cfg_.warmup_steps);
    if (cfg_.lr_schedule == LrSchedule::cosine) {
      const double total = static_cast<double>(std::max<std::size_t>(1, cfg_.epochs * steps_per_epoch));
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, (step - 1) / total)));
    }
    return lr;
  }

  /// One pass over `train` with fresh random masks for every tile. Returns the
  /// mean tile loss.
  double train_epoch(const std::vector<GridTile>& train) {
    if (train.empty()) throw EmptyInputError("training split is empty");
    const std::size_t side = params_.config.tile_side;
    const std::size_t steps_per_epoch = (train.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0;
    for (std::size_t start = 0, step = 0; start < order.size(); start += cfg_.batch_size, ++step) {
      const std::size_t b = std::min(cfg_.batch_size, order.size() - start);
      std::vector<MaskPlan> plans;
      for (std::size_t k = 0; k < b; ++k)
        plans.push_back(make_mask(side * side, cfg_.mask_ratio, rng_.next_u64(), cfg_.mask_strategy, side));
      std::vector<std::vector<std::vector<T>>> tile_grads(b);
      std::vector<double> losses(b);
      parallel_for(b, [&](std::size_t k) {
        tile_grads[k] = params_.zero_grads();
        losses[k] = tile_loss_and_grads<T>(params_, train[order[start + k]], plans[k], cfg_.loss, &tile_grads[k]);
      });
      for (std::size_t k = 0; k < b; ++k) {
        if (!std::isfinite(losses[k]))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch_ + 1) + ", step " +
                             std::to_string(step) + ", tile " + std::to_string(order[start + k]));
        loss_sum += losses[k];
      }
      auto grads = std::move(tile_grads[0]);
      for (std::size_t k = 1; k < b; ++k)
        for (std::size_t i = 0; i < grads.size(); ++i)
          for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += tile_grads[k][i][j];
      const T inv_b = T(1) / static_cast<T>(b);
      for (auto& g : grads)
        for (auto& x : g) x *= inv_b;
      const double lr = learning_rate(steps_per_epoch);
      adam_step(params_, grads, adam_, cfg_.adam, lr);
    }
    ++epoch_;
    return loss_sum / static_cast<double>(train.size());
  }

  /// Trains until config().epochs, validating after every epoch.
  void fit(const Dataset& data, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    while (epoch_ < cfg_.epochs) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.train_loss = train_epoch(data.train);
      const ValMetrics vm = validate(data.val, params_, cfg_);
      rec.epoch = epoch_;
      rec.val_loss = vm.loss;
      rec.val_rmse_m = vm.rmse_m;
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      history_.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
  }

  // -------------------------------------------------------------------------
  // checkpoints

  Container to_container() const {
    Container c;
    c.meta.emplace_back("kind", "checkpoint");
    c.meta.emplace_back("precision", std::is_same_v<T, float> ? "float" : "double");
    put_model_config(c, params_.config);
    c.meta.emplace_back("epoch", std::to_string(epoch_));
    c.meta.emplace_back("adam_step", std::to_string(adam_.t));
    c.meta.emplace_back("rng_state", rng_.state());
    put_params(c, params_);
    std::vector<ad::Shape> shapes;
    for (const auto& t : params_.tensors) shapes.push_back(t.shape);
    put_tensors(c, "adam.m/", params_.names, adam_.m, shapes);
    put_tensors(c, "adam.v/", params_.names, adam_.v, shapes);
    auto series = [&](const std::string& name, auto field) {
      Block b;
      b.name = name;
      b.dtype = 2;
      b.shape = {history_.size()};
      for (const auto& r : history_) b.values.push_back(r.*field);
      c.blocks.push_back(std::move(b));
    };
    series("history.train_loss", &EpochRecord::train_loss);
    series("history.val_loss", &EpochRecord::val_loss);
    series("history.val_rmse_m", &EpochRecord::val_rmse_m);
    return c;
  }

  void save_checkpoint(const std::string& path) const { write_container(to_container(), path); }

  /// Restores model, optimizer, RNG and history. Training config stays as
  /// given to the constructor (so epochs can be extended on resume).
  void restore(const Container& c) {
    if (c.meta_at("kind") != "checkpoint") throw FormatError("file is a bare model, not a training checkpoint");
    auto params = get_params<T>(c);
    auto adam = AdamState<T>::zeros_like(params);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      adam.m[i] = get_tensor<T>(c, "adam.m/" + params.names[i], params.tensors[i].shape);
      adam.v[i] = get_tensor<T>(c, "adam.v/" + params.names[i], params.tensors[i].shape);
    }
    try {
      adam.t = std::stoull(c.meta_at("adam_step"));
      epoch_ = std::stoull(c.meta_at("epoch"));
    } catch (const FormatError&) {
      throw;
    } catch (...) {
      throw FormatError("bad epoch/adam_step metadata");
    }
    Rng rng;
    try {
      rng.set_state(c.meta_at("rng_state"));
    } catch (const FormatError&) {
      throw;
    } catch (...) {
      throw FormatError("bad RNG state in checkpoint");
    }
    const auto& tl = c.block_at("history.train_loss").values;
    const auto& vl = c.block_at("history.val_loss").values;
    const auto& vr = c.block_at("history.val_rmse_m").values;
    if (tl.size() != vl.size() || tl.size() != vr.size()) throw FormatError("inconsistent loss history");
    std::vector<EpochRecord> hist;
    for (std::size_t i = 0; i < tl.size(); ++i) hist.push_back({i + 1, tl[i], vl[i], vr[i], 0.0});
    params_ = std::move(params);
    adam_ = std::move(adam);
    rng_ = rng;
    history_ = std::move(hist);
  }

  void load_checkpoint(const std::string& path) { restore(read_container(path)); }

 private:
  TrainConfig cfg_;
  ModelParams<T> params_;
  AdamState<T> adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::vector<EpochRecord> history_;
};

/// Model parameters from either a bare model file or a training checkpoint.
template <class T>
ModelParams<T> load_params(const std::string& path) {
  return get_params<T>(read_container(path));
}

// ---------------------------------------------------------------------------
// mask-ratio sweep

struct SweepRow {
  double mask_ratio = 0;
  DiffStats stats;
};

/// Pooled Δh statistics of interpolating every tile at `sparsity` (seeded
/// random hiding, measured cells kept).
template <class T>
DiffStats sparse_prediction_stats(const std::vector<GridTile>& tiles, const ModelParams<T>& params, double sparsity,
                                  std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < tiles.size(); ++i) seeds.push_back(rng.next_u64());
  std::vector<GridTile> outputs(tiles.size());
  parallel_for(tiles.size(), [&](std::size_t i) {
    const auto plan = make_mask(tiles[i].size(), sparsity, seeds[i], MaskStrategy::random, tiles[i].width());
    outputs[i] = infer(apply_mask(tiles[i], plan), params, true);
  });
  DiffAccumulator acc;
  for (std::size_t i = 0; i < tiles.size(); ++i)
    for (std::size_t k = 0; k < tiles[i].size(); ++k) acc.add(outputs[i].values[k] - tiles[i].values[k]);
  return acc.finish();
}

/// Trains one model per mask ratio (all other settings shared) and evaluates
/// each on the validation tiles at `eval_sparsity`.
template <class T>
std::vector<SweepRow> mask_ratio_sweep(const Dataset& data, const std::vector<double>& ratios,
                                       const ModelConfig& model_cfg, const TrainConfig& cfg, double eval_sparsity,
                                       std::vector<ModelParams<T>>* trained = nullptr,
                                       const std::function<void(double, const EpochRecord&)>& on_epoch = {}) {
  if (ratios.empty()) throw UsageError("mask-ratio sweep needs at least one ratio");
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    if (!(r >= 0 && r <= 1)) throw UsageError("mask ratio " + std::to_string(r) + " outside [0, 1]");
    TrainConfig c = cfg;
    c.mask_ratio = r;
    Trainer<T> trainer(model_cfg, c);
    trainer.fit(data, [&](const EpochRecord& rec) {
      if (on_epoch) on_epoch(r, rec);
    });
    rows.push_back({r, sparse_prediction_stats(data.val, trainer.params(), eval_sparsity, cfg.seed + 17)});
    if (trained) trained->push_back(trainer.params());
  }
  return rows;
}

}  // namespace terra
