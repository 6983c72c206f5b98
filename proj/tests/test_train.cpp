#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "support.hpp"
#include "terra/train.hpp"

using namespace terra;
namespace fs = std::filesystem;

namespace {

std::vector<GridTile> tiles(std::size_t n, std::size_t side, std::uint64_t seed = 100) {
  std::vector<GridTile> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_terrain(seed + i, side, 0.5, 150.0));
  return out;
}

TrainConfig small_config() {
  TrainConfig c;
  c.mask_ratio = 0.75;
  c.batch_size = 3;
  c.epochs = 2;
  c.adam.learning_rate = 1e-3;
  c.seed = 11;
  c.val_fraction = 0.25;
  return c;
}

std::string temp_path(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

TEST(Dataset, SplitArithmeticAndDeterminism) {
  auto t = tiles(100, 4);
  for (std::size_t i = 0; i < t.size(); ++i) t[i].values[0] = static_cast<double>(i) + 1000;  // identity tag
  const auto d = make_dataset(t, 0.11, 5);
  EXPECT_EQ(d.train.size(), 89u);
  EXPECT_EQ(d.val.size(), 11u);
  std::set<double> tr, va;
  for (const auto& x : d.train) tr.insert(x.values[0]);
  for (const auto& x : d.val) va.insert(x.values[0]);
  for (double v : va) EXPECT_FALSE(tr.count(v));
  EXPECT_EQ(tr.size() + va.size(), 100u);
  const auto e = make_dataset(t, 0.11, 5);
  for (std::size_t i = 0; i < 11; ++i) EXPECT_EQ(e.val[i].values, d.val[i].values);
}

TEST(Dataset, Errors) {
  auto t = tiles(4, 4);
  t[2].invalidate(3);
  try {
    make_dataset(t, 0.5, 0);
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("tile 2"), std::string::npos);
  }
  EXPECT_THROW(make_dataset(tiles(1, 4), 0.5, 0), EmptyInputError);
  EXPECT_THROW(make_dataset(tiles(4, 4), 1.0, 0), UsageError);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> p{1, -2, 3}, g(3, 0.0), m(3, 0.0), v(3, 0.0);
  adam_update<double>(p, g, m, v, 1, AdamConfig{}, 0.1);
  EXPECT_EQ(p, (std::vector<double>{1, -2, 3}));
}

TEST(Adam, ScalarQuadraticConverges) {
  std::vector<double> x{1.0}, g(1), m(1, 0.0), v(1, 0.0);
  for (std::uint64_t t = 1; t <= 200; ++t) {
    g[0] = 2 * x[0];
    adam_update<double>(x, g, m, v, t, AdamConfig{}, 0.1);
  }
  EXPECT_LT(std::abs(x[0]), 1e-3);
}

TEST(Adam, FirstStepIsLearningRate) {
  for (double scale : {1e-6, 1.0, 1e6}) {
    std::vector<double> x{0.0}, g{scale}, m(1, 0.0), v(1, 0.0);
    adam_update<double>(x, g, m, v, 1, AdamConfig{}, 0.01);
    EXPECT_NEAR(std::abs(x[0]), 0.01, 0.0005) << scale;
  }
}

TEST(Adam, MatchesHandRecurrence) {
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  std::vector<double> x{0.5, -0.25}, m(2, 0.0), v(2, 0.0);
  double ox[2] = {0.5, -0.25}, om[2] = {0, 0}, ov[2] = {0, 0};
  for (std::uint64_t t = 1; t <= 5; ++t) {
    std::vector<double> g{std::sin(double(t)), std::cos(double(t))};
    adam_update<double>(x, g, m, v, t, cfg, 0.01);
    for (int i = 0; i < 2; ++i) {
      om[i] = 0.9 * om[i] + 0.1 * g[i];
      ov[i] = 0.999 * ov[i] + 0.001 * g[i] * g[i];
      const double mh = om[i] / (1 - std::pow(0.9, double(t))), vh = ov[i] / (1 - std::pow(0.999, double(t)));
      ox[i] = ox[i] * (1 - 0.01 * 0.1) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(x[0], ox[0], 1e-12);
  EXPECT_NEAR(x[1], ox[1], 1e-12);
  std::vector<double> bad(1);
  EXPECT_THROW(adam_update<double>(x, bad, m, v, 1, cfg, 0.01), ShapeError);
  EXPECT_THROW(adam_update<double>(x, x, m, v, 0, cfg, 0.01), UsageError);
}

TEST(Trainer, DeterministicInDoublePrecision) {
  const auto d = make_dataset(tiles(12, 8), 0.25, 3);
  Trainer<double> a(ModelConfig::tiny(), small_config()), b(ModelConfig::tiny(), small_config());
  a.fit(d);
  b.fit(d);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.history()[i].train_loss, b.history()[i].train_loss);
    EXPECT_EQ(a.history()[i].val_loss, b.history()[i].val_loss);
  }
  for (std::size_t i = 0; i < a.params().tensors.size(); ++i)
    EXPECT_EQ(a.params().tensors[i].data, b.params().tensors[i].data);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  auto cfg = small_config();
  cfg.adam.learning_rate = 0;
  Trainer<double> t(ModelConfig::tiny(), cfg);
  const auto before = t.params().tensors;
  t.train_epoch(tiles(6, 8));
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(t.params().tensors[i].data, before[i].data);
}

TEST(Trainer, ValidationIsPureAndRepeatable) {
  const auto d = make_dataset(tiles(12, 8), 0.25, 3);
  Trainer<double> t(ModelConfig::tiny(), small_config());
  const auto before = t.params().tensors;
  const auto m1 = validate(d.val, t.params(), t.config());
  const auto m2 = validate(d.val, t.params(), t.config());
  EXPECT_EQ(m1.loss, m2.loss);
  EXPECT_EQ(m1.rmse_m, m2.rmse_m);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(t.params().tensors[i].data, before[i].data);
}

TEST(Trainer, FreshMasksEveryEpoch) {
  // Draw the same plans the trainer draws: shuffle, then one seed per tile.
  TrainConfig cfg = small_config();
  Rng rng(cfg.seed);
  std::vector<std::vector<std::size_t>> epochs;
  for (int e = 0; e < 2; ++e) {
    std::vector<std::size_t> order(6);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    epochs.push_back(make_mask(64, cfg.mask_ratio, rng.next_u64()).masked);
    for (int k = 1; k < 6; ++k) rng.next_u64();
  }
  EXPECT_NE(epochs[0], epochs[1]);
}

TEST(Trainer, NanLossIsFatalWithDiagnostic) {
  Trainer<double> t(ModelConfig::tiny(), small_config());
  t.params()["head.bias"].data[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    t.train_epoch(tiles(4, 8));
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos);
    EXPECT_NE(msg.find("step 0"), std::string::npos);
    EXPECT_NE(msg.find("tile"), std::string::npos);
  }
}

TEST(Trainer, FiniteGradientsForEveryParameter) {
  const auto p = terra::testing::jittered_params(ModelConfig::tiny(), 3);
  auto grads = p.zero_grads();
  tile_loss_and_grads(p, synth_terrain(1, 8, 0.5, 100), make_mask(64, 0.75, 1), LossConfig{}, &grads);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    double norm = 0;
    for (double g : grads[i]) {
      ASSERT_TRUE(std::isfinite(g)) << p.names[i];
      norm += g * g;
    }
    EXPECT_GT(norm, 0.0) << p.names[i];
  }
}

TEST(Trainer, ModelGradientMatchesFiniteDifferences) {
  const auto tile = synth_terrain(21, 8, 0.5, 100);
  for (auto domain : {SlopeDomain::normalized, SlopeDomain::meters}) {
    LossConfig loss;
    loss.slope_domain = domain;
    std::string worst;
    const double err = terra::testing::model_gradient_error(terra::testing::jittered_params(ModelConfig::tiny(), 5),
                                                            tile, make_mask(64, 0.75, 2), loss, 1, 8, 1e-5, &worst);
    EXPECT_LE(err, 1e-4) << worst;
  }
}

TEST(Checkpoint, ResumeContinuesTrajectory) {
  const auto d = make_dataset(tiles(10, 8), 0.2, 3);
  auto cfg = small_config();
  cfg.epochs = 5;
  Trainer<double> full(ModelConfig::tiny(), cfg);
  full.fit(d);

  cfg.epochs = 3;
  Trainer<double> first(ModelConfig::tiny(), cfg);
  first.fit(d);
  const auto path = temp_path("terra_resume.ckpt");
  first.save_checkpoint(path);
  cfg.epochs = 5;
  Trainer<double> resumed(ModelConfig::tiny(), cfg);
  resumed.load_checkpoint(path);
  EXPECT_EQ(resumed.epoch(), 3u);
  resumed.fit(d);
  for (std::size_t i = 0; i < full.params().tensors.size(); ++i)
    EXPECT_EQ(resumed.params().tensors[i].data, full.params().tensors[i].data);
  ASSERT_EQ(resumed.history().size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(resumed.history()[i].train_loss, full.history()[i].train_loss);
  fs::remove(path);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto d = make_dataset(tiles(6, 8), 0.3, 3);
  Trainer<float> t(ModelConfig::tiny(), small_config());
  t.fit(d);
  const auto a = temp_path("terra_a.ckpt"), b = temp_path("terra_b.ckpt");
  t.save_checkpoint(a);
  Trainer<float> u(ModelConfig::tiny(), small_config());
  u.load_checkpoint(a);
  u.save_checkpoint(b);
  auto bytes = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(bytes(a), bytes(b));
  for (std::size_t i = 0; i < t.params().tensors.size(); ++i)
    EXPECT_EQ(u.params().tensors[i].data, t.params().tensors[i].data);
  EXPECT_TRUE(u.rng() == t.rng());
  EXPECT_EQ(load_params<float>(a).tensors[3].data, t.params().tensors[3].data);
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, CorruptAndMismatchedFilesAreRejected) {
  Trainer<double> t(ModelConfig::tiny(), small_config());
  const auto path = temp_path("terra_bad.ckpt");
  t.save_checkpoint(path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary) << b; };
  Trainer<double> u(ModelConfig::tiny(), small_config());
  const auto before = u.params().tensors[0].data;
  write("NOTMAGIC" + bytes.substr(8));
  EXPECT_THROW(u.load_checkpoint(path), FormatError);
  EXPECT_EQ(u.params().tensors[0].data, before);
  write(bytes.substr(0, bytes.size() - 20));
  EXPECT_THROW(u.load_checkpoint(path), FormatError);
  auto version = bytes;
  version[8] = 99;
  write(version);
  EXPECT_THROW(u.load_checkpoint(path), FormatError);
  save_model(t.params(), path);
  EXPECT_THROW(u.load_checkpoint(path), FormatError);
  fs::remove(path);
}

TEST(Schedule, WarmupAndCosine) {
  auto cfg = small_config();
  cfg.lr_schedule = LrSchedule::cosine;
  cfg.warmup_steps = 4;
  cfg.epochs = 1;
  Trainer<double> t(ModelConfig::tiny(), cfg);
  EXPECT_NEAR(t.learning_rate(10), 1e-3 * 0.25, 1e-15);
  EXPECT_EQ(parse_lr_schedule("cosine"), LrSchedule::cosine);
  EXPECT_THROW(parse_lr_schedule("step"), UsageError);
}

TEST(Training, ToyRunHalvesLoss) {
  // 64 synthetic tiles at the desk-scale model size.
  TrainConfig cfg;
  cfg.mask_ratio = 0.75;
  cfg.batch_size = 4;
  cfg.adam.learning_rate = 1e-3;
  cfg.epochs = 20;
  cfg.seed = 2;
  const auto d = make_dataset(tiles(64, 32, 500), cfg.val_fraction, cfg.seed);
  Trainer<float> t(ModelConfig::toy(), cfg);
  const auto untrained = validate(d.val, t.params(), cfg);
  t.fit(d);
  EXPECT_LT(t.history().back().train_loss, 0.5 * t.history().front().train_loss);
  EXPECT_LE(t.history().back().val_rmse_m, untrained.rmse_m);
}

TEST(Sweep, RowsPerRatio) {
  const auto d = make_dataset(tiles(8, 8), 0.25, 3);
  auto cfg = small_config();
  cfg.epochs = 1;
  std::vector<ModelParams<double>> models;
  const auto rows = mask_ratio_sweep<double>(d, {0.5, 0.9}, ModelConfig::tiny(), cfg, 0.9, &models);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(models.size(), 2u);
  EXPECT_EQ(rows[1].mask_ratio, 0.9);
  EXPECT_GT(rows[0].stats.rmse, 0.0);
  EXPECT_NEAR(rows[0].stats.rmse * rows[0].stats.rmse,
              rows[0].stats.mean * rows[0].stats.mean + rows[0].stats.std * rows[0].stats.std, 1e-9);
  EXPECT_THROW(mask_ratio_sweep<double>(d, {}, ModelConfig::tiny(), cfg, 0.9), UsageError);
  EXPECT_THROW(mask_ratio_sweep<double>(d, {1.5}, ModelConfig::tiny(), cfg, 0.9), UsageError);
}

}  // namespace
