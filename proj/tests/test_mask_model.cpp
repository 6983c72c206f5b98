#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "support.hpp"
#include "terra/mask.hpp"
#include "terra/model.hpp"

using namespace terra;
using terra::testing::jittered_params;

namespace {

GridTile tiny_tile(std::uint64_t seed) { return synth_terrain(seed, 8, 0.6, 300.0); }

TEST(Mask, RoundingRuleAndDistinctness) {
  const auto p = make_mask(1024, 0.95, 7);
  EXPECT_EQ(p.masked.size(), 973u);
  EXPECT_EQ(std::set<std::size_t>(p.masked.begin(), p.masked.end()).size(), 973u);
  EXPECT_TRUE(std::is_sorted(p.masked.begin(), p.masked.end()));
  EXPECT_LT(p.masked.back(), 1024u);
  EXPECT_EQ(p.masked.size() + p.n_visible(), 1024u);
  EXPECT_TRUE(make_mask(1024, 0.0, 7).masked.empty());
  EXPECT_EQ(make_mask(1024, 1.0, 7).masked.size(), 1024u);
  EXPECT_THROW(make_mask(10, 1.5, 0), UsageError);
  EXPECT_THROW(make_mask(10, -0.1, 0), UsageError);
}

TEST(Mask, DeterministicPerSeed) {
  EXPECT_EQ(make_mask(1024, 0.75, 3).masked, make_mask(1024, 0.75, 3).masked);
  EXPECT_NE(make_mask(1024, 0.75, 3).masked, make_mask(1024, 0.75, 4).masked);
}

TEST(Mask, RandomIsRoughlyUniformOverPositions) {
  std::vector<int> hits(64, 0);
  for (std::uint64_t s = 0; s < 2000; ++s)
    for (auto i : make_mask(64, 0.5, s).masked) ++hits[i];
  for (int h : hits) EXPECT_NEAR(h, 1000, 150);
}

TEST(Mask, UniformLeavesRegularLattice) {
  const auto p = make_mask(1024, 0.9, 0, MaskStrategy::uniform, 32);
  const auto vis = p.visible();
  ASSERT_GE(vis.size(), 103u);  // ceil(0.1 * 1024)
  std::set<std::size_t> rows, cols;
  for (auto i : vis) rows.insert(i / 32), cols.insert(i % 32);
  EXPECT_EQ(rows.size() * cols.size(), vis.size());  // full cartesian product
  auto spacing = [](const std::set<std::size_t>& s) {
    std::set<std::size_t> d;
    for (auto it = std::next(s.begin()); it != s.end(); ++it) d.insert(*it - *std::prev(it));
    return d;
  };
  EXPECT_EQ(spacing(rows).size(), 1u);
  EXPECT_EQ(spacing(cols).size(), 1u);
  EXPECT_EQ(spacing(rows), spacing(cols));
}

TEST(Mask, FromTile) {
  auto t = tiny_tile(1);
  EXPECT_TRUE(mask_from_tile(t).masked.empty());
  t.invalidate(0);
  const auto p = mask_from_tile(t);
  EXPECT_EQ(p.masked, std::vector<std::size_t>{0});
  EXPECT_EQ(p.ratio, sparsity(t));
  EXPECT_THROW(mask_from_tile(GridTile(t.geometry)), EmptyInputError);
}

TEST(PosEmbed, OriginAndUniqueness) {
  const auto t = pos_embed_2d(8, 16);
  // [sin row | cos row | sin col | cos col], four components each
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(t[k], (k / 4) % 2 == 0 ? 0.0 : 1.0);
  const auto big = pos_embed_2d(64, 32);
  std::set<std::vector<double>> rows;
  for (std::size_t i = 0; i < 64 * 64; ++i) rows.insert(std::vector<double>(big.begin() + i * 32, big.begin() + (i + 1) * 32));
  EXPECT_EQ(rows.size(), 4096u);
  EXPECT_EQ(pos_embed_2d(8, 16), t);
  EXPECT_THROW(pos_embed_2d(8, 18), UsageError);
}

TEST(Model, ParamCountIsPureFunctionOfConfig) {
  const auto cfg = ModelConfig::tiny();
  EXPECT_EQ(param_count(cfg), init_params<double>(cfg, 1).scalar_count());
  EXPECT_EQ(param_count(cfg), init_params<float>(cfg, 2).scalar_count());
  // embed (2D) + 2 encoder blocks + norm + projection + token + 2 decoder blocks + norm + head
  const std::size_t d = 32, block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
  EXPECT_EQ(param_count(cfg), 2 * d + 2 * block + 2 * d + (d * d + d) + d + 2 * block + 2 * d + d + 1);
}

TEST(Model, GridEmbedIsPerCellLinear) {
  auto p = init_params<double>(ModelConfig::tiny(), 1);
  std::vector<double> v(64);
  for (std::size_t i = 0; i < 64; ++i) v[i] = 0.1 * static_cast<double>(i) - 2;
  ad::Tape<double> tape;
  ModelGraph<double> g(tape, p);
  const auto tok = grid_embed(g, std::span<const double>(v)).value();
  const auto& w = p["embed.weight"].data;
  const auto& b = p["embed.bias"].data;
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(tok[i * 32 + k], v[i] * w[k] + b[k], 1e-15);
  std::fill(p["embed.weight"].data.begin(), p["embed.weight"].data.end(), 0.0);
  ad::Tape<double> t2;
  ModelGraph<double> g2(t2, p);
  for (double x : grid_embed(g2, std::span<const double>(v)).value()) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(grid_embed(g2, std::span<const double>(v.data(), 10)), ShapeError);
}

TEST(Model, ShapesFollowPlan) {
  const auto p = jittered_params(ModelConfig::tiny(), 2);
  for (double ratio : {0.0, 0.5, 0.95}) {
    const auto plan = make_mask(64, ratio, 3);
    ad::Tape<double> tape;
    ModelGraph<double> g(tape, p);
    std::vector<double> v(64, 0.5);
    auto tokens = add_positions(g, grid_embed(g, std::span<const double>(v)), p.pos_enc);
    auto latent = encode(g, tokens, plan);
    EXPECT_EQ(latent.shape(), (ad::Shape{plan.n_visible(), 32}));
    EXPECT_EQ(decode(g, latent, plan).shape(), ad::Shape{64});
  }
  ad::Tape<double> tape;
  ModelGraph<double> g(tape, p);
  std::vector<double> v(64, 0.5);
  auto tokens = add_positions(g, grid_embed(g, std::span<const double>(v)), p.pos_enc);
  EXPECT_THROW(encode(g, tokens, make_mask(64, 1.0, 0)), EmptyInputError);
  auto latent = encode(g, tokens, make_mask(64, 0.5, 0));
  EXPECT_THROW(decode(g, latent, make_mask(64, 0.25, 0)), ShapeError);
}

TEST(Model, EncoderIsPermutationEquivariant) {
  const auto p = jittered_params(ModelConfig::tiny(), 4);
  const auto plan = make_mask(64, 0.0, 0);
  Rng rng(9);
  std::vector<double> v(64);
  for (auto& x : v) x = rng.normal();
  ad::Tape<double> tape;
  ModelGraph<double> g(tape, p);
  auto tokens = add_positions(g, grid_embed(g, std::span<const double>(v)), p.pos_enc);
  const auto base = encode(g, tokens, plan).value();
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  auto permuted = ad::gather_rows(tokens, perm);
  auto out = encode(g, permuted, plan).value();
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(out[i * 32 + k], base[perm[i] * 32 + k], 1e-12);
}

TEST(Model, MaskedCellsAreNeverRead) {
  const auto p = jittered_params(ModelConfig::tiny(), 5);
  const auto tile = tiny_tile(3);
  const auto plan = make_mask(64, 0.75, 11);
  const auto a = forward(tile, plan, p);
  auto t2 = tile;
  for (auto i : plan.masked) t2.values[i] += 1e4 * static_cast<double>(i % 7) - 3e4;
  EXPECT_EQ(forward(t2, plan, p).values, a.values);
}

TEST(Model, MaskedPositionsDifferAndTokenGetsGradient) {
  const auto p = jittered_params(ModelConfig::tiny(), 6);
  const auto tile = tiny_tile(4);
  const auto plan = make_mask(64, 0.5, 2);
  const auto out = forward(tile, plan, p);
  EXPECT_NE(out.values[plan.masked[0]], out.values[plan.masked[1]]);
  auto grads = p.zero_grads();
  tile_loss_and_grads(p, tile, plan, LossConfig{}, &grads);
  const auto& gm = grads[p.index("mask_token")];
  EXPECT_GT(std::inner_product(gm.begin(), gm.end(), gm.begin(), 0.0), 0.0);
}

TEST(Model, ForwardShiftAndScaleInvariance) {
  const auto p = jittered_params(ModelConfig::tiny(), 7);
  const auto tile = tiny_tile(5);
  const auto plan = make_mask(64, 0.75, 1);
  const auto base = forward(tile, plan, p);
  EXPECT_TRUE(base.fully_valid());
  auto shifted = tile, scaled = tile;
  for (auto& v : shifted.values) v += 1000.0;
  for (auto& v : scaled.values) v *= 2.0;
  const auto fs = forward(shifted, plan, p), fx = forward(scaled, plan, p);
  const double mean = norm_stats(apply_mask(tile, plan)).shift;
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_NEAR(fs.values[i], base.values[i] + 1000.0, 1e-9);
    EXPECT_NEAR(fx.values[i] - 2 * mean, 2 * (base.values[i] - mean), 1e-9);
  }
}

TEST(Model, InferOverwriteContract) {
  const auto p = jittered_params(ModelConfig::tiny(), 8);
  const auto full = tiny_tile(6);
  EXPECT_EQ(infer(full, p, true).values, full.values);
  const auto sparse = apply_mask(full, make_mask(64, 0.8, 5));
  const auto a = infer(sparse, p, true), b = infer(sparse, p, false);
  EXPECT_TRUE(a.fully_valid());
  const auto recon = forward(sparse, mask_from_tile(sparse), p);
  for (std::size_t i = 0; i < 64; ++i) {
    if (sparse.is_valid(i)) {
      EXPECT_EQ(a.values[i], sparse.values[i]);
      EXPECT_EQ(b.values[i], recon.values[i]);
    } else {
      EXPECT_EQ(a.values[i], b.values[i]);
    }
  }
  EXPECT_THROW(infer(GridTile(full.geometry), p), EmptyInputError);
  EXPECT_THROW(infer(synth_terrain(1, 9, 0.5, 10), p), GeometryError);
}

TEST(Model, SerializationRoundTripIsBitExact) {
  const auto p = jittered_params(ModelConfig::tiny(), 9);
  const auto path = (std::filesystem::temp_directory_path() / "terra_model_rt.bin").string();
  save_model(p, path);
  const auto q = load_model<double>(path);
  ASSERT_EQ(q.names, p.names);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) EXPECT_EQ(q.tensors[i].data, p.tensors[i].data);
  EXPECT_TRUE(q.config == p.config);
  const auto sparse = apply_mask(tiny_tile(7), make_mask(64, 0.9, 1));
  EXPECT_EQ(infer(sparse, q).values, infer(sparse, p).values);
  std::filesystem::remove(path);
}

TEST(Model, CorruptFilesAreRejected) {
  const auto p = init_params<float>(ModelConfig::tiny(), 1);
  const auto path = (std::filesystem::temp_directory_path() / "terra_model_bad.bin").string();
  save_model(p, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary) << b; };
  write("XXXX" + bytes.substr(4));
  EXPECT_THROW(load_model<float>(path), FormatError);
  write(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_model<float>(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Model, ConfigValidation) {
  ModelConfig c = ModelConfig::tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_THROW(ModelConfig::preset("huge"), UsageError);
  EXPECT_EQ(ModelConfig::preset("toy").enc_depth, 4u);
  EXPECT_EQ(ModelConfig::base().enc_dim, 768u);
}

}  // namespace
