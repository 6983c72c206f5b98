#pragma once

// Masked grid transformer: per-grid linear embedding, 2-D sin-cos positions,
// a pre-norm ViT encoder over visible grids only, a shared learnable mask
// token scattered back at hidden grids, a ViT decoder over all grids and a
// one-unit elevation head.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "terra/autodiff.hpp"
#include "terra/container.hpp"
#include "terra/error.hpp"
#include "terra/mask.hpp"
#include "terra/random.hpp"
#include "terra/raster.hpp"

namespace terra {

struct ModelConfig {
  std::size_t tile_side = 32;
  std::size_t enc_depth = 12;
  std::size_t enc_dim = 768;
  std::size_t dec_depth = 12;
  std::size_t dec_dim = 768;
  std::size_t heads = 12;
  std::size_t mlp_ratio = 4;

  std::size_t tokens() const { return tile_side * tile_side; }

  void validate() const {
    if (tile_side < 2) throw UsageError("tile_side must be >= 2");
    if (heads == 0) throw UsageError("heads must be >= 1");
    if (enc_dim % heads || dec_dim % heads) throw UsageError("enc_dim and dec_dim must be divisible by heads");
    if (enc_dim % 4 || dec_dim % 4) throw UsageError("embedding dims must be divisible by 4");
    if (mlp_ratio == 0) throw UsageError("mlp_ratio must be >= 1");
  }

  /// 12 blocks of width 768 on both sides.
  static ModelConfig base() { return {}; }
  /// Desk-scale model used for training experiments.
  static ModelConfig toy() { return {32, 4, 64, 4, 64, 4, 4}; }
  /// Smallest useful config, for gradient checks.
  static ModelConfig tiny() { return {8, 2, 32, 2, 32, 2, 4}; }

  static ModelConfig preset(const std::string& name) {
    if (name == "base") return base();
    if (name == "toy") return toy();
    if (name == "tiny") return tiny();
    throw UsageError("unknown model preset '" + name + "' (expected base, toy or tiny)");
  }

  std::vector<std::pair<std::string, std::string>> to_pairs() const {
    return {{"tile_side", std::to_string(tile_side)}, {"enc_depth", std::to_string(enc_depth)},
            {"enc_dim", std::to_string(enc_dim)},     {"dec_depth", std::to_string(dec_depth)},
            {"dec_dim", std::to_string(dec_dim)},     {"heads", std::to_string(heads)},
            {"mlp_ratio", std::to_string(mlp_ratio)}};
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Fixed sin-cos table [side·side, dim]: the first half encodes the grid row,
/// the second half the grid column, each as [sin(p·ω_k)..., cos(p·ω_k)...]
/// with ω_k = 10000^(−k/(dim/4)).
inline std::vector<double> pos_embed_2d(std::size_t side, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) throw UsageError("positional embedding dim must be divisible by 4");
  const std::size_t quarter = dim / 4;
  std::vector<double> table(side * side * dim);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      double* row = table.data() + (r * side + c) * dim;
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(quarter));
        row[k] = std::sin(static_cast<double>(r) * omega);
        row[quarter + k] = std::cos(static_cast<double>(r) * omega);
        row[2 * quarter + k] = std::sin(static_cast<double>(c) * omega);
        row[3 * quarter + k] = std::cos(static_cast<double>(c) * omega);
      }
    }
  return table;
}

enum class Init { normal, zeros, ones };

struct ParamSpec {
  std::string name;
  ad::Shape shape;
  Init init;
};

inline void append_block_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t dim,
                               std::size_t mlp_ratio) {
  const std::size_t hidden = dim * mlp_ratio;
  out.push_back({prefix + ".ln1.gamma", {dim}, Init::ones});
  out.push_back({prefix + ".ln1.beta", {dim}, Init::zeros});
  out.push_back({prefix + ".attn.qkv.weight", {dim, 3 * dim}, Init::normal});
  out.push_back({prefix + ".attn.qkv.bias", {3 * dim}, Init::zeros});
  out.push_back({prefix + ".attn.proj.weight", {dim, dim}, Init::normal});
  out.push_back({prefix + ".attn.proj.bias", {dim}, Init::zeros});
  out.push_back({prefix + ".ln2.gamma", {dim}, Init::ones});
  out.push_back({prefix + ".ln2.beta", {dim}, Init::zeros});
  out.push_back({prefix + ".mlp.fc1.weight", {dim, hidden}, Init::normal});
  out.push_back({prefix + ".mlp.fc1.bias", {hidden}, Init::zeros});
  out.push_back({prefix + ".mlp.fc2.weight", {hidden, dim}, Init::normal});
  out.push_back({prefix + ".mlp.fc2.bias", {dim}, Init::zeros});
}

/// Every learnable tensor, in serialization order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  std::vector<ParamSpec> s;
  s.push_back({"embed.weight", {1, cfg.enc_dim}, Init::normal});
  s.push_back({"embed.bias", {cfg.enc_dim}, Init::zeros});
  for (std::size_t i = 0; i < cfg.enc_depth; ++i)
    append_block_specs(s, "enc." + std::to_string(i), cfg.enc_dim, cfg.mlp_ratio);
  s.push_back({"enc.norm.gamma", {cfg.enc_dim}, Init::ones});
  s.push_back({"enc.norm.beta", {cfg.enc_dim}, Init::zeros});
  s.push_back({"dec.embed.weight", {cfg.enc_dim, cfg.dec_dim}, Init::normal});
  s.push_back({"dec.embed.bias", {cfg.dec_dim}, Init::zeros});
  s.push_back({"mask_token", {cfg.dec_dim}, Init::normal});
  for (std::size_t i = 0; i < cfg.dec_depth; ++i)
    append_block_specs(s, "dec." + std::to_string(i), cfg.dec_dim, cfg.mlp_ratio);
  s.push_back({"dec.norm.gamma", {cfg.dec_dim}, Init::ones});
  s.push_back({"dec.norm.beta", {cfg.dec_dim}, Init::zeros});
  s.push_back({"head.weight", {cfg.dec_dim, 1}, Init::normal});
  s.push_back({"head.bias", {1}, Init::zeros});
  return s;
}

inline std::size_t param_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& p : param_specs(cfg)) n += ad::numel(p.shape);
  return n;
}

template <class T>
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<ad::Tensor<T>> tensors;
  std::vector<T> pos_enc;  // [N, enc_dim], fixed
  std::vector<T> pos_dec;  // [N, dec_dim], fixed

  std::size_t index(const std::string& name) const {
    const auto it = lookup_.find(name);
    if (it == lookup_.end()) throw ShapeError("unknown parameter '" + name + "'");
    return it->second;
  }
  ad::Tensor<T>& operator[](const std::string& name) { return tensors[index(name)]; }
  const ad::Tensor<T>& operator[](const std::string& name) const { return tensors[index(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  /// Zeroed gradient buffers aligned with `tensors`.
  std::vector<std::vector<T>> zero_grads() const {
    std::vector<std::vector<T>> g;
    g.reserve(tensors.size());
    for (const auto& t : tensors) g.emplace_back(t.numel(), T(0));
    return g;
  }

  /// Skeleton with all tensors allocated and zero, plus the positional tables.
  static ModelParams allocate(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    for (auto& spec : param_specs(cfg)) {
      p.names.push_back(spec.name);
      p.tensors.push_back(ad::Tensor<T>::zeros(spec.shape, false));
    }
    const auto pe = pos_embed_2d(cfg.tile_side, cfg.enc_dim);
    const auto pd = pos_embed_2d(cfg.tile_side, cfg.dec_dim);
    p.pos_enc.assign(pe.begin(), pe.end());
    p.pos_dec.assign(pd.begin(), pd.end());
    for (std::size_t i = 0; i < p.names.size(); ++i) p.lookup_[p.names[i]] = i;
    return p;
  }

 private:
  std::unordered_map<std::string, std::size_t> lookup_;
};

/// Truncated normal (std 0.02) weights and mask token, zero biases and
/// layer-norm betas, unit layer-norm gammas.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = ModelParams<T>::allocate(cfg);
  Rng rng(seed);
  const auto specs = param_specs(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& data = p.tensors[i].data;
    switch (specs[i].init) {
      case Init::normal:
        for (auto& x : data) x = static_cast<T>(rng.truncated_normal(0.02));
        break;
      case Init::zeros:
        std::fill(data.begin(), data.end(), T(0));
        break;
      case Init::ones:
        std::fill(data.begin(), data.end(), T(1));
        break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// graph construction

/// Binds a ModelParams to a tape for one forward pass. With `grads` the
/// parameters become differentiable leaves whose gradients are added into
/// the matching buffer; without, they are recorded as constants.
template <class T>
class ModelGraph {
 public:
  ModelGraph(ad::Tape<T>& tape, const ModelParams<T>& params, std::vector<std::vector<T>>* grads = nullptr)
      : tape_(tape), params_(params), grads_(grads), bound_(params.tensors.size()) {
    if (grads && grads->size() != params.tensors.size()) throw ShapeError("gradient buffer count mismatch");
  }

  ad::Tape<T>& tape() { return tape_; }
  const ModelConfig& config() const { return params_.config; }
  const ModelParams<T>& params() const { return params_; }

  ad::Var<T> p(const std::string& name) {
    const std::size_t i = params_.index(name);
    if (!bound_[i]) {
      const auto& t = params_.tensors[i];
      bound_[i] = grads_ ? tape_.leaf(t, &(*grads_)[i]) : tape_.constant(t);
    }
    return *bound_[i];
  }

 private:
  ad::Tape<T>& tape_;
  const ModelParams<T>& params_;
  std::vector<std::vector<T>>* grads_;
  std::vector<std::optional<ad::Var<T>>> bound_;
};

template <class T>
ad::Var<T> transformer_block(ModelGraph<T>& g, ad::Var<T> x, const std::string& prefix) {
  using namespace ad;
  const std::size_t heads = g.config().heads;

  auto y = layer_norm(x, g.p(prefix + ".ln1.gamma"), g.p(prefix + ".ln1.beta"));
  auto qkv = linear(y, g.p(prefix + ".attn.qkv.weight"), g.p(prefix + ".attn.qkv.bias"));
  auto merged = attention(qkv, heads);
  x = add(x, linear(merged, g.p(prefix + ".attn.proj.weight"), g.p(prefix + ".attn.proj.bias")));

  auto z = layer_norm(x, g.p(prefix + ".ln2.gamma"), g.p(prefix + ".ln2.beta"));
  z = gelu(linear(z, g.p(prefix + ".mlp.fc1.weight"), g.p(prefix + ".mlp.fc1.bias")));
  z = linear(z, g.p(prefix + ".mlp.fc2.weight"), g.p(prefix + ".mlp.fc2.bias"));
  return add(x, z);
}

/// Per-grid 1→enc_dim linear embedding of N normalized values (row-major).
template <class T>
ad::Var<T> grid_embed(ModelGraph<T>& g, std::span<const T> values) {
  if (values.size() != g.config().tokens())
    throw ShapeError("grid_embed: expected " + std::to_string(g.config().tokens()) + " values, got " +
                     std::to_string(values.size()));
  auto x = g.tape().constant(ad::Shape{values.size(), 1}, std::vector<T>(values.begin(), values.end()));
  return ad::linear(x, g.p("embed.weight"), g.p("embed.bias"));
}

template <class T>
ad::Var<T> add_positions(ModelGraph<T>& g, ad::Var<T> tokens, const std::vector<T>& table) {
  return ad::add(tokens, g.tape().constant(tokens.shape(), table));
}

/// Visible tokens [N, enc_dim] (embedding plus positions) → latent [N_vis, enc_dim].
template <class T>
ad::Var<T> encode(ModelGraph<T>& g, ad::Var<T> tokens, const MaskPlan& plan) {
  const auto& cfg = g.config();
  if (tokens.shape() != ad::Shape{cfg.tokens(), cfg.enc_dim}) throw ShapeError("encode: token shape mismatch");
  if (plan.n_tokens != cfg.tokens()) throw ShapeError("encode: plan does not match tile size");
  if (plan.n_visible() == 0) throw EmptyInputError("encode: no visible grids");
  auto x = ad::gather_rows(tokens, plan.visible());
  for (std::size_t i = 0; i < cfg.enc_depth; ++i) x = transformer_block(g, x, "enc." + std::to_string(i));
  return ad::layer_norm(x, g.p("enc.norm.gamma"), g.p("enc.norm.beta"));
}

/// latent [N_vis, enc_dim] → per-grid normalized elevation [N].
template <class T>
ad::Var<T> decode(ModelGraph<T>& g, ad::Var<T> latent, const MaskPlan& plan) {
  const auto& cfg = g.config();
  if (latent.shape().size() != 2 || latent.shape()[0] != plan.n_visible() || latent.shape()[1] != cfg.enc_dim)
    throw ShapeError("decode: latent shape " + ad::to_string(latent.shape()) + " does not match plan");
  const std::size_t n = cfg.tokens();
  auto x = ad::linear(latent, g.p("dec.embed.weight"), g.p("dec.embed.bias"));
  x = ad::scatter_rows(x, plan.visible(), n, g.p("mask_token"));
  x = add_positions(g, x, g.params().pos_dec);
  for (std::size_t i = 0; i < cfg.dec_depth; ++i) x = transformer_block(g, x, "dec." + std::to_string(i));
  x = ad::layer_norm(x, g.p("dec.norm.gamma"), g.p("dec.norm.beta"));
  x = ad::linear(x, g.p("head.weight"), g.p("head.bias"));
  return ad::reshape(x, ad::Shape{n});
}

/// Embedding, encoding and decoding of one normalized tile. Values at hidden
/// grids are never read.
template <class T>
ad::Var<T> predict_normalized(ModelGraph<T>& g, std::span<const T> values, const MaskPlan& plan) {
  std::vector<T> v(values.begin(), values.end());
  for (auto i : plan.masked) v.at(i) = T(0);
  auto tokens = add_positions(g, grid_embed(g, std::span<const T>(v)), g.params().pos_enc);
  return decode(g, encode(g, tokens, plan), plan);
}

/// Normalization of a tile by the statistics of the plan's visible cells.
/// Hidden cells map to 0 in `input`; `target` holds every cell (for training).
template <class T>
struct PreparedTile {
  NormStats stats;
  std::vector<T> input;
  std::vector<T> target;
};

template <class T>
PreparedTile<T> prepare_tile(const GridTile& tile, const MaskPlan& plan) {
  if (plan.n_tokens != tile.size()) throw GeometryError("mask plan does not match tile size");
  const GridTile visible = apply_mask(tile, plan);
  PreparedTile<T> out;
  out.stats = norm_stats(visible);
  out.input.assign(tile.size(), T(0));
  out.target.assign(tile.size(), T(0));
  for (std::size_t i = 0; i < tile.size(); ++i) {
    if (tile.is_valid(i)) out.target[i] = static_cast<T>((tile.values[i] - out.stats.shift) / out.stats.scale);
    if (visible.is_valid(i)) out.input[i] = out.target[i];
  }
  return out;
}

inline void check_tile_geometry(const GridTile& tile, const ModelConfig& cfg) {
  if (tile.width() != cfg.tile_side || tile.height() != cfg.tile_side)
    throw GeometryError("tile is " + std::to_string(tile.width()) + "x" + std::to_string(tile.height()) +
                        ", model expects " + std::to_string(cfg.tile_side) + "x" + std::to_string(cfg.tile_side));
}

/// Full reconstruction of `tile` from the cells the plan leaves visible.
template <class T>
GridTile forward(const GridTile& tile, const MaskPlan& plan, const ModelParams<T>& params) {
  check_tile_geometry(tile, params.config);
  const auto prep = prepare_tile<T>(tile, plan);
  ad::Tape<T> tape;
  ModelGraph<T> g(tape, params);
  const auto pred = predict_normalized(g, std::span<const T>(prep.input), plan).value();
  GridTile out(tile.geometry);
  out.nodata = tile.nodata;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.set(i, static_cast<double>(pred[i]) * prep.stats.scale + prep.stats.shift);
  return out;
}

/// Interpolates the invalid cells of a sparse tile. With `overwrite_visible`
/// measured cells keep their measured values.
template <class T>
GridTile infer(const GridTile& sparse_tile, const ModelParams<T>& params, bool overwrite_visible = true) {
  const MaskPlan plan = mask_from_tile(sparse_tile);
  GridTile out = forward(sparse_tile, plan, params);
  if (overwrite_visible)
    for (std::size_t i = 0; i < out.size(); ++i)
      if (sparse_tile.is_valid(i)) out.values[i] = sparse_tile.values[i];
  return out;
}

// ---------------------------------------------------------------------------
// persistence

inline void put_model_config(Container& c, const ModelConfig& cfg) {
  for (auto& [k, v] : cfg.to_pairs()) c.meta.emplace_back("model." + k, v);
}

inline ModelConfig get_model_config(const Container& c) {
  auto num = [&](const std::string& k) {
    const auto& v = c.meta_at("model." + k);
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (...) {
      throw FormatError("bad model." + k + " value '" + v + "'");
    }
  };
  ModelConfig cfg{num("tile_side"), num("enc_depth"), num("enc_dim"), num("dec_depth"),
                  num("dec_dim"),   num("heads"),     num("mlp_ratio")};
  cfg.validate();
  return cfg;
}

template <class T>
void put_tensors(Container& c, const std::string& prefix, const std::vector<std::string>& names,
                 const std::vector<std::vector<T>>& data, const std::vector<ad::Shape>& shapes) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    Block b;
    b.name = prefix + names[i];
    b.dtype = dtype_code<T>();
    for (auto d : shapes[i]) b.shape.push_back(d);
    b.values.assign(data[i].begin(), data[i].end());
    c.blocks.push_back(std::move(b));
  }
}

template <class T>
std::vector<T> get_tensor(const Container& c, const std::string& name, const ad::Shape& shape) {
  const Block& b = c.block_at(name);
  if (b.shape.size() != shape.size() || !std::equal(shape.begin(), shape.end(), b.shape.begin()))
    throw FormatError("block '" + name + "' has shape that disagrees with the model config");
  return std::vector<T>(b.values.begin(), b.values.end());
}

template <class T>
void put_params(Container& c, const ModelParams<T>& p) {
  std::vector<std::vector<T>> data;
  std::vector<ad::Shape> shapes;
  for (const auto& t : p.tensors) {
    data.push_back(t.data);
    shapes.push_back(t.shape);
  }
  put_tensors(c, "param/", p.names, data, shapes);
}

template <class T>
ModelParams<T> get_params(const Container& c) {
  auto p = ModelParams<T>::allocate(get_model_config(c));
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    p.tensors[i].data = get_tensor<T>(c, "param/" + p.names[i], p.tensors[i].shape);
  return p;
}

template <class T>
void save_model(const ModelParams<T>& p, const std::string& path) {
  Container c;
  c.meta.emplace_back("kind", "model");
  put_model_config(c, p.config);
  put_params(c, p);
  write_container(c, path);
}

template <class T>
ModelParams<T> load_model(const std::string& path) {
  return get_params<T>(read_container(path));
}

}  // namespace terra
