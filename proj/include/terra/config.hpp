#pragma once

// Flat `key = value` run configuration. Lines starting with '#' are comments;
// unknown keys are errors. Every setting the pipeline reads lives here so a
// resolved file reproduces a run.

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "terra/baselines.hpp"
#include "terra/eval.hpp"
#include "terra/inference.hpp"
#include "terra/model.hpp"
#include "terra/raster.hpp"
#include "terra/train.hpp"

namespace terra {

struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
  std::string precision = "float";  // float | double
  bool log_wall_seconds = false;

  // inference
  InferOptions infer;

  // baselines
  std::size_t interp_k = 32;
  double idw_power = 2.0;
  std::size_t nn_supersample = 4;
  VariogramKind variogram = VariogramKind::exponential;
  std::size_t variogram_bins = 12;

  // evaluation
  std::vector<double> thresholds = default_stream_thresholds();
  FnMode fn_mode = FnMode::symmetric;

  // sweeps
  std::vector<double> mask_ratios = {0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98};
  std::vector<double> sparsity_levels = {0.3, 0.5, 0.7, 0.9, 0.95};
  double eval_sparsity = 0.95;

  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const {
    model.validate();
    train.validate();
    if (precision != "float" && precision != "double") throw UsageError("precision must be float or double");
    check_thresholds(thresholds);
  }
};

namespace detail {

inline std::string trim_copy(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& key, const std::string& v) {
  const auto d = parse_double(v);
  if (!d || !std::isfinite(*d)) throw UsageError("'" + key + "' expects a number, got '" + v + "'");
  return *d;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const double d = parse_number(key, v);
  if (d < 0 || d != std::floor(d) || d > 9.0e15) throw UsageError("'" + key + "' expects a whole number, got '" + v + "'");
  return static_cast<std::size_t>(d);
}

inline std::uint64_t parse_seed(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto s = std::stoull(v, &pos);
    if (pos == v.size() && v.find('-') == std::string::npos) return s;
  } catch (...) {
  }
  throw UsageError("'" + key + "' expects a non-negative integer, got '" + v + "'");
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("'" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim_copy(item);
    if (item.empty()) throw UsageError("'" + key + "' has an empty list entry");
    out.push_back(parse_number(key, item));
  }
  if (out.empty()) throw UsageError("'" + key + "' must list at least one value");
  return out;
}

inline std::string format_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

struct ConfigKey {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using R = RunConfig;
  using S = const std::string&;
  auto num = [](double v) { return format_double(v); };
  auto cnt = [](std::size_t v) { return std::to_string(v); };
  static const std::vector<ConfigKey> keys = {
      {"precision", [](R& c, S v) { c.precision = v; }, [](const R& c) { return c.precision; }},
      {"tile_side", [](R& c, S v) { c.model.tile_side = parse_count("tile_side", v); },
       [=](const R& c) { return cnt(c.model.tile_side); }},
      {"enc_depth", [](R& c, S v) { c.model.enc_depth = parse_count("enc_depth", v); },
       [=](const R& c) { return cnt(c.model.enc_depth); }},
      {"enc_dim", [](R& c, S v) { c.model.enc_dim = parse_count("enc_dim", v); },
       [=](const R& c) { return cnt(c.model.enc_dim); }},
      {"dec_depth", [](R& c, S v) { c.model.dec_depth = parse_count("dec_depth", v); },
       [=](const R& c) { return cnt(c.model.dec_depth); }},
      {"dec_dim", [](R& c, S v) { c.model.dec_dim = parse_count("dec_dim", v); },
       [=](const R& c) { return cnt(c.model.dec_dim); }},
      {"heads", [](R& c, S v) { c.model.heads = parse_count("heads", v); }, [=](const R& c) { return cnt(c.model.heads); }},
      {"mlp_ratio", [](R& c, S v) { c.model.mlp_ratio = parse_count("mlp_ratio", v); },
       [=](const R& c) { return cnt(c.model.mlp_ratio); }},
      {"mask_ratio", [](R& c, S v) { c.train.mask_ratio = parse_number("mask_ratio", v); },
       [=](const R& c) { return num(c.train.mask_ratio); }},
      {"mask_strategy", [](R& c, S v) { c.train.mask_strategy = parse_mask_strategy(v); },
       [](const R& c) { return std::string(to_string(c.train.mask_strategy)); }},
      {"epochs", [](R& c, S v) { c.train.epochs = parse_count("epochs", v); },
       [=](const R& c) { return cnt(c.train.epochs); }},
      {"batch_size", [](R& c, S v) { c.train.batch_size = parse_count("batch_size", v); },
       [=](const R& c) { return cnt(c.train.batch_size); }},
      {"learning_rate", [](R& c, S v) { c.train.adam.learning_rate = parse_number("learning_rate", v); },
       [=](const R& c) { return num(c.train.adam.learning_rate); }},
      {"beta1", [](R& c, S v) { c.train.adam.beta1 = parse_number("beta1", v); },
       [=](const R& c) { return num(c.train.adam.beta1); }},
      {"beta2", [](R& c, S v) { c.train.adam.beta2 = parse_number("beta2", v); },
       [=](const R& c) { return num(c.train.adam.beta2); }},
      {"adam_eps", [](R& c, S v) { c.train.adam.eps = parse_number("adam_eps", v); },
       [=](const R& c) { return num(c.train.adam.eps); }},
      {"weight_decay", [](R& c, S v) { c.train.adam.weight_decay = parse_number("weight_decay", v); },
       [=](const R& c) { return num(c.train.adam.weight_decay); }},
      {"lr_schedule", [](R& c, S v) { c.train.lr_schedule = parse_lr_schedule(v); },
       [](const R& c) { return std::string(to_string(c.train.lr_schedule)); }},
      {"warmup_steps", [](R& c, S v) { c.train.warmup_steps = parse_count("warmup_steps", v); },
       [=](const R& c) { return cnt(c.train.warmup_steps); }},
      {"seed", [](R& c, S v) { c.train.seed = parse_seed("seed", v); },
       [](const R& c) { return std::to_string(c.train.seed); }},
      {"val_fraction", [](R& c, S v) { c.train.val_fraction = parse_number("val_fraction", v); },
       [=](const R& c) { return num(c.train.val_fraction); }},
      {"gamma", [](R& c, S v) { c.train.loss.gamma = parse_number("gamma", v); },
       [=](const R& c) { return num(c.train.loss.gamma); }},
      {"slope_domain", [](R& c, S v) { c.train.loss.slope_domain = parse_slope_domain(v); },
       [](const R& c) { return std::string(to_string(c.train.loss.slope_domain)); }},
      {"loss_support", [](R& c, S v) { c.train.loss.support = parse_loss_support(v); },
       [](const R& c) { return std::string(to_string(c.train.loss.support)); }},
      {"log_wall_seconds", [](R& c, S v) { c.log_wall_seconds = parse_bool("log_wall_seconds", v); },
       [](const R& c) { return std::string(c.log_wall_seconds ? "true" : "false"); }},
      {"overlap", [](R& c, S v) { c.infer.overlap = parse_number("overlap", v); },
       [=](const R& c) { return num(c.infer.overlap); }},
      {"blend",
       [](R& c, S v) {
         if (v == "hann") c.infer.blend = Blend::hann;
         else if (v == "average") c.infer.blend = Blend::average;
         else throw UsageError("blend must be hann or average, got '" + v + "'");
       },
       [](const R& c) { return std::string(c.infer.blend == Blend::hann ? "hann" : "average"); }},
      {"overwrite_visible", [](R& c, S v) { c.infer.overwrite_visible = parse_bool("overwrite_visible", v); },
       [](const R& c) { return std::string(c.infer.overwrite_visible ? "true" : "false"); }},
      {"interp_k", [](R& c, S v) { c.interp_k = parse_count("interp_k", v); }, [=](const R& c) { return cnt(c.interp_k); }},
      {"idw_power", [](R& c, S v) { c.idw_power = parse_number("idw_power", v); },
       [=](const R& c) { return num(c.idw_power); }},
      {"nn_supersample", [](R& c, S v) { c.nn_supersample = parse_count("nn_supersample", v); },
       [=](const R& c) { return cnt(c.nn_supersample); }},
      {"variogram", [](R& c, S v) { c.variogram = parse_variogram_kind(v); },
       [](const R& c) { return std::string(to_string(c.variogram)); }},
      {"variogram_bins", [](R& c, S v) { c.variogram_bins = parse_count("variogram_bins", v); },
       [=](const R& c) { return cnt(c.variogram_bins); }},
      {"thresholds", [](R& c, S v) { c.thresholds = parse_list("thresholds", v); },
       [](const R& c) { return format_list(c.thresholds); }},
      {"fn_mode", [](R& c, S v) { c.fn_mode = parse_fn_mode(v); },
       [](const R& c) { return std::string(to_string(c.fn_mode)); }},
      {"mask_ratios", [](R& c, S v) { c.mask_ratios = parse_list("mask_ratios", v); },
       [](const R& c) { return format_list(c.mask_ratios); }},
      {"sparsity_levels", [](R& c, S v) { c.sparsity_levels = parse_list("sparsity_levels", v); },
       [](const R& c) { return format_list(c.sparsity_levels); }},
      {"eval_sparsity", [](R& c, S v) { c.eval_sparsity = parse_number("eval_sparsity", v); },
       [=](const R& c) { return num(c.eval_sparsity); }},
  };
  return keys;
}

}  // namespace detail

/// Applies one setting. `preset` replaces all model fields at once.
inline void RunConfig::set(const std::string& key, const std::string& value) {
  const std::string v = detail::trim_copy(value);
  if (key == "preset") {
    model = ModelConfig::preset(v);
    return;
  }
  for (const auto& k : detail::config_keys())
    if (key == k.name) {
      k.set(*this, v);
      return;
    }
  throw UsageError("unknown config key '" + key + "'");
}

/// Every key in a fixed order; reading this text back gives an equal config.
inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  return out;
}

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim_copy(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(source + " line " + std::to_string(n) + ": expected key = value");
    const std::string key = detail::trim_copy(line.substr(0, eq));
    try {
      cfg.set(key, line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(source + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

inline void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << cfg.to_text();
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace terra
