// terra: sparse DEM interpolation pipeline.
//
//   terra synth   diamond-square terrain (one DEM, or a directory of tiles)
//   terra tile    cut a DEM into square tiles
//   terra mask    hide cells of a DEM (random or uniform lattice)
//   terra train   train the masked autoencoder on a directory of tiles
//   terra infer   interpolate a sparse raster or point file with a model
//   terra interp  interpolate with kriging, natural neighbour or IDW
//   terra eval    elevation, slope and stream accuracy of one DEM vs another
//   terra sweep   mask-ratio or sparsity experiment tables
//
// Exit codes: 0 ok, 2 usage, 3 numeric failure, 4 empty input, 5 geometry.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "terra/pipeline.hpp"

namespace fs = std::filesystem;
using namespace terra;

namespace {

// Settings shared by every subcommand: a config file and key=value overrides.
struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // from dedicated options

  RunConfig resolve() const {
    RunConfig cfg = file.empty() ? RunConfig{} : load_run_config(file);
    for (const auto& [k, v] : flags) cfg.set(k, v);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      cfg.set(detail::trim_copy(s.substr(0, eq)), s.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.file, "key = value config file");
  app->add_option("--set", f.sets, "override one config key (key=value), repeatable");
}

// Registers a long option that forwards to a config key when given.
void forward(CLI::App* app, ConfigFlags& f, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&f, key](const std::string& v) { f.flags.emplace_back(key, v); }, help);
}

std::string sibling(const std::string& path, const std::string& suffix) { return path + suffix; }

void save_resolved(const RunConfig& cfg, const std::string& path) {
  save_run_config(cfg, path);
  std::cout << "resolved config: " << path << "\n";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

// Geometry flags for rasterizing point input.
struct TemplateFlags {
  std::string path;
  std::size_t width = 0, height = 0;
  double cell_size = 30.0, origin_x = 0.0, origin_y = 0.0;

  void add(CLI::App* app) {
    app->add_option("--template", path, "raster whose geometry receives the points");
    app->add_option("--width", width, "target width in cells (without --template)");
    app->add_option("--height", height, "target height in cells (without --template)");
    app->add_option("--cell-size", cell_size, "target cell size in metres");
    app->add_option("--origin-x", origin_x, "x of the lower-left corner");
    app->add_option("--origin-y", origin_y, "y of the lower-left corner");
  }
  GridGeometry geometry() const {
    if (!path.empty()) return load_ascii_grid(path).geometry;
    if (width == 0 || height == 0) throw UsageError("point input needs --template or --width/--height");
    return {width, height, cell_size, origin_x, origin_y};
  }
};

bool is_csv(const std::string& path) { return fs::path(path).extension() == ".csv"; }

// Sparse raster from either an .asc grid or a .csv point file.
GridTile read_sparse(const std::string& input, const TemplateFlags& tmpl) {
  if (!is_csv(input)) return load_ascii_grid(input);
  const auto result = rasterize_points(load_points_csv(input), tmpl.geometry());
  if (result.dropped) std::cout << "points outside the target extent: " << result.dropped << "\n";
  return result.tile;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t size = 257, count = 0;
  double roughness = 0.5, relief = 500.0, cell_size = 30.0;
  std::string out, out_dir;
};

int cmd_synth(const SynthArgs& a) {
  if (a.count == 0) {
    if (a.out.empty()) throw UsageError("synth needs --out (or --count with --out-dir)");
    save_ascii_grid(synth_terrain(a.seed, a.size, a.roughness, a.relief, a.cell_size), a.out);
    std::cout << "wrote " << a.out << " (" << a.size << "x" << a.size << ")\n";
    return 0;
  }
  if (a.out_dir.empty()) throw UsageError("synth --count needs --out-dir");
  ensure_dir(a.out_dir);
  const auto tiles = synth_dataset(a.seed, a.count, a.size, a.roughness, a.relief, a.cell_size);
  for (std::size_t i = 0; i < tiles.size(); ++i)
    save_ascii_grid(tiles[i], (fs::path(a.out_dir) / numbered("tile_", i, a.count, ".asc")).string());
  std::cout << "wrote " << a.count << " tiles to " << a.out_dir << "\n";
  return 0;
}

struct TileArgs {
  std::string in, out_dir;
  std::size_t size = 32;
  double overlap = 0.0;
};

int cmd_tile(const TileArgs& a) {
  const auto tiles = tile(load_ascii_grid(a.in), a.size, a.overlap);
  ensure_dir(a.out_dir);
  for (std::size_t i = 0; i < tiles.size(); ++i)
    save_ascii_grid(tiles[i], (fs::path(a.out_dir) / numbered("tile_", i, tiles.size(), ".asc")).string());
  std::cout << "wrote " << tiles.size() << " tiles to " << a.out_dir << "\n";
  return 0;
}

struct MaskArgs {
  std::string in, out, points;
  double ratio = 0.95;
  std::uint64_t seed = 0;
  std::string strategy = "random";
};

int cmd_mask(const MaskArgs& a) {
  const GridTile dem = load_ascii_grid(a.in);
  const auto plan = make_mask(dem.size(), a.ratio, a.seed, parse_mask_strategy(a.strategy), dem.width());
  const GridTile sparse = apply_mask(dem, plan);
  save_ascii_grid(sparse, a.out);
  if (!a.points.empty()) save_points_csv(valid_cell_points(sparse), a.points);
  std::cout << "masked " << plan.masked.size() << " of " << dem.size() << " cells (sparsity "
            << format_double(sparsity(sparse)) << ")\n";
  return 0;
}

struct TrainArgs {
  std::string data, out, log, resume;
};

template <class T>
int train_as(const RunConfig& cfg, const TrainArgs& a) {
  std::vector<GridTile> tiles = load_tiles(a.data);
  if (tiles.size() < 2) throw EmptyInputError("training needs at least 2 .asc tiles in " + a.data);
  for (const auto& t : tiles) check_tile_geometry(t, cfg.model);
  const Dataset data = make_dataset(tiles, cfg.train.val_fraction, cfg.train.seed);
  Trainer<T> trainer(cfg.model, cfg.train);
  if (!a.resume.empty()) {
    trainer.load_checkpoint(a.resume);
    if (!(trainer.params().config == cfg.model)) throw UsageError("resume checkpoint has a different model config");
    std::cout << "resumed at epoch " << trainer.epoch() << "\n";
  }
  const std::string log = a.log.empty() ? sibling(a.out, ".log.csv") : a.log;
  std::cout << "train tiles " << data.train.size() << ", validation tiles " << data.val.size() << "\n";
  trainer.fit(data, [&](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << "  train " << format_double(r.train_loss) << "  val "
              << format_double(r.val_loss) << "  val_rmse_m " << format_double(r.val_rmse_m) << std::endl;
    write_text(log, training_log_csv(trainer.history(), cfg.log_wall_seconds));
  });
  trainer.save_checkpoint(a.out);
  write_text(log, training_log_csv(trainer.history(), cfg.log_wall_seconds));
  std::cout << "wrote " << a.out << " and " << log << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const TrainArgs& a) {
  save_resolved(cfg, sibling(a.out, ".config"));
  return cfg.precision == "double" ? train_as<double>(cfg, a) : train_as<float>(cfg, a);
}

struct InferArgs {
  std::string checkpoint, in, out;
  TemplateFlags tmpl;
};

template <class T>
int infer_as(const Container& c, const RunConfig& cfg, const InferArgs& a) {
  const auto params = get_params<T>(c);
  const GridTile sparse = read_sparse(a.in, a.tmpl);
  InferReport rep;
  const GridTile out = infer_raster(sparse, params, cfg.infer, &rep);
  save_ascii_grid(out, a.out);
  std::cout << "input sparsity " << format_double(rep.input_sparsity) << ", tiles " << rep.tiles << " ("
            << rep.empty_tiles << " without samples, " << rep.idw_cells << " cells IDW-filled)\n"
            << "wrote " << a.out << "\n";
  return 0;
}

int cmd_infer(const RunConfig& cfg, const InferArgs& a) {
  save_resolved(cfg, sibling(a.out, ".config"));
  const Container c = read_container(a.checkpoint);
  return stored_precision(c) == "double" ? infer_as<double>(c, cfg, a) : infer_as<float>(c, cfg, a);
}

struct InterpArgs {
  std::string method, samples, out;
  TemplateFlags tmpl;
};

int cmd_interp(const RunConfig& cfg, const InterpArgs& a) {
  save_resolved(cfg, sibling(a.out, ".config"));
  SparsePoints pts;
  GridGeometry geom;
  double nodata = kDefaultNodata;
  if (is_csv(a.samples)) {
    pts = load_points_csv(a.samples);
    geom = a.tmpl.geometry();
  } else {
    const GridTile s = load_ascii_grid(a.samples);
    pts = valid_cell_points(s);
    geom = a.tmpl.path.empty() && a.tmpl.width == 0 ? s.geometry : a.tmpl.geometry();
    nodata = s.nodata;
  }
  const InterpRequest req{pts, geom, cfg.interp_k, cfg.idw_power};
  GridTile out;
  if (a.method == "ok") {
    if (pts.size() < 2) throw EmptyInputError("ordinary kriging needs at least 2 samples");
    const auto vm = fit_variogram_to(pts, cfg.variogram, cfg.variogram_bins);
    std::cout << "variogram " << to_string(vm.kind) << ": nugget " << format_double(vm.nugget) << ", sill "
              << format_double(vm.sill) << ", range " << format_double(vm.range) << " m"
              << (vm.degenerate ? " (degenerate)" : "") << "\n";
    KrigingReport rep;
    out = ok_interpolate(req, vm, &rep);
    if (rep.singular_cells) std::cout << "singular kriging systems: " << rep.singular_cells << " cells left NODATA\n";
  } else if (a.method == "nn") {
    out = nn_interpolate(req, cfg.nn_supersample);
  } else if (a.method == "idw") {
    out = idw_interpolate(req);
  } else {
    throw UsageError("unknown method '" + a.method + "' (expected ok, nn or idw)");
  }
  out.nodata = nodata;
  save_ascii_grid(out, a.out);
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string pred, ref, out;
};

int cmd_eval(const RunConfig& cfg, const EvalArgs& a) {
  const GridTile pred = load_ascii_grid(a.pred), ref = load_ascii_grid(a.ref);
  const EvalReport rep = evaluate(pred, ref, cfg.thresholds, cfg.fn_mode);
  const std::string stem = fs::path(a.out).extension() == ".json" ? a.out.substr(0, a.out.size() - 5) : a.out;
  save_resolved(cfg, stem + ".config");
  write_text(stem + ".json", to_json(rep).dump(2) + "\n");
  write_text(stem + ".csv", to_csv(rep));
  std::cout << "elevation rmse " << format_double(rep.elevation.rmse) << " m, slope rmse "
            << format_double(rep.slope.rmse) << " deg\n";
  for (const auto& s : rep.streams)
    std::cout << "streams @" << format_double(s.threshold_m2) << " m2: precision " << format_double(s.precision)
              << (s.precision_defined ? "" : " (undefined)") << ", recall " << format_double(s.recall)
              << (s.recall_defined ? "" : " (undefined)") << "\n";
  std::cout << "wrote " << stem << ".json and " << stem << ".csv\n";
  return 0;
}

struct SweepArgs {
  std::string kind, data, ref, checkpoint, out_dir;
  std::vector<std::string> methods = {"ok", "nn", "idw"};
  std::uint64_t seed = 0;
};

template <class T>
int mask_sweep_as(const RunConfig& cfg, const SweepArgs& a) {
  const auto tiles = load_tiles(a.data);
  if (tiles.size() < 2) throw EmptyInputError("sweep needs at least 2 .asc tiles in " + a.data);
  for (const auto& t : tiles) check_tile_geometry(t, cfg.model);
  const Dataset data = make_dataset(tiles, cfg.train.val_fraction, cfg.train.seed);
  std::vector<ModelParams<T>> models;
  const auto rows = mask_ratio_sweep<T>(data, cfg.mask_ratios, cfg.model, cfg.train, cfg.eval_sparsity, &models,
                                        [](double r, const EpochRecord& e) {
                                          std::cout << "ratio " << format_double(r) << " epoch " << e.epoch
                                                    << " train " << format_double(e.train_loss) << std::endl;
                                        });
  for (std::size_t i = 0; i < rows.size(); ++i)
    save_model(models[i], (fs::path(a.out_dir) / ("model_r" + format_double(rows[i].mask_ratio) + ".ckpt")).string());
  write_text((fs::path(a.out_dir) / "mask_ratio_sweep.csv").string(), mask_ratio_table_csv(rows));
  std::string summary = "evaluation sparsity " + format_double(cfg.eval_sparsity) + "\n";
  const auto best = std::min_element(rows.begin(), rows.end(),
                                     [](const auto& x, const auto& y) { return x.stats.rmse < y.stats.rmse; });
  summary += "lowest rmse at mask ratio " + format_double(best->mask_ratio) + " (" + format_double(best->stats.rmse) +
             " m)\n";
  write_text((fs::path(a.out_dir) / "summary.txt").string(), summary);
  std::cout << mask_ratio_table_csv(rows) << summary;
  return 0;
}

template <class T>
int sparsity_sweep_as(const RunConfig& cfg, const SweepArgs& a, const Container* ckpt) {
  const GridTile ref = load_ascii_grid(a.ref);
  std::vector<NamedInterpolator> methods;
  std::optional<ModelParams<T>> params;
  if (ckpt) {
    params = get_params<T>(*ckpt);
    methods.push_back({"tgmsi", model_interpolator(*params, cfg.infer)});
  }
  for (const auto& m : a.methods) methods.push_back({m, baseline_interpolator(m, cfg)});
  const auto rows = sparsity_sweep(ref, cfg.sparsity_levels, methods, a.seed);
  write_text((fs::path(a.out_dir) / "sparsity_sweep.csv").string(), sparsity_table_csv(rows));
  std::string summary = "method,rmse_max_over_min\n";
  for (const auto& [m, r] : rmse_spread(rows)) summary += m + "," + format_double(r) + "\n";
  write_text((fs::path(a.out_dir) / "summary.csv").string(), summary);
  std::cout << sparsity_table_csv(rows) << summary;
  return 0;
}

int cmd_sweep(const RunConfig& cfg, const SweepArgs& a) {
  ensure_dir(a.out_dir);
  save_resolved(cfg, (fs::path(a.out_dir) / "resolved.config").string());
  if (a.kind == "mask_ratio") {
    if (a.data.empty()) throw UsageError("mask_ratio sweep needs --data");
    return cfg.precision == "double" ? mask_sweep_as<double>(cfg, a) : mask_sweep_as<float>(cfg, a);
  }
  if (a.kind == "sparsity") {
    if (a.ref.empty()) throw UsageError("sparsity sweep needs --ref");
    if (a.checkpoint.empty()) return sparsity_sweep_as<double>(cfg, a, nullptr);
    const Container c = read_container(a.checkpoint);
    return stored_precision(c) == "double" ? sparsity_sweep_as<double>(cfg, a, &c)
                                           : sparsity_sweep_as<float>(cfg, a, &c);
  }
  throw UsageError("unknown sweep kind '" + a.kind + "' (expected mask_ratio or sparsity)");
}

}  // namespace

int main(int argc, char** argv) {
  // Large tape buffers are reused instead of being returned to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"terra: sparse DEM interpolation with a masked autoencoder and classical baselines"};
  app.require_subcommand(1);
  ConfigFlags cf;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate diamond-square terrain");
  s->add_option("--seed", synth.seed, "generator seed");
  s->add_option("--size", synth.size, "grid side in cells");
  s->add_option("--roughness", synth.roughness, "roughness in (0, 1]");
  s->add_option("--relief", synth.relief, "elevation range in metres");
  s->add_option("--cell-size", synth.cell_size, "cell size in metres");
  s->add_option("--count", synth.count, "write this many tiles to --out-dir instead of one DEM");
  s->add_option("--out", synth.out, "output .asc");
  s->add_option("--out-dir", synth.out_dir, "output directory for --count");

  TileArgs tl;
  auto* t = app.add_subcommand("tile", "cut a DEM into square tiles");
  t->add_option("--in", tl.in, "input .asc")->required();
  t->add_option("--size", tl.size, "tile side in cells");
  t->add_option("--overlap", tl.overlap, "fractional overlap in [0, 1)");
  t->add_option("--out-dir", tl.out_dir, "output directory")->required();

  MaskArgs mk;
  auto* m = app.add_subcommand("mask", "hide cells of a DEM");
  m->add_option("--in", mk.in, "input .asc")->required();
  m->add_option("--mask-ratio", mk.ratio, "fraction of cells to hide");
  m->add_option("--seed", mk.seed, "mask seed");
  m->add_option("--strategy", mk.strategy, "random or uniform");
  m->add_option("--out", mk.out, "sparse output .asc")->required();
  m->add_option("--points", mk.points, "also write the kept cells as x,y,z CSV");

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "train the masked autoencoder");
  add_config_flags(trn, cf);
  trn->add_option("--data", tr.data, "directory of .asc training tiles")->required();
  trn->add_option("--out", tr.out, "checkpoint path")->required();
  trn->add_option("--log", tr.log, "training log CSV (default: <out>.log.csv)");
  trn->add_option("--resume", tr.resume, "continue from this checkpoint");
  forward(trn, cf, "--preset", "preset", "model preset: base, toy or tiny");
  forward(trn, cf, "--epochs", "epochs", "total epochs");
  forward(trn, cf, "--mask-ratio", "mask_ratio", "training mask ratio");
  forward(trn, cf, "--seed", "seed", "training seed");
  forward(trn, cf, "--learning-rate", "learning_rate", "Adam learning rate");
  forward(trn, cf, "--batch-size", "batch_size", "tiles per step");
  forward(trn, cf, "--gamma", "gamma", "gradient-loss weight");
  forward(trn, cf, "--precision", "precision", "float or double");

  InferArgs inf;
  auto* in = app.add_subcommand("infer", "interpolate a sparse raster with a trained model");
  add_config_flags(in, cf);
  in->add_option("--checkpoint", inf.checkpoint, "model or training checkpoint")->required();
  in->add_option("--in", inf.in, "sparse .asc or x,y,z .csv")->required();
  in->add_option("--out", inf.out, "output .asc")->required();
  inf.tmpl.add(in);
  forward(in, cf, "--overlap", "overlap", "tile overlap in [0, 1)");
  forward(in, cf, "--blend", "blend", "hann or average");

  InterpArgs ip;
  auto* it = app.add_subcommand("interp", "interpolate with a classical method");
  add_config_flags(it, cf);
  it->add_option("--method", ip.method, "ok, nn or idw")->required();
  it->add_option("--samples", ip.samples, "sparse .asc or x,y,z .csv")->required();
  it->add_option("--out", ip.out, "output .asc")->required();
  ip.tmpl.add(it);
  forward(it, cf, "--k", "interp_k", "neighbours per cell (ok, idw)");
  forward(it, cf, "--power", "idw_power", "IDW distance power");
  forward(it, cf, "--supersample", "nn_supersample", "natural-neighbour sub-cells per cell edge");
  forward(it, cf, "--variogram", "variogram", "exponential, spherical or gaussian");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "compare a DEM against a reference");
  add_config_flags(e, cf);
  e->add_option("--pred", ev.pred, "predicted .asc")->required();
  e->add_option("--ref", ev.ref, "reference .asc")->required();
  e->add_option("--out", ev.out, "report path stem (.json and .csv are written)")->required();
  forward(e, cf, "--threshold", "thresholds", "comma-separated accumulation thresholds in m2");
  forward(e, cf, "--fn-mode", "fn_mode", "symmetric or unbuffered");

  SweepArgs sw;
  auto* sp = app.add_subcommand("sweep", "mask-ratio or sparsity experiment");
  add_config_flags(sp, cf);
  sp->add_option("--kind", sw.kind, "mask_ratio or sparsity")->required();
  sp->add_option("--data", sw.data, "training tiles (mask_ratio)");
  sp->add_option("--ref", sw.ref, "reference DEM (sparsity)");
  sp->add_option("--checkpoint", sw.checkpoint, "model to include (sparsity)");
  sp->add_option("--methods", sw.methods, "baselines to include (sparsity)")->delimiter(',');
  sp->add_option("--seed", sw.seed, "sampling seed (sparsity)");
  sp->add_option("--out-dir", sw.out_dir, "output directory")->required();
  forward(sp, cf, "--mask-ratios", "mask_ratios", "comma-separated training mask ratios");
  forward(sp, cf, "--levels", "sparsity_levels", "comma-separated sparsity levels");
  forward(sp, cf, "--eval-sparsity", "eval_sparsity", "sparsity of the mask-ratio evaluation task");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (t->parsed()) return cmd_tile(tl);
    if (m->parsed()) return cmd_mask(mk);
    const RunConfig cfg = cf.resolve();
    if (trn->parsed()) return cmd_train(cfg, tr);
    if (in->parsed()) return cmd_infer(cfg, inf);
    if (it->parsed()) return cmd_interp(cfg, ip);
    if (e->parsed()) return cmd_eval(cfg, ev);
    if (sp->parsed()) return cmd_sweep(cfg, sw);
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return ex.exit_code();
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
