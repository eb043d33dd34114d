#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "muse2he/app.hpp"
#include "muse2he/colormap.hpp"
#include "muse2he/critic.hpp"
#include "muse2he/errors.hpp"
#include "muse2he/hashing.hpp"
#include "muse2he/service.hpp"

namespace muse2he {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reference figure for a 5120 x 5120 stride-512 conversion on a TITAN RTX. Informational.
constexpr double kReferenceSeconds = 12.7;

struct PrepareArgs {
  std::string manifest, config, out;
};

struct TrainArgs {
  std::string config, model, resume, data, out;
  std::optional<std::int64_t> epochs, stop_after;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool no_invert = false;
};

struct InferArgs {
  std::string checkpoint, input, output, device = "cpu", config;
  std::optional<std::int64_t> stride, tile, batch;
  std::optional<double> sigma;
};

struct ColormapArgs {
  std::string input, output, preset = "default", presets;
};

struct EvaluateArgs {
  std::string reals, out;
  std::vector<std::string> fakes;
  std::string name;
  std::optional<std::uint64_t> seed;
  std::int64_t epochs = 20, crop = 256, width = 64, batch = 16;
};

struct ServeArgs {
  std::string checkpoints, slides, device, host = "127.0.0.1";
  int port = 8080;
  std::int64_t budget = 2048;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot write " + path.string());
  }
  out << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot write " + path.string());
  }
  out << text;
}

int run_prepare(const PrepareArgs& a, std::ostream& out) {
  fs::path manifest_path = a.manifest;
  fs::path dest = a.out;
  if (!a.config.empty()) {
    const auto exp = load_experiment(a.config);
    if (manifest_path.empty()) manifest_path = exp.dataset_manifest;
    if (dest.empty()) dest = exp.output_dir / "data";
  }
  if (manifest_path.empty() || dest.empty()) {
    throw ArgumentError("prepare needs --manifest and --out (or --config)");
  }
  const auto manifest = load_manifest(manifest_path);
  const auto counts = prepare_dataset(manifest, dest);
  const json summary = {{"train_muse", counts.train_muse},
                        {"train_he", counts.train_he},
                        {"test_muse", counts.test_muse},
                        {"test_he", counts.test_he}};
  write_provenance(dest, {"prepare", hex64(fnv1a(summary.dump())), manifest.seed,
                          {{"manifest", fs::absolute(manifest_path).string()}, {"counts", summary}}});
  out << summary.dump() << "\n";
  return 0;
}

void apply_overrides(TrainConfig& c, const TrainArgs& a) {
  if (!a.model.empty()) {
    const auto kind = parse_generator_kind(a.model);
    if (kind != c.generator.kind) {
      auto spec = GeneratorSpec::defaults(kind);
      spec.in_channels = c.generator.in_channels;
      spec.out_channels = c.generator.out_channels;
      spec.base_width = c.generator.base_width;
      c.generator = spec;
    }
  }
  if (a.epochs) {
    // keep the constant / decay split proportional
    c.fixed_lr_epochs = c.total_epochs > 0 ? (*a.epochs * c.fixed_lr_epochs) / c.total_epochs : 0;
    c.total_epochs = *a.epochs;
    c.checkpoint_every = std::min(c.checkpoint_every, std::max<std::int64_t>(1, c.total_epochs));
  }
  if (a.lr) c.base_lr = *a.lr;
  if (a.seed) c.seed = *a.seed;
  if (a.no_invert) c.require_inverted_x = false;
  c.validate();
}

int run_train(const TrainArgs& a, std::ostream& out) {
  ExperimentConfig exp = a.config.empty() ? ExperimentConfig{} : load_experiment(a.config);
  apply_overrides(exp.train, a);
  const fs::path run_dir = a.out.empty() ? exp.output_dir : fs::path(a.out);
  const fs::path data_dir = a.data.empty() ? run_dir / "data" : fs::path(a.data);
  fs::create_directories(run_dir);
  if (!fs::exists(data_dir / "index.json")) {
    if (exp.dataset_manifest.empty()) {
      throw ConfigError("no prepared dataset at " + data_dir.string() + " and no dataset manifest configured");
    }
    prepare_dataset(load_manifest(exp.dataset_manifest), data_dir);
  }
  auto x = load_prepared(data_dir, "train", Domain::kMuse);
  auto y = load_prepared(data_dir, "train", Domain::kHe);
  const bool want_inverted = exp.train.require_inverted_x;
  if (x.inverted != want_inverted) {
    x = invert(std::move(x));
  }

  auto trainer = a.resume.empty()
                     ? Trainer(exp.train, make_translator_pair(exp.train.generator, exp.train.discriminator,
                                                               exp.train.seed))
                     : Trainer::resume(a.resume, exp.train);
  FitOptions options;
  options.checkpoint_dir = run_dir / "checkpoints";
  options.metrics_path = run_dir / "metrics.jsonl";
  options.stop_after_epoch = a.stop_after;
  options.on_epoch = [&](const EpochRecord& r) {
    out << json{{"epoch", r.epoch}, {"means", r.means}}.dump() << "\n";
    out.flush();
  };
  const auto result = fit(trainer, x, y, options);

  json history = json::array();
  for (const auto& r : result.history) {
    history.push_back({{"epoch", r.epoch}, {"means", r.means}});
  }
  write_json(run_dir / "history.json", history);
  write_json(run_dir / "experiment.json", exp.to_json());
  write_provenance(run_dir, {"train", exp.train.hash(), exp.train.seed,
                             {{"model", to_string(exp.train.generator.kind)},
                              {"epochs_completed", result.epochs_completed},
                              {"x_inverted", x.inverted},
                              {"resumed_from", a.resume}}});
  return 0;
}

int run_infer(const InferArgs& a, std::ostream& out) {
  BlendParams params;
  if (!a.config.empty()) {
    params = load_experiment(a.config).blend;
  }
  if (a.stride) params.stride = *a.stride;
  if (a.sigma) params.sigma = *a.sigma;
  if (a.tile) params.tile_size = *a.tile;
  if (a.batch) params.batch_size = *a.batch;
  params.validate();

  const auto device = parse_device(a.device);
  const auto model = load_inference_model(a.checkpoint, device);
  const auto source = read_image(a.input);
  const auto result = infer_image(model, source, params, nullptr, device);
  write_image(result.montage, a.output);

  const auto plan = plan_tiles(source.height(), source.width(), params.tile_size, params.stride);
  const json timing = {{"image_height", source.height()},
                       {"image_width", source.width()},
                       {"tile_size", params.tile_size},
                       {"stride", params.stride},
                       {"planned_tiles", static_cast<std::int64_t>(plan.origins.size())},
                       {"tiles", result.stats.tiles},
                       {"generator_calls", result.stats.generator_calls},
                       {"seconds", result.stats.seconds},
                       {"tiles_per_second", result.stats.tiles_per_second()},
                       {"device", a.device},
                       {"reference_seconds_5120_stride512_titan_rtx", kReferenceSeconds}};
  write_json(a.output + ".timing.json", timing);
  write_provenance(a.output, {"infer", model.train_config_hash, model.seed,
                              {{"checkpoint", fs::absolute(a.checkpoint).string()},
                               {"input", fs::absolute(a.input).string()},
                               {"blend", blend_params_to_json(params)},
                               {"input_inverted", model.invert_input}}});
  char line[256];
  std::snprintf(line, sizeof(line),
                "infer: %lldx%lld, %lld tiles in %lld generator calls, %.3f s (%.2f tiles/s); "
                "reference %.1f s for 5120x5120 stride 512 on a TITAN RTX (informational)\n",
                static_cast<long long>(source.width()), static_cast<long long>(source.height()),
                static_cast<long long>(result.stats.tiles), static_cast<long long>(result.stats.generator_calls),
                result.stats.seconds, result.stats.tiles_per_second(), kReferenceSeconds);
  out << line;
  return 0;
}

int run_colormap(const ColormapArgs& a, std::ostream& out) {
  const auto preset = resolve_preset(a.preset, a.presets);
  const auto source = read_image(a.input);
  write_image(colormap(source, preset), a.output);
  write_provenance(a.output, {"colormap", hex64(fnv1a(a.preset + "|" + a.presets)), 0,
                              {{"input", fs::absolute(a.input).string()}, {"preset", a.preset}}});
  out << "colormap: wrote " << a.output << "\n";
  return 0;
}

std::vector<Raster> read_all(const fs::path& dir) {
  std::vector<Raster> out;
  for (const auto& p : list_images(dir)) {
    out.push_back(read_image(p));
  }
  if (out.empty()) {
    throw ConfigError("no images in " + dir.string());
  }
  return out;
}

int run_evaluate(const EvaluateArgs& a, std::ostream& out) {
  std::vector<std::pair<std::string, fs::path>> models;
  for (const auto& f : a.fakes) {
    const auto eq = f.find('=');
    if (eq == std::string::npos) {
      models.emplace_back(a.fakes.size() == 1 && !a.name.empty() ? a.name : fs::path(f).filename().string(), f);
    } else {
      models.emplace_back(f.substr(0, eq), f.substr(eq + 1));
    }
  }
  const auto reals = read_all(a.reals);
  CriticConfig config;
  config.epochs = a.epochs;
  config.crop_size = a.crop;
  config.base_width = a.width;
  config.batch_size = a.batch;
  config.seed = a.seed;
  const fs::path dest = a.out;
  fs::create_directories(dest);

  std::vector<CriticReport> reports;
  for (const auto& [name, dir] : models) {
    const auto split_seed = a.seed ? *a.seed : 0;
    const auto dataset = assemble_critic_dataset(read_all(dir), reals, split_seed);
    reports.push_back(train_critic(dataset, config, name));
    write_json(dest / ("critic_" + name + ".json"), reports.back().to_json());
  }
  const auto table = emit_table(reports);
  write_text(dest / "table.txt", table.text);
  write_text(dest / "table.csv", table.csv);
  json seeds = json::object();
  for (const auto& r : reports) seeds[r.model_name] = r.init_seed;
  write_provenance(dest, {"evaluate", config.hash(), a.seed.value_or(0),
                          {{"reals", fs::absolute(a.reals).string()}, {"init_seeds", seeds}}});
  out << table.text;
  return 0;
}

int run_serve(const ServeArgs& a, std::ostream& out) {
  auto options = ServiceOptions::from_env();
  if (!a.checkpoints.empty()) options.checkpoint_dir = a.checkpoints;
  if (!a.slides.empty()) options.slide_dir = a.slides;
  if (!a.device.empty()) options.device = a.device;
  options.max_roi_side = a.budget;
  out << "serving on http://" << a.host << ":" << a.port << "\n";
  out.flush();
  serve(options, a.host, a.port);
  return 0;
}

void report_error(std::ostream& err, const char* kind, const std::string& message) {
  err << json{{"error", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unpaired MUSE to virtual H&E conversion", "muse2he"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Tile source images into train/test datasets");
  prepare->add_option("--manifest", prep.manifest, "Dataset manifest (JSON)");
  prepare->add_option("--config", prep.config, "Experiment config supplying manifest and output dir");
  prepare->add_option("--out", prep.out, "Output dataset directory");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a translator pair");
  train->add_option("--config", tr.config, "Experiment config (JSON)");
  train->add_option("--model", tr.model, "cyclegan | dualgan | ganilla (or full kind names)");
  train->add_option("--epochs", tr.epochs, "Total epochs; the constant-rate share scales with it");
  train->add_option("--lr", tr.lr, "Base learning rate");
  train->add_option("--seed", tr.seed, "Experiment seed");
  train->add_flag("--no-invert", tr.no_invert, "Train on uninverted MUSE tiles");
  train->add_option("--resume", tr.resume, "Checkpoint directory to resume from");
  train->add_option("--data", tr.data, "Prepared dataset directory (default <out>/data)");
  train->add_option("--out", tr.out, "Run directory (default: config output_dir)");
  train->add_option("--stop-after", tr.stop_after, "Save <out>/checkpoints/latest and stop at this epoch");

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Convert an image with overlap blending");
  infer->add_option("--checkpoint", inf.checkpoint, "Checkpoint directory")->required();
  infer->add_option("--input", inf.input, "Source image (PNG or TIFF)")->required();
  infer->add_option("--out", inf.output, "Output PNG")->required();
  infer->add_option("--stride", inf.stride, "Tile stride (default 256)");
  infer->add_option("--sigma", inf.sigma, "Gaussian weight sigma (default 128)");
  infer->add_option("--tile", inf.tile, "Tile size (default 512)");
  infer->add_option("--batch", inf.batch, "Tiles per generator call (default 4)");
  infer->add_option("--device", inf.device, "cpu | cuda[:N]");
  infer->add_option("--config", inf.config, "Experiment config supplying blend parameters");

  ColormapArgs cm;
  auto* color = app.add_subcommand("colormap", "Spectral-unmixing colormap baseline");
  color->add_option("--input", cm.input, "Source MUSE image")->required();
  color->add_option("--out", cm.output, "Output PNG")->required();
  color->add_option("--preset", cm.preset, "Preset name");
  color->add_option("--presets", cm.presets, "Preset file (JSON)");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Negative critic accuracy for model outputs");
  evaluate->add_option("--fakes", ev.fakes, "Model outputs as NAME=DIR (repeatable)")->required();
  evaluate->add_option("--reals", ev.reals, "Directory of real target-domain tiles")->required();
  evaluate->add_option("--out", ev.out, "Report directory")->required();
  evaluate->add_option("--name", ev.name, "Model name when a single --fakes DIR is given");
  evaluate->add_option("--seed", ev.seed, "Critic seed (random and recorded when omitted)");
  evaluate->add_option("--epochs", ev.epochs, "Critic epochs");
  evaluate->add_option("--crop", ev.crop, "Critic crop size");
  evaluate->add_option("--width", ev.width, "Critic base width");
  evaluate->add_option("--batch", ev.batch, "Critic batch size");

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service for interactive ROI conversion");
  serve_cmd->add_option("--checkpoints", sv.checkpoints, "Checkpoint root (or MUSE2HE_CHECKPOINT_DIR)");
  serve_cmd->add_option("--slides", sv.slides, "Slide directory (or MUSE2HE_SLIDE_DIR)");
  serve_cmd->add_option("--device", sv.device, "cpu | cuda[:N] (or MUSE2HE_DEVICE)");
  serve_cmd->add_option("--host", sv.host, "Bind address");
  serve_cmd->add_option("--port", sv.port, "Port");
  serve_cmd->add_option("--budget", sv.budget, "ROI side budget; larger ROIs need allow_large");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (*prepare) return run_prepare(prep, out);
    if (*train) return run_train(tr, out);
    if (*infer) return run_infer(inf, out);
    if (*color) return run_colormap(cm, out);
    if (*evaluate) return run_evaluate(ev, out);
    if (*serve_cmd) return run_serve(sv, out);
  } catch (const ArgumentError& e) {
    report_error(err, "argument", e.what());
    return 2;
  } catch (const ConfigError& e) {
    report_error(err, "config", e.what());
  } catch (const DimensionError& e) {
    report_error(err, "dimension", e.what());
  } catch (const std::exception& e) {
    report_error(err, "runtime", e.what());
  }
  return 1;
}

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"muse2he"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace muse2he
