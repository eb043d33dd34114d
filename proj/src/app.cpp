#include "muse2he/app.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>

#include "muse2he/errors.hpp"

#ifndef MUSE2HE_CODE_VERSION
#define MUSE2HE_CODE_VERSION "unknown"
#endif

namespace muse2he {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError(where + " must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.empty() || p.is_absolute() || base.empty() ? p : base / p;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

json blend_params_to_json(const BlendParams& p) {
  return {{"sigma", p.sigma},
          {"tile_size", p.tile_size},
          {"stride", p.stride},
          {"batch_size", p.batch_size},
          {"pad_reflect", p.pad_reflect},
          {"band_tile_rows", p.band_tile_rows}};
}

BlendParams blend_params_from_json(const json& j) {
  reject_unknown(j, {"sigma", "tile_size", "stride", "batch_size", "pad_reflect", "band_tile_rows"},
                 "blend params");
  BlendParams p;
  try {
    p.sigma = j.value("sigma", p.sigma);
    p.tile_size = j.value("tile_size", p.tile_size);
    p.stride = j.value("stride", p.stride);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.pad_reflect = j.value("pad_reflect", p.pad_reflect);
    p.band_tile_rows = j.value("band_tile_rows", p.band_tile_rows);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("blend params: ") + e.what());
  }
  p.validate();
  return p;
}

json ExperimentConfig::to_json() const {
  return {{"version", kVersion},
          {"dataset_manifest", dataset_manifest.generic_string()},
          {"output_dir", output_dir.generic_string()},
          {"train", train.to_json()},
          {"blend", blend_params_to_json(blend)}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  reject_unknown(j, {"version", "dataset_manifest", "output_dir", "train", "blend"}, "experiment config");
  if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != kVersion) {
    throw ConfigError("experiment config version must be " + std::to_string(kVersion));
  }
  ExperimentConfig c;
  try {
    if (j.contains("dataset_manifest")) {
      c.dataset_manifest = resolve(j["dataset_manifest"].get<std::string>(), base_dir);
    }
    if (j.contains("output_dir")) {
      c.output_dir = j["output_dir"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.output_dir = resolve(c.output_dir, base_dir);
  if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
  if (j.contains("blend")) c.blend = blend_params_from_json(j["blend"]);
  c.train.validate();
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open experiment config " + path.string());
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("experiment config " + path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j, path.parent_path());
}

std::string code_version() { return MUSE2HE_CODE_VERSION; }

json Provenance::to_json() const {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return {{"command", command},   {"config_hash", config_hash}, {"seed", seed},
          {"code_version", code_version()}, {"written_at", stamp}, {"details", details}};
}

fs::path provenance_path(const fs::path& output) {
  if (fs::is_directory(output)) {
    return output / "provenance.json";
  }
  return fs::path(output.string() + ".provenance.json");
}

fs::path write_provenance(const fs::path& output, const Provenance& provenance) {
  const auto path = provenance_path(output);
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot write " + path.string());
  }
  out << provenance.to_json().dump(2) << "\n";
  return path;
}

CheckpointRegistry::CheckpointRegistry(const fs::path& root) {
  if (!fs::is_directory(root)) {
    throw ConfigError("checkpoint directory " + root.string() + " does not exist");
  }
  std::vector<fs::path> candidates;
  if (fs::exists(root / "manifest.json")) {
    candidates.push_back(root);
  }
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
      candidates.push_back(entry.path());
    }
  }
  std::sort(candidates.begin(), candidates.end());
  for (const auto& dir : candidates) {
    try {
      auto manifest = read_checkpoint_manifest(dir);
      auto id = fs::relative(dir, root).generic_string();
      entries_.push_back({id == "." ? dir.filename().string() : id, dir, std::move(manifest)});
    } catch (const std::exception& e) {
      rejected_.emplace_back(dir, e.what());
    }
  }
}

const CheckpointEntry* CheckpointRegistry::find(const std::string& id) const {
  const auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.id == id; });
  return it == entries_.end() ? nullptr : &*it;
}

InferenceModel load_inference_model(const fs::path& checkpoint_dir, torch::Device device) {
  const auto manifest = read_checkpoint_manifest(checkpoint_dir);
  InferenceModel model;
  model.generator = load_translator(checkpoint_dir);
  model.generator->to(device);
  model.train_config_hash = manifest.train_config_hash;
  model.seed = manifest.seed;
  if (manifest.extra.contains("train_config")) {
    model.invert_input = manifest.extra["train_config"].value("require_inverted_x", true);
  }
  return model;
}

BlendResult infer_image(const InferenceModel& model, const Raster& source_8bit, const BlendParams& params,
                        std::mutex* device_lock, torch::Device device) {
  const Raster input = model.invert_input ? invert(source_8bit) : source_8bit;
  return convert_image(make_tile_translator(model.generator, device_lock, device), input, params);
}

torch::Device parse_device(const std::string& name) {
  torch::Device device(torch::kCPU);
  try {
    device = torch::Device(name);
  } catch (const std::exception&) {
    throw ConfigError("unrecognized device '" + name + "'");
  }
  if (device.is_cuda() && !torch::cuda::is_available()) {
    throw ConfigError("device '" + name + "' requested but CUDA is not available");
  }
  return device;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw ConfigError(dir.string() + " is not a directory");
  }
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = lower(entry.path().extension().string());
    if (entry.is_regular_file() && (ext == ".png" || ext == ".tif" || ext == ".tiff")) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace muse2he
