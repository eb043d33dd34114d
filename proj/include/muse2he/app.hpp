#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "muse2he/blend.hpp"
#include "muse2he/checkpoint.hpp"
#include "muse2he/trainer.hpp"

namespace muse2he {

/// One experiment on disk: where the data comes from, how to train, how to infer.
struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::filesystem::path dataset_manifest;
  TrainConfig train;
  BlendParams blend;
  std::filesystem::path output_dir = "runs/experiment";

  nlohmann::json to_json() const;
  /// Relative paths resolve against `base_dir`. Unknown keys or version mismatch raise
  /// ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

ExperimentConfig load_experiment(const std::filesystem::path& path);

nlohmann::json blend_params_to_json(const BlendParams& params);
BlendParams blend_params_from_json(const nlohmann::json& j);

/// Version string baked in at configure time (project version plus git revision).
std::string code_version();

/// Written next to every CLI output.
struct Provenance {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json details = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// `<dir>/provenance.json` for directories, `<file>.provenance.json` otherwise.
std::filesystem::path provenance_path(const std::filesystem::path& output);
std::filesystem::path write_provenance(const std::filesystem::path& output, const Provenance& provenance);

struct CheckpointEntry {
  std::string id;  // path relative to the registry root, '/'-separated
  std::filesystem::path path;
  CheckpointManifest manifest;
};

/// Every directory under a root holding a valid manifest.json. Invalid manifests are
/// recorded, not fatal.
class CheckpointRegistry {
 public:
  CheckpointRegistry() = default;
  explicit CheckpointRegistry(const std::filesystem::path& root);

  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  const CheckpointEntry* find(const std::string& id) const;
  const std::vector<std::pair<std::filesystem::path, std::string>>& rejected() const { return rejected_; }

 private:
  std::vector<CheckpointEntry> entries_;
  std::vector<std::pair<std::filesystem::path, std::string>> rejected_;
};

/// A loaded X -> Y generator plus the input convention it was trained with.
struct InferenceModel {
  Generator generator;
  bool invert_input = true;
  std::string train_config_hash;
  std::uint64_t seed = 0;
};

/// Loads the X -> Y generator onto `device`.
InferenceModel load_inference_model(const std::filesystem::path& checkpoint_dir,
                                    torch::Device device = torch::kCPU);

/// The single conversion path used by both the CLI and the service.
BlendResult infer_image(const InferenceModel& model, const Raster& source_8bit, const BlendParams& params,
                        std::mutex* device_lock = nullptr, torch::Device device = torch::kCPU);

/// "cpu", "cuda" or "cuda:N"; CUDA requests fail when no device is present.
torch::Device parse_device(const std::string& name);

/// Sorted PNG/TIFF files in a directory.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Dispatches `prepare | train | infer | colormap | evaluate | serve`. Returns 0 on success,
/// 2 on usage errors and 1 on runtime failures (reported as a JSON line on `err`).
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace muse2he
