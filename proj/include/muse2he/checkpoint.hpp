#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "muse2he/models.hpp"

namespace muse2he {

/// Directory layout:
///   manifest.json            format version, specs, seed, epoch, hashes
///   g_xy.pt g_yx.pt d_y.pt d_x.pt
/// Trainers add optimizer and pool state next to these files.
struct CheckpointManifest {
  static constexpr int kFormatVersion = 1;

  GeneratorSpec generator_spec;
  DiscriminatorSpec discriminator_spec;
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
  std::string train_config_hash;
  nlohmann::json extra = nlohmann::json::object();
};

/// Stable hash of the architecture specs.
std::string spec_hash(const GeneratorSpec& generator_spec, const DiscriminatorSpec& discriminator_spec);

void save_checkpoint(const TranslatorPair& pair, const CheckpointManifest& manifest,
                     const std::filesystem::path& dir);

/// Reads and validates manifest.json. Rejects unknown format versions and manifests whose
/// recorded spec hash does not match their specs.
CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& dir);

struct LoadedCheckpoint {
  CheckpointManifest manifest;
  TranslatorPair pair;
};

/// Loads all four networks. When `expected_spec_hash` is given, a different hash is refused.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                 const std::optional<std::string>& expected_spec_hash = std::nullopt);

/// Loads only the X -> Y generator, which is all inference needs.
Generator load_translator(const std::filesystem::path& dir);

}  // namespace muse2he
