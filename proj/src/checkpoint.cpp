#include "muse2he/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "muse2he/errors.hpp"
#include "muse2he/hashing.hpp"

namespace muse2he {

namespace fs = std::filesystem;
using nlohmann::json;

std::string spec_hash(const GeneratorSpec& generator_spec, const DiscriminatorSpec& discriminator_spec) {
  const json j = {{"generator", to_json(generator_spec)},
                  {"discriminator", to_json(discriminator_spec)}};
  return hex64(fnv1a(j.dump()));
}

void save_checkpoint(const TranslatorPair& pair, const CheckpointManifest& manifest,
                     const fs::path& dir) {
  fs::create_directories(dir);
  torch::save(pair.g_xy, (dir / "g_xy.pt").string());
  torch::save(pair.g_yx, (dir / "g_yx.pt").string());
  torch::save(pair.d_y, (dir / "d_y.pt").string());
  torch::save(pair.d_x, (dir / "d_x.pt").string());
  const json j = {{"format_version", CheckpointManifest::kFormatVersion},
                  {"generator_spec", to_json(manifest.generator_spec)},
                  {"discriminator_spec", to_json(manifest.discriminator_spec)},
                  {"spec_hash", spec_hash(manifest.generator_spec, manifest.discriminator_spec)},
                  {"seed", manifest.seed},
                  {"epoch", manifest.epoch},
                  {"train_config_hash", manifest.train_config_hash},
                  {"extra", manifest.extra}};
  // manifest last: its presence marks a complete checkpoint
  std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";
}

CheckpointManifest read_checkpoint_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw ConfigError("no checkpoint manifest in " + dir.string());
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (j.value("format_version", 0) != CheckpointManifest::kFormatVersion) {
    throw ConfigError("unsupported checkpoint format version in " + dir.string());
  }
  CheckpointManifest m;
  try {
    m.generator_spec = generator_spec_from_json(j.at("generator_spec"));
    m.discriminator_spec = discriminator_spec_from_json(j.at("discriminator_spec"));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epoch = j.at("epoch").get<std::int64_t>();
    m.train_config_hash = j.value("train_config_hash", std::string());
    m.extra = j.value("extra", json::object());
  } catch (const json::exception& e) {
    throw ConfigError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (j.value("spec_hash", std::string()) != spec_hash(m.generator_spec, m.discriminator_spec)) {
    throw ConfigError("checkpoint spec hash does not match its recorded specs");
  }
  return m;
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, const std::optional<std::string>& expected_spec_hash) {
  auto manifest = read_checkpoint_manifest(dir);
  if (expected_spec_hash &&
      *expected_spec_hash != spec_hash(manifest.generator_spec, manifest.discriminator_spec)) {
    throw ConfigError("checkpoint architecture does not match the requested spec");
  }
  TranslatorPair pair = make_translator_pair(manifest.generator_spec, manifest.discriminator_spec,
                                             manifest.seed);
  torch::load(pair.g_xy, (dir / "g_xy.pt").string());
  torch::load(pair.g_yx, (dir / "g_yx.pt").string());
  torch::load(pair.d_y, (dir / "d_y.pt").string());
  torch::load(pair.d_x, (dir / "d_x.pt").string());
  return {std::move(manifest), std::move(pair)};
}

Generator load_translator(const fs::path& dir) {
  const auto manifest = read_checkpoint_manifest(dir);
  auto g = build_generator(manifest.generator_spec, 0);
  torch::load(g, (dir / "g_xy.pt").string());
  return g;
}

}  // namespace muse2he
