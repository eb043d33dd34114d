#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "muse2he/raster.hpp"

namespace muse2he {

enum class Domain { kMuse, kHe };

std::string to_string(Domain domain);
Domain parse_domain(const std::string& text);

/// Equal-sized tiles cut from one domain's source images.
struct TileDataset {
  Domain domain = Domain::kMuse;
  std::vector<Raster> tiles;
  std::string source_id;
  bool inverted = false;

  std::size_t size() const { return tiles.size(); }
  bool empty() const { return tiles.empty(); }
};

/// Cuts every full tile whose origin is a multiple of `stride`, row-major. Partial
/// tiles at the far edges are dropped.
TileDataset tile_image(const Raster& source, std::int64_t tile_size, std::int64_t stride,
                       Domain domain = Domain::kMuse, std::string source_id = {});

/// Per-channel complement v' = max - v. An involution on 8-bit and unit-float rasters.
Raster invert(const Raster& raster);

/// Inverts every tile and toggles `inverted`.
TileDataset invert(TileDataset dataset);

/// [0, 255] -> [-1, 1], affine.
Raster normalize(const Raster& raster);

struct Denormalized {
  Raster raster;
  /// Samples that fell outside [-1, 1] and were clamped.
  std::size_t clamped = 0;
};

/// [-1, 1] -> 8-bit with rounding; out-of-range samples are clamped and counted.
Denormalized denormalize(const Raster& raster);

/// Uniform random square crops with a reproducible sequence per seed.
class CropSampler {
 public:
  explicit CropSampler(std::int64_t crop_size = 256, std::uint64_t seed = 0);

  std::int64_t crop_size() const { return crop_size_; }

  /// Draws an origin in [0, h - crop] x [0, w - crop].
  std::pair<std::int64_t, std::int64_t> sample_origin(std::int64_t height, std::int64_t width);
  Raster sample(const Raster& tile);

  std::string save_state() const;
  void load_state(const std::string& state);

 private:
  std::int64_t crop_size_;
  std::mt19937_64 rng_;
};

/// One source image listed in a dataset manifest.
struct ManifestSource {
  std::filesystem::path path;
  Domain domain = Domain::kMuse;
  std::string split = "train";  // "train" or "test"
};

/// Text (JSON) description of how to turn source images into tile datasets.
struct DatasetManifest {
  static constexpr int kVersion = 1;
  std::vector<ManifestSource> sources;
  std::int64_t tile_size = 512;
  std::int64_t stride = 512;
  std::int64_t crop_size = 256;
  bool invert_muse = true;
  std::uint64_t seed = 0;
};

/// Parses manifest text; relative source paths resolve against `base_dir`.
/// Unknown keys or a version mismatch raise ConfigError.
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir = {});
DatasetManifest load_manifest(const std::filesystem::path& path);

struct PreparedCounts {
  std::size_t train_muse = 0;
  std::size_t train_he = 0;
  std::size_t test_muse = 0;
  std::size_t test_he = 0;
};

/// Tiles every manifest source into `out_dir/<split>/<domain>/tile_NNNNN.png` and
/// writes `out_dir/index.json` with counts and provenance.
PreparedCounts prepare_dataset(const DatasetManifest& manifest, const std::filesystem::path& out_dir);

/// Loads a prepared split for one domain (tiles in file-name order).
TileDataset load_prepared(const std::filesystem::path& dataset_dir, const std::string& split,
                          Domain domain);

}  // namespace muse2he
