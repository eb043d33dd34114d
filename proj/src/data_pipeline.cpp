#include "muse2he/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "muse2he/errors.hpp"
#include "muse2he/tiling.hpp"

namespace muse2he {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Domain domain) { return domain == Domain::kMuse ? "muse" : "he"; }

Domain parse_domain(const std::string& text) {
  if (text == "muse" || text == "MUSE" || text == "x") return Domain::kMuse;
  if (text == "he" || text == "HE" || text == "y") return Domain::kHe;
  throw ConfigError("unknown domain '" + text + "' (expected muse or he)");
}

TileDataset tile_image(const Raster& source, std::int64_t tile_size, std::int64_t stride,
                       Domain domain, std::string source_id) {
  if (tile_size < 1 || tile_size > std::min(source.height(), source.width())) {
    throw DimensionError("tile size " + std::to_string(tile_size) + " does not fit in " +
                         std::to_string(source.height()) + "x" + std::to_string(source.width()));
  }
  if (stride < 1) {
    throw ArgumentError("stride must be >= 1");
  }
  TileDataset out;
  out.domain = domain;
  out.source_id = std::move(source_id);
  for (auto row : axis_origins(source.height(), tile_size, stride)) {
    for (auto col : axis_origins(source.width(), tile_size, stride)) {
      out.tiles.push_back(source.crop(row, col, tile_size, tile_size));
    }
  }
  return out;
}

Raster invert(const Raster& raster) {
  if (raster.depth() == PixelDepth::kSignedFloat) {
    throw ArgumentError("invert expects an 8-bit or unit-interval raster");
  }
  Raster out = raster;
  const float max_value = raster.max_value();
  for (auto& v : out.values()) {
    v = max_value - v;
  }
  return out;
}

TileDataset invert(TileDataset dataset) {
  for (auto& tile : dataset.tiles) {
    tile = invert(tile);
  }
  dataset.inverted = !dataset.inverted;
  return dataset;
}

Raster normalize(const Raster& raster) {
  if (raster.depth() != PixelDepth::kUint8) {
    throw ArgumentError("normalize expects an 8-bit raster, got " + to_string(raster.depth()));
  }
  std::vector<float> values(raster.values().begin(), raster.values().end());
  for (auto& v : values) {
    v = v / 127.5f - 1.0f;
  }
  return Raster(raster.height(), raster.width(), raster.channels(), PixelDepth::kSignedFloat,
                std::move(values));
}

Denormalized denormalize(const Raster& raster) {
  if (raster.depth() != PixelDepth::kSignedFloat) {
    throw ArgumentError("denormalize expects a [-1, 1] raster, got " + to_string(raster.depth()));
  }
  Denormalized out;
  std::vector<float> values(raster.values().begin(), raster.values().end());
  for (auto& v : values) {
    if (!(v >= -1.0f && v <= 1.0f)) {
      ++out.clamped;
      v = std::isnan(v) ? -1.0f : std::clamp(v, -1.0f, 1.0f);
    }
    v = std::round((v + 1.0f) * 127.5f);
  }
  out.raster = Raster(raster.height(), raster.width(), raster.channels(), PixelDepth::kUint8,
                      std::move(values));
  return out;
}

CropSampler::CropSampler(std::int64_t crop_size, std::uint64_t seed)
    : crop_size_(crop_size), rng_(seed) {
  if (crop_size < 1) {
    throw ArgumentError("crop size must be >= 1");
  }
}

std::pair<std::int64_t, std::int64_t> CropSampler::sample_origin(std::int64_t height,
                                                                 std::int64_t width) {
  if (height < crop_size_ || width < crop_size_) {
    throw DimensionError("tile " + std::to_string(height) + "x" + std::to_string(width) +
                         " is smaller than crop " + std::to_string(crop_size_));
  }
  std::uniform_int_distribution<std::int64_t> rows(0, height - crop_size_);
  std::uniform_int_distribution<std::int64_t> cols(0, width - crop_size_);
  const auto r = rows(rng_);
  return {r, cols(rng_)};
}

Raster CropSampler::sample(const Raster& tile) {
  const auto [row, col] = sample_origin(tile.height(), tile.width());
  return tile.crop(row, col, crop_size_, crop_size_);
}

std::string CropSampler::save_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void CropSampler::load_state(const std::string& state) {
  std::istringstream is(state);
  is >> rng_;
  if (!is) {
    throw ConfigError("corrupt crop sampler state");
  }
}

namespace {

void reject_unknown_keys(const json& object, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, _] : object.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

DatasetManifest parse_manifest(const std::string& text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest is not valid JSON: ") + e.what());
  }
  reject_unknown_keys(j, {"version", "sources", "tile_size", "stride", "crop_size", "invert_muse",
                          "seed"},
                      "dataset manifest");
  if (j.value("version", 0) != DatasetManifest::kVersion) {
    throw ConfigError("unsupported manifest version");
  }
  DatasetManifest m;
  try {
    m.tile_size = j.value("tile_size", m.tile_size);
    m.stride = j.value("stride", m.stride);
    m.crop_size = j.value("crop_size", m.crop_size);
    m.invert_muse = j.value("invert_muse", m.invert_muse);
    m.seed = j.value("seed", m.seed);
    for (const auto& s : j.at("sources")) {
      reject_unknown_keys(s, {"path", "domain", "split"}, "manifest source");
      ManifestSource src;
      src.path = s.at("path").get<std::string>();
      if (src.path.is_relative() && !base_dir.empty()) {
        src.path = base_dir / src.path;
      }
      src.domain = parse_domain(s.at("domain").get<std::string>());
      src.split = s.value("split", std::string("train"));
      if (src.split != "train" && src.split != "test") {
        throw ConfigError("split must be train or test, got '" + src.split + "'");
      }
      m.sources.push_back(std::move(src));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  if (m.sources.empty()) {
    throw ConfigError("manifest lists no sources");
  }
  if (m.crop_size > m.tile_size) {
    throw ConfigError("crop_size must not exceed tile_size");
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path) {
  return parse_manifest(read_text(path), path.parent_path());
}

PreparedCounts prepare_dataset(const DatasetManifest& manifest, const fs::path& out_dir) {
  PreparedCounts counts;
  json provenance = json::array();
  std::map<std::pair<std::string, Domain>, std::size_t> next_index;
  for (const auto& src : manifest.sources) {
    const Raster image = read_image(src.path);
    TileDataset tiles =
        tile_image(image, manifest.tile_size, manifest.stride, src.domain, src.path.string());
    if (manifest.invert_muse && src.domain == Domain::kMuse) {
      tiles = invert(std::move(tiles));
    }
    const fs::path dir = out_dir / src.split / to_string(src.domain);
    fs::create_directories(dir);
    auto& index = next_index[{src.split, src.domain}];
    for (const auto& tile : tiles.tiles) {
      char name[32];
      std::snprintf(name, sizeof(name), "tile_%05zu.png", index++);
      write_image(tile, dir / name);
    }
    auto& slot = src.split == "train"
                     ? (src.domain == Domain::kMuse ? counts.train_muse : counts.train_he)
                     : (src.domain == Domain::kMuse ? counts.test_muse : counts.test_he);
    slot += tiles.size();
    provenance.push_back({{"path", src.path.string()},
                          {"domain", to_string(src.domain)},
                          {"split", src.split},
                          {"tiles", tiles.size()},
                          {"inverted", tiles.inverted}});
  }
  json index = {{"version", DatasetManifest::kVersion},
                {"tile_size", manifest.tile_size},
                {"stride", manifest.stride},
                {"crop_size", manifest.crop_size},
                {"invert_muse", manifest.invert_muse},
                {"seed", manifest.seed},
                {"sources", provenance},
                {"counts",
                 {{"train_muse", counts.train_muse},
                  {"train_he", counts.train_he},
                  {"test_muse", counts.test_muse},
                  {"test_he", counts.test_he}}}};
  std::ofstream(out_dir / "index.json") << index.dump(2) << "\n";
  return counts;
}

TileDataset load_prepared(const fs::path& dataset_dir, const std::string& split, Domain domain) {
  const json index = json::parse(read_text(dataset_dir / "index.json"));
  TileDataset out;
  out.domain = domain;
  out.source_id = (dataset_dir / split / to_string(domain)).string();
  out.inverted = domain == Domain::kMuse && index.value("invert_muse", false);
  const fs::path dir = dataset_dir / split / to_string(domain);
  if (!fs::exists(dir)) {
    return out;
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".png") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    out.tiles.push_back(read_image(f));
  }
  return out;
}

}  // namespace muse2he
