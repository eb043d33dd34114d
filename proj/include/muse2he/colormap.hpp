#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "muse2he/raster.hpp"

namespace muse2he {

using Rgb = std::array<double, 3>;

/// Fluorescence colour signatures of the nuclear and cytoplasmic dyes.
struct UnmixBasis {
  Rgb nuclear_signature{};
  Rgb cyto_signature{};

  /// Scales both signatures to unit L2 norm and rejects near-collinear pairs
  /// (condition number above 1e6) with ConfigError.
  static UnmixBasis from_signatures(const Rgb& nuclear, const Rgb& cyto);

  double condition_number() const;
};

/// Brightfield absorbance of the rendered stains.
struct StainVectors {
  Rgb hematoxylin_absorbance{};
  Rgb eosin_absorbance{};
  double intensity_scale = 1.0;

  void validate() const;
};

struct ColormapPreset {
  UnmixBasis basis;
  StainVectors stains;
};

/// Per-pixel abundance planes, row-major H x W.
struct Abundances {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> nuclear;
  std::vector<double> cyto;
};

/// Nonnegative least squares of v ~ a_n s_n + a_c s_c per pixel, v on the unit interval.
Abundances unmix(const Raster& raster, const UnmixBasis& basis);

/// out = max_value * exp(-(a_n k_H + a_c k_E) * intensity_scale), as an 8-bit raster.
Raster render_he(const Abundances& abundances, const StainVectors& stains);

/// unmix followed by render_he.
Raster colormap(const Raster& raster, const ColormapPreset& preset);

/// Built-in presets ("default").
const std::map<std::string, ColormapPreset>& builtin_presets();

/// Preset file: a JSON object of named presets, each with nuclear_signature,
/// cyto_signature, hematoxylin, eosin (RGB triples) and intensity_scale.
std::map<std::string, ColormapPreset> load_presets(const std::filesystem::path& path);
std::map<std::string, ColormapPreset> parse_presets(const std::string& text);

/// Looks `name` up in `file` (if given) and then in the built-ins.
ColormapPreset resolve_preset(const std::string& name, const std::filesystem::path& file = {});

}  // namespace muse2he
