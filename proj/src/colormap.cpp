#include "muse2he/colormap.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "muse2he/errors.hpp"

namespace muse2he {

namespace {

double dot(const Rgb& a, const Rgb& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Rgb unit(const Rgb& v) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw ConfigError("signature vectors must be nonzero and finite");
  }
  return {v[0] / n, v[1] / n, v[2] / n};
}

}  // namespace

double UnmixBasis::condition_number() const {
  // eigenvalues of the 2x2 Gram matrix [[1, g], [g, 1]] for unit signatures
  const double g = std::abs(dot(nuclear_signature, cyto_signature));
  if (g >= 1.0) {
    return std::numeric_limits<double>::infinity();
  }
  return std::sqrt((1.0 + g) / (1.0 - g));
}

UnmixBasis UnmixBasis::from_signatures(const Rgb& nuclear, const Rgb& cyto) {
  UnmixBasis basis{unit(nuclear), unit(cyto)};
  if (!(basis.condition_number() <= 1e6)) {
    throw ConfigError("unmixing basis is near-collinear (condition number > 1e6)");
  }
  return basis;
}

void StainVectors::validate() const {
  for (const auto* v : {&hematoxylin_absorbance, &eosin_absorbance}) {
    bool nonzero = false;
    for (double c : *v) {
      if (!(c >= 0.0) || !std::isfinite(c)) throw ConfigError("absorbance entries must be finite and >= 0");
      nonzero = nonzero || c > 0.0;
    }
    if (!nonzero) throw ConfigError("absorbance vectors must be nonzero");
  }
  if (!(intensity_scale > 0.0) || !std::isfinite(intensity_scale)) {
    throw ConfigError("intensity_scale must be positive");
  }
}

Abundances unmix(const Raster& raster, const UnmixBasis& basis) {
  if (raster.channels() != 3) {
    throw DimensionError("unmix expects an RGB raster");
  }
  if (!(basis.condition_number() <= 1e6)) {
    throw ConfigError("unmixing basis is near-collinear (condition number > 1e6)");
  }
  const auto& sn = basis.nuclear_signature;
  const auto& sc = basis.cyto_signature;
  const double g = dot(sn, sc);
  const double det = 1.0 - g * g;  // Gram determinant for unit signatures
  const double scale = raster.depth() == PixelDepth::kUint8 ? 1.0 / 255.0 : 1.0;

  Abundances out;
  out.height = raster.height();
  out.width = raster.width();
  const auto n = static_cast<std::size_t>(raster.height() * raster.width());
  out.nuclear.resize(n);
  out.cyto.resize(n);
  const auto values = raster.values();
  for (std::size_t i = 0; i < n; ++i) {
    const Rgb v{values[3 * i] * scale, values[3 * i + 1] * scale, values[3 * i + 2] * scale};
    const double bn = dot(v, sn);
    const double bc = dot(v, sc);
    double an = (bn - g * bc) / det;
    double ac = (bc - g * bn) / det;
    if (an < 0.0 || ac < 0.0) {
      // best single-signature fit on each face of the nonnegative orthant
      const double only_n = std::max(0.0, bn);
      const double only_c = std::max(0.0, bc);
      // residual |v - a s|^2 = |v|^2 - a^2 for unit s and a = v.s
      if (only_n * only_n >= only_c * only_c) {
        an = only_n;
        ac = 0.0;
      } else {
        an = 0.0;
        ac = only_c;
      }
    }
    out.nuclear[i] = an;
    out.cyto[i] = ac;
  }
  return out;
}

Raster render_he(const Abundances& abundances, const StainVectors& stains) {
  stains.validate();
  Raster out(abundances.height, abundances.width, 3, PixelDepth::kUint8);
  auto values = out.values();
  const auto n = abundances.nuclear.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double an = abundances.nuclear[i];
    const double ac = abundances.cyto[i];
    if (an < 0.0 || ac < 0.0) {
      throw ArgumentError("abundances must be nonnegative");
    }
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double od = (an * stains.hematoxylin_absorbance[ch] + ac * stains.eosin_absorbance[ch]) *
                        stains.intensity_scale;
      values[3 * i + ch] = static_cast<float>(std::round(255.0 * std::exp(-od)));
    }
  }
  return out;
}

Raster colormap(const Raster& raster, const ColormapPreset& preset) {
  return render_he(unmix(raster, preset.basis), preset.stains);
}

const std::map<std::string, ColormapPreset>& builtin_presets() {
  // DAPI-like blue nuclei and rhodamine-like orange cytoplasm; Ruifrok-Johnston H and E
  // optical densities.
  static const std::map<std::string, ColormapPreset> presets = {
      {"default",
       {UnmixBasis::from_signatures({0.30, 0.45, 1.00}, {1.00, 0.45, 0.25}),
        StainVectors{{0.650, 0.704, 0.286}, {0.072, 0.990, 0.105}, 2.0}}},
  };
  return presets;
}

std::map<std::string, ColormapPreset> parse_presets(const std::string& text) {
  using nlohmann::json;
  std::map<std::string, ColormapPreset> out;
  try {
    const auto j = json::parse(text);
    for (const auto& [name, p] : j.items()) {
      for (const auto& [key, _] : p.items()) {
        if (key != "nuclear_signature" && key != "cyto_signature" && key != "hematoxylin" &&
            key != "eosin" && key != "intensity_scale") {
          throw ConfigError("unknown key '" + key + "' in preset " + name);
        }
      }
      ColormapPreset preset{
          UnmixBasis::from_signatures(p.at("nuclear_signature").get<Rgb>(), p.at("cyto_signature").get<Rgb>()),
          StainVectors{p.at("hematoxylin").get<Rgb>(), p.at("eosin").get<Rgb>(),
                       p.value("intensity_scale", 1.0)}};
      preset.stains.validate();
      out.emplace(name, preset);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed preset file: ") + e.what());
  }
  return out;
}

std::map<std::string, ColormapPreset> load_presets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open preset file " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_presets(ss.str());
}

ColormapPreset resolve_preset(const std::string& name, const std::filesystem::path& file) {
  if (!file.empty()) {
    const auto presets = load_presets(file);
    if (auto it = presets.find(name); it != presets.end()) {
      return it->second;
    }
  }
  const auto& builtins = builtin_presets();
  if (auto it = builtins.find(name); it != builtins.end()) {
    return it->second;
  }
  throw ConfigError("unknown colormap preset '" + name + "'");
}

}  // namespace muse2he
