#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

namespace muse2he {

/// Value domain of a raster's samples.
enum class PixelDepth {
  kUint8,       // integers in [0, 255]
  kUnitFloat,   // [0, 1], pipeline-internal
  kSignedFloat  // [-1, 1], model-facing
};

enum class ColorSpace { kRgb };

std::string to_string(PixelDepth depth);

/// An H x W x C image stored interleaved (HWC) in row-major order.
///
/// Samples are always held as float; for kUint8 rasters every sample is an
/// integer in [0, 255]. This keeps arithmetic uniform across depths while the
/// depth tag records which value domain applies.
class Raster {
 public:
  Raster() = default;
  Raster(std::int64_t height, std::int64_t width, std::int64_t channels, PixelDepth depth);
  Raster(std::int64_t height, std::int64_t width, std::int64_t channels, PixelDepth depth,
         std::vector<float> values);

  std::int64_t height() const { return height_; }
  std::int64_t width() const { return width_; }
  std::int64_t channels() const { return channels_; }
  PixelDepth depth() const { return depth_; }
  ColorSpace colorspace() const { return ColorSpace::kRgb; }
  bool empty() const { return values_.empty(); }

  /// 255 for 8-bit rasters, 1 for float rasters.
  float max_value() const;
  float min_value() const;

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  float at(std::int64_t row, std::int64_t col, std::int64_t channel) const {
    return values_[static_cast<std::size_t>((row * width_ + col) * channels_ + channel)];
  }
  float& at(std::int64_t row, std::int64_t col, std::int64_t channel) {
    return values_[static_cast<std::size_t>((row * width_ + col) * channels_ + channel)];
  }

  /// Copy of the sub-raster with top-left (row, col); throws DimensionError when out of bounds.
  Raster crop(std::int64_t row, std::int64_t col, std::int64_t height, std::int64_t width) const;

  /// True when every sample lies in the value domain of depth().
  bool in_domain() const;

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  std::int64_t height_ = 0;
  std::int64_t width_ = 0;
  std::int64_t channels_ = 0;
  PixelDepth depth_ = PixelDepth::kUint8;
  std::vector<float> values_;
};

/// Raster -> float tensor of shape 1 x C x H x W (values copied verbatim).
torch::Tensor to_tensor(const Raster& raster);

/// Stacks rasters of identical geometry into an N x C x H x W tensor.
torch::Tensor to_batch(std::span<const Raster> rasters);

/// C x H x W or 1 x C x H x W tensor -> Raster tagged with `depth`.
Raster from_tensor(const torch::Tensor& tensor, PixelDepth depth);

/// Reads an 8-bit PNG or TIFF as RGB. Grey and alpha inputs are converted to RGB.
Raster read_image(const std::filesystem::path& path);
Raster decode_image(std::span<const std::uint8_t> bytes);

/// Writes an 8-bit raster; the format follows the extension (.png, .tif, .tiff).
void write_image(const Raster& raster, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_png(const Raster& raster);

}  // namespace muse2he
