#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <vector>

#include <torch/torch.h>

#include "muse2he/models.hpp"
#include "muse2he/raster.hpp"

namespace muse2he {

struct TileOrigin {
  std::int64_t row = 0;
  std::int64_t col = 0;
  friend bool operator==(const TileOrigin&, const TileOrigin&) = default;
};

/// Row-major origins {(i * stride, j * stride) : origin + tile_size <= edge}.
struct TilePlan {
  std::int64_t image_height = 0;
  std::int64_t image_width = 0;
  std::int64_t tile_size = 0;
  std::int64_t stride = 0;
  std::int64_t tile_rows = 0;
  std::int64_t tile_cols = 0;
  std::vector<TileOrigin> origins;
  /// Pixels past the last tile that no tile covers (0 when the stride divides evenly).
  std::int64_t uncovered_bottom = 0;
  std::int64_t uncovered_right = 0;

  bool fully_covered() const { return uncovered_bottom == 0 && uncovered_right == 0; }
};

TilePlan plan_tiles(std::int64_t height, std::int64_t width, std::int64_t tile_size, std::int64_t stride);

/// exp(-d^2 / (2 sigma^2)).
double gaussian_weight(double distance, double sigma);

/// Square Gaussian weight map centred at ((size - 1) / 2, (size - 1) / 2).
class WeightMap {
 public:
  WeightMap(std::int64_t size, double sigma);

  std::int64_t size() const { return size_; }
  double sigma() const { return sigma_; }
  double at(std::int64_t row, std::int64_t col) const {
    return weights_[static_cast<std::size_t>(row * size_ + col)];
  }
  const std::vector<double>& values() const { return weights_; }

 private:
  std::int64_t size_;
  double sigma_;
  std::vector<double> weights_;
};

WeightMap patch_weight_map(std::int64_t tile_size, double sigma);

struct BlendParams {
  double sigma = 128.0;
  std::int64_t tile_size = 512;
  std::int64_t stride = 256;
  /// Tiles per generator call.
  std::int64_t batch_size = 4;
  /// Reflect-pad geometries the plan cannot cover, run, then crop back. When false such
  /// geometries raise DimensionError.
  bool pad_reflect = true;
  /// Tile rows accumulated per band; 0 keeps one accumulator for the whole image.
  std::int64_t band_tile_rows = 1;

  void validate() const;
};

/// Weighted sums for a horizontal band of rows [row_offset, row_offset + height).
class BlendAccumulator {
 public:
  BlendAccumulator(std::int64_t row_offset, std::int64_t height, std::int64_t width,
                   std::int64_t channels);

  std::int64_t row_offset() const { return row_offset_; }
  std::int64_t height() const { return height_; }

  /// Adds a tile_size x tile_size x C patch (CHW tensor) whose top-left is `origin`.
  void add(const torch::Tensor& patch_chw, TileOrigin origin, const WeightMap& weights);

  /// value_sum / weight_sum for rows [first, last) in image coordinates. Rows with zero
  /// weight raise DimensionError.
  void resolve(std::int64_t first, std::int64_t last, Raster& out) const;

  /// Moves the band so it starts at `new_offset`, keeping sums for retained rows.
  void rebase(std::int64_t new_offset, std::int64_t new_height);

  double weight_sum(std::int64_t row, std::int64_t col) const {
    return weight_sum_[static_cast<std::size_t>((row - row_offset_) * width_ + col)];
  }

 private:
  std::int64_t row_offset_;
  std::int64_t height_;
  std::int64_t width_;
  std::int64_t channels_;
  std::vector<double> value_sum_;
  std::vector<double> weight_sum_;
};

/// Maps a normalized N x 3 x T x T batch to a batch of the same shape.
using TileTranslator = std::function<torch::Tensor(const torch::Tensor&)>;

/// Wraps a generator, already resident on `device`, for inference; `device_lock`, when given,
/// serializes forward passes.
TileTranslator make_tile_translator(const Generator& generator, std::mutex* device_lock = nullptr,
                                    torch::Device device = torch::kCPU);

struct BlendStats {
  std::int64_t tiles = 0;
  std::int64_t generator_calls = 0;
  double seconds = 0.0;
  double tiles_per_second() const { return seconds > 0.0 ? static_cast<double>(tiles) / seconds : 0.0; }
};

struct BlendResult {
  Raster montage;
  BlendStats stats;
};

/// Runs `translator` on every planned tile of `source` and blends overlapping outputs:
/// each pixel is sum_k w_k v_k / sum_k w_k with w_k the Gaussian weight of the pixel's
/// offset inside patch k. Source and result are float rasters of identical geometry.
BlendResult blend_montage(const TileTranslator& translator, const Raster& source, const BlendParams& params);

/// 8-bit image in, 8-bit virtual H&E out: normalize, blend, denormalize.
BlendResult convert_image(const TileTranslator& translator, const Raster& source_8bit,
                          const BlendParams& params);

/// Mean absolute cross-boundary gradient on tile-boundary lines minus the same quantity on
/// control lines half a stride away. Near 0 for seamless montages.
double seam_metric(const Raster& montage, const TilePlan& plan);

}  // namespace muse2he
