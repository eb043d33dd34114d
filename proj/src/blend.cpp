#include "muse2he/blend.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <set>

#include "muse2he/data_pipeline.hpp"
#include "muse2he/errors.hpp"
#include "muse2he/tiling.hpp"

namespace muse2he {

TilePlan plan_tiles(std::int64_t height, std::int64_t width, std::int64_t tile_size, std::int64_t stride) {
  if (tile_size < 1 || tile_size > height || tile_size > width) {
    throw DimensionError("tile size " + std::to_string(tile_size) + " does not fit in " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  if (stride < 1) {
    throw ArgumentError("stride must be >= 1");
  }
  TilePlan plan;
  plan.image_height = height;
  plan.image_width = width;
  plan.tile_size = tile_size;
  plan.stride = stride;
  const auto rows = axis_origins(height, tile_size, stride);
  const auto cols = axis_origins(width, tile_size, stride);
  plan.tile_rows = static_cast<std::int64_t>(rows.size());
  plan.tile_cols = static_cast<std::int64_t>(cols.size());
  plan.uncovered_bottom = height - (rows.back() + tile_size);
  plan.uncovered_right = width - (cols.back() + tile_size);
  plan.origins.reserve(rows.size() * cols.size());
  for (auto r : rows) {
    for (auto c : cols) {
      plan.origins.push_back({r, c});
    }
  }
  return plan;
}

double gaussian_weight(double distance, double sigma) {
  return std::exp(-(distance * distance) / (2.0 * sigma * sigma));
}

WeightMap::WeightMap(std::int64_t size, double sigma) : size_(size), sigma_(sigma) {
  if (size < 1) {
    throw ArgumentError("weight map size must be >= 1");
  }
  if (!(sigma > 0.0)) {
    throw ArgumentError("sigma must be positive");
  }
  const double center = static_cast<double>(size - 1) / 2.0;
  weights_.resize(static_cast<std::size_t>(size * size));
  for (std::int64_t r = 0; r < size; ++r) {
    const double dr = static_cast<double>(r) - center;
    for (std::int64_t c = 0; c < size; ++c) {
      const double dc = static_cast<double>(c) - center;
      // exp of the squared distance directly; sqrt then square would break bit-exact symmetry
      weights_[static_cast<std::size_t>(r * size + c)] = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
    }
  }
}

WeightMap patch_weight_map(std::int64_t tile_size, double sigma) { return WeightMap(tile_size, sigma); }

void BlendParams::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (tile_size < 1) throw ConfigError("tile_size must be >= 1");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (band_tile_rows < 0) throw ConfigError("band_tile_rows must be >= 0");
}

BlendAccumulator::BlendAccumulator(std::int64_t row_offset, std::int64_t height, std::int64_t width,
                                   std::int64_t channels)
    : row_offset_(row_offset),
      height_(height),
      width_(width),
      channels_(channels),
      value_sum_(static_cast<std::size_t>(height * width * channels), 0.0),
      weight_sum_(static_cast<std::size_t>(height * width), 0.0) {}

void BlendAccumulator::add(const torch::Tensor& patch_chw, TileOrigin origin, const WeightMap& weights) {
  const auto t = weights.size();
  if (patch_chw.dim() != 3 || patch_chw.size(0) != channels_ || patch_chw.size(1) != t ||
      patch_chw.size(2) != t) {
    throw DimensionError("patch does not match the weight map geometry");
  }
  if (origin.row < row_offset_ || origin.row + t > row_offset_ + height_ || origin.col < 0 ||
      origin.col + t > width_) {
    throw DimensionError("patch falls outside the accumulator band");
  }
  const auto hwc = patch_chw.detach().to(torch::kCPU, torch::kFloat32).permute({1, 2, 0}).contiguous();
  const float* v = hwc.data_ptr<float>();
  for (std::int64_t r = 0; r < t; ++r) {
    const auto band_row = origin.row - row_offset_ + r;
    for (std::int64_t c = 0; c < t; ++c) {
      const double w = weights.at(r, c);
      const auto px = static_cast<std::size_t>(band_row * width_ + origin.col + c);
      weight_sum_[px] += w;
      const float* src = v + (r * t + c) * channels_;
      double* dst = value_sum_.data() + px * static_cast<std::size_t>(channels_);
      for (std::int64_t ch = 0; ch < channels_; ++ch) {
        dst[ch] += w * static_cast<double>(src[ch]);
      }
    }
  }
}

void BlendAccumulator::resolve(std::int64_t first, std::int64_t last, Raster& out) const {
  if (first < row_offset_ || last > row_offset_ + height_) {
    throw DimensionError("resolve range outside the accumulator band");
  }
  for (std::int64_t row = first; row < last; ++row) {
    for (std::int64_t col = 0; col < width_; ++col) {
      const auto px = static_cast<std::size_t>((row - row_offset_) * width_ + col);
      const double w = weight_sum_[px];
      if (!(w > 0.0)) {
        throw DimensionError("pixel (" + std::to_string(row) + "," + std::to_string(col) +
                             ") received no tile weight");
      }
      for (std::int64_t ch = 0; ch < channels_; ++ch) {
        out.at(row, col, ch) =
            static_cast<float>(value_sum_[px * static_cast<std::size_t>(channels_) + ch] / w);
      }
    }
  }
}

void BlendAccumulator::rebase(std::int64_t new_offset, std::int64_t new_height) {
  std::vector<double> values(static_cast<std::size_t>(new_height * width_ * channels_), 0.0);
  std::vector<double> weights(static_cast<std::size_t>(new_height * width_), 0.0);
  const auto keep_first = std::max(new_offset, row_offset_);
  const auto keep_last = std::min(new_offset + new_height, row_offset_ + height_);
  for (auto row = keep_first; row < keep_last; ++row) {
    const auto src = static_cast<std::size_t>((row - row_offset_) * width_);
    const auto dst = static_cast<std::size_t>((row - new_offset) * width_);
    std::copy_n(weight_sum_.begin() + static_cast<std::ptrdiff_t>(src), width_,
                weights.begin() + static_cast<std::ptrdiff_t>(dst));
    std::copy_n(value_sum_.begin() + static_cast<std::ptrdiff_t>(src * channels_), width_ * channels_,
                values.begin() + static_cast<std::ptrdiff_t>(dst * channels_));
  }
  row_offset_ = new_offset;
  height_ = new_height;
  value_sum_ = std::move(values);
  weight_sum_ = std::move(weights);
}

TileTranslator make_tile_translator(const Generator& generator, std::mutex* device_lock,
                                    torch::Device device) {
  return [generator, device_lock, device](const torch::Tensor& batch) {
    std::unique_lock<std::mutex> lock;
    if (device_lock) {
      lock = std::unique_lock(*device_lock);
    }
    return translate(*generator, batch.to(device)).to(torch::kCPU);
  };
}

namespace {

// Mirror without repeating the edge pixel, folding as often as needed for tiny sources.
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) {
    return 0;
  }
  const std::int64_t period = 2 * n - 2;
  const std::int64_t m = i % period;
  return m < n ? m : period - m;
}

Raster reflect_pad(const Raster& source, std::int64_t height, std::int64_t width) {
  Raster out(height, width, source.channels(), source.depth());
  for (std::int64_t r = 0; r < height; ++r) {
    const auto sr = reflect_index(r, source.height());
    for (std::int64_t c = 0; c < width; ++c) {
      const auto sc = reflect_index(c, source.width());
      for (std::int64_t ch = 0; ch < source.channels(); ++ch) {
        out.at(r, c, ch) = source.at(sr, sc, ch);
      }
    }
  }
  return out;
}

std::int64_t coverable_extent(std::int64_t extent, std::int64_t tile, std::int64_t stride) {
  const auto steps = (extent - tile + stride - 1) / stride;
  return tile + steps * stride;
}

BlendResult blend_covered(const TileTranslator& translator, const Raster& source, const TilePlan& plan,
                          const BlendParams& params) {
  const auto start = std::chrono::steady_clock::now();
  const auto t = plan.tile_size;
  const auto weights = patch_weight_map(t, params.sigma);
  const auto image = to_tensor(source);
  BlendResult result{Raster(source.height(), source.width(), source.channels(), source.depth()), {}};

  const auto n_rows = plan.tile_rows;
  const auto band_rows = params.band_tile_rows == 0 ? n_rows : std::min(params.band_tile_rows, n_rows);
  auto row_origin = [&](std::int64_t i) { return plan.origins[static_cast<std::size_t>(i * plan.tile_cols)].row; };

  BlendAccumulator acc(0, row_origin(band_rows - 1) + t, source.width(), source.channels());
  std::int64_t band_end = band_rows;  // tile rows [band_end - band_rows, band_end) are accumulating
  const auto finish_band = [&] {
    // rows above the next band's first tile receive no further contributions
    const auto done = band_end < n_rows ? row_origin(band_end) : source.height();
    acc.resolve(acc.row_offset(), done, result.montage);
    if (band_end < n_rows) {
      const auto next_last = std::min(band_end + band_rows, n_rows) - 1;
      acc.rebase(done, row_origin(next_last) + t - done);
    }
    band_end = std::min(band_end + band_rows, n_rows);
  };

  // Batches run across band boundaries; their outputs are added band by band in plan order.
  const auto n_tiles = plan.origins.size();
  for (std::size_t i = 0; i < n_tiles; i += static_cast<std::size_t>(params.batch_size)) {
    const auto count = std::min(static_cast<std::size_t>(params.batch_size), n_tiles - i);
    std::vector<torch::Tensor> tiles;
    tiles.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
      const auto& o = plan.origins[i + k];
      tiles.push_back(image.narrow(2, o.row, t).narrow(3, o.col, t));
    }
    const auto batch = torch::cat(tiles, 0).contiguous();
    const auto out = translator(batch);
    ++result.stats.generator_calls;
    if (out.sizes() != batch.sizes()) {
      throw DimensionError("translator changed the tile shape");
    }
    for (std::size_t k = 0; k < count; ++k) {
      if (static_cast<std::int64_t>((i + k) / static_cast<std::size_t>(plan.tile_cols)) >= band_end) finish_band();
      acc.add(out[static_cast<std::int64_t>(k)], plan.origins[i + k], weights);
    }
    result.stats.tiles += static_cast<std::int64_t>(count);
  }
  finish_band();
  result.stats.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace

BlendResult blend_montage(const TileTranslator& translator, const Raster& source, const BlendParams& params) {
  params.validate();
  if (source.empty()) {
    throw DimensionError("cannot blend an empty raster");
  }
  if (source.height() >= params.tile_size && source.width() >= params.tile_size) {
    const auto plan = plan_tiles(source.height(), source.width(), params.tile_size, params.stride);
    if (plan.fully_covered()) {
      return blend_covered(translator, source, plan, params);
    }
    if (!params.pad_reflect) {
      throw DimensionError("tile plan leaves an uncovered margin of " + std::to_string(plan.uncovered_bottom) +
                           " rows and " + std::to_string(plan.uncovered_right) + " columns");
    }
  } else if (!params.pad_reflect) {
    throw DimensionError("tile size " + std::to_string(params.tile_size) + " does not fit in " +
                         std::to_string(source.height()) + "x" + std::to_string(source.width()));
  }
  const auto h = coverable_extent(source.height(), params.tile_size, params.stride);
  const auto w = coverable_extent(source.width(), params.tile_size, params.stride);
  const auto padded = reflect_pad(source, h, w);
  auto result = blend_covered(translator, padded, plan_tiles(h, w, params.tile_size, params.stride), params);
  result.montage = result.montage.crop(0, 0, source.height(), source.width());
  return result;
}

BlendResult convert_image(const TileTranslator& translator, const Raster& source_8bit,
                          const BlendParams& params) {
  auto result = blend_montage(translator, normalize(source_8bit), params);
  result.montage = denormalize(result.montage).raster;
  return result;
}

namespace {

double column_gradient(const Raster& m, std::int64_t col) {
  double sum = 0.0;
  for (std::int64_t r = 0; r < m.height(); ++r) {
    for (std::int64_t ch = 0; ch < m.channels(); ++ch) {
      sum += std::abs(static_cast<double>(m.at(r, col, ch)) - m.at(r, col - 1, ch));
    }
  }
  return sum / static_cast<double>(m.height() * m.channels());
}

double row_gradient(const Raster& m, std::int64_t row) {
  double sum = 0.0;
  for (std::int64_t c = 0; c < m.width(); ++c) {
    for (std::int64_t ch = 0; ch < m.channels(); ++ch) {
      sum += std::abs(static_cast<double>(m.at(row, c, ch)) - m.at(row - 1, c, ch));
    }
  }
  return sum / static_cast<double>(m.width() * m.channels());
}

std::set<std::int64_t> boundary_lines(const std::vector<std::int64_t>& origins, std::int64_t tile,
                                      std::int64_t extent) {
  std::set<std::int64_t> lines;
  for (auto o : origins) {
    if (o > 0) lines.insert(o);
    if (o + tile < extent) lines.insert(o + tile);
  }
  return lines;
}

std::optional<std::int64_t> control_line(std::int64_t line, std::int64_t offset, std::int64_t extent,
                                         const std::set<std::int64_t>& boundaries) {
  for (auto candidate : {line - offset, line + offset}) {
    if (candidate >= 1 && candidate < extent && !boundaries.contains(candidate)) {
      return candidate;
    }
  }
  return std::nullopt;
}

}  // namespace

double seam_metric(const Raster& montage, const TilePlan& plan) {
  if (montage.height() != plan.image_height || montage.width() != plan.image_width) {
    throw DimensionError("tile plan does not match montage geometry");
  }
  std::vector<std::int64_t> rows, cols;
  for (std::int64_t i = 0; i < plan.tile_rows; ++i) rows.push_back(plan.origins[static_cast<std::size_t>(i * plan.tile_cols)].row);
  for (std::int64_t j = 0; j < plan.tile_cols; ++j) cols.push_back(plan.origins[static_cast<std::size_t>(j)].col);
  const auto offset = std::max<std::int64_t>(1, plan.stride / 2);

  double boundary = 0.0, control = 0.0;
  std::int64_t n = 0;
  const auto col_lines = boundary_lines(cols, plan.tile_size, montage.width());
  for (auto c : col_lines) {
    if (auto ctrl = control_line(c, offset, montage.width(), col_lines)) {
      boundary += column_gradient(montage, c);
      control += column_gradient(montage, *ctrl);
      ++n;
    }
  }
  const auto row_lines = boundary_lines(rows, plan.tile_size, montage.height());
  for (auto r : row_lines) {
    if (auto ctrl = control_line(r, offset, montage.height(), row_lines)) {
      boundary += row_gradient(montage, r);
      control += row_gradient(montage, *ctrl);
      ++n;
    }
  }
  return n == 0 ? 0.0 : (boundary - control) / static_cast<double>(n);
}

}  // namespace muse2he
