#include "muse2he/raster.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "muse2he/errors.hpp"

namespace muse2he {

namespace {

std::size_t sample_count(std::int64_t h, std::int64_t w, std::int64_t c) {
  if (h < 0 || w < 0 || c < 0) {
    throw DimensionError("raster dimensions must be nonnegative");
  }
  return static_cast<std::size_t>(h * w * c);
}

Raster from_mat(const cv::Mat& decoded) {
  if (decoded.empty()) {
    throw ConfigError("could not decode image");
  }
  if (decoded.depth() != CV_8U) {
    throw ConfigError("only 8-bit images are supported");
  }
  const int n = decoded.channels();
  if (n != 1 && n != 3 && n != 4) {
    throw ConfigError("unsupported channel count " + std::to_string(n));
  }
  Raster out(decoded.rows, decoded.cols, 3, PixelDepth::kUint8);
  for (int r = 0; r < decoded.rows; ++r) {
    const auto* row = decoded.ptr<std::uint8_t>(r);
    for (int c = 0; c < decoded.cols; ++c) {
      const std::uint8_t* px = row + static_cast<std::ptrdiff_t>(c) * n;
      if (n == 1) {
        out.at(r, c, 0) = out.at(r, c, 1) = out.at(r, c, 2) = px[0];
      } else {
        // OpenCV stores BGR(A)
        out.at(r, c, 0) = px[2];
        out.at(r, c, 1) = px[1];
        out.at(r, c, 2) = px[0];
      }
    }
  }
  return out;
}

cv::Mat to_bgr_mat(const Raster& raster) {
  if (raster.depth() != PixelDepth::kUint8) {
    throw DimensionError("image writers expect an 8-bit raster, got " + to_string(raster.depth()));
  }
  if (raster.channels() != 3) {
    throw DimensionError("image writers expect 3 channels");
  }
  cv::Mat bgr(static_cast<int>(raster.height()), static_cast<int>(raster.width()), CV_8UC3);
  for (int r = 0; r < bgr.rows; ++r) {
    auto* row = bgr.ptr<std::uint8_t>(r);
    for (int c = 0; c < bgr.cols; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        row[c * 3 + (2 - ch)] = static_cast<std::uint8_t>(raster.at(r, c, ch));
      }
    }
  }
  return bgr;
}

}  // namespace

std::string to_string(PixelDepth depth) {
  switch (depth) {
    case PixelDepth::kUint8: return "uint8";
    case PixelDepth::kUnitFloat: return "unit_float";
    case PixelDepth::kSignedFloat: return "signed_float";
  }
  return "unknown";
}

Raster::Raster(std::int64_t height, std::int64_t width, std::int64_t channels, PixelDepth depth)
    : height_(height),
      width_(width),
      channels_(channels),
      depth_(depth),
      values_(sample_count(height, width, channels), 0.0f) {}

Raster::Raster(std::int64_t height, std::int64_t width, std::int64_t channels, PixelDepth depth,
               std::vector<float> values)
    : height_(height), width_(width), channels_(channels), depth_(depth), values_(std::move(values)) {
  if (values_.size() != sample_count(height, width, channels)) {
    throw DimensionError("raster value count " + std::to_string(values_.size()) +
                         " does not match " + std::to_string(height) + "x" +
                         std::to_string(width) + "x" + std::to_string(channels));
  }
}

float Raster::max_value() const { return depth_ == PixelDepth::kUint8 ? 255.0f : 1.0f; }

float Raster::min_value() const { return depth_ == PixelDepth::kSignedFloat ? -1.0f : 0.0f; }

Raster Raster::crop(std::int64_t row, std::int64_t col, std::int64_t height,
                    std::int64_t width) const {
  if (row < 0 || col < 0 || height < 0 || width < 0 || row + height > height_ ||
      col + width > width_) {
    throw DimensionError("crop " + std::to_string(height) + "x" + std::to_string(width) + " at (" +
                         std::to_string(row) + "," + std::to_string(col) + ") exceeds " +
                         std::to_string(height_) + "x" + std::to_string(width_));
  }
  Raster out(height, width, channels_, depth_);
  const auto row_len = static_cast<std::size_t>(width * channels_);
  for (std::int64_t r = 0; r < height; ++r) {
    const auto src = static_cast<std::size_t>(((row + r) * width_ + col) * channels_);
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(src), row_len,
                out.values_.begin() + static_cast<std::ptrdiff_t>(r * width * channels_));
  }
  return out;
}

bool Raster::in_domain() const {
  const float lo = min_value();
  const float hi = max_value();
  const bool integral = depth_ == PixelDepth::kUint8;
  return std::all_of(values_.begin(), values_.end(), [&](float v) {
    return v >= lo && v <= hi && (!integral || v == std::floor(v));
  });
}

torch::Tensor to_tensor(const Raster& raster) {
  auto hwc = torch::from_blob(const_cast<float*>(raster.values().data()),
                              {raster.height(), raster.width(), raster.channels()}, torch::kFloat32);
  return hwc.permute({2, 0, 1}).unsqueeze(0).contiguous();
}

torch::Tensor to_batch(std::span<const Raster> rasters) {
  if (rasters.empty()) {
    throw DimensionError("cannot batch zero rasters");
  }
  std::vector<torch::Tensor> parts;
  parts.reserve(rasters.size());
  for (const auto& r : rasters) {
    if (r.height() != rasters.front().height() || r.width() != rasters.front().width() ||
        r.channels() != rasters.front().channels()) {
      throw DimensionError("batched rasters must share geometry");
    }
    parts.push_back(to_tensor(r));
  }
  return torch::cat(parts, 0);
}

Raster from_tensor(const torch::Tensor& tensor, PixelDepth depth) {
  auto t = tensor.detach().to(torch::kCPU, torch::kFloat32);
  if (t.dim() == 4) {
    if (t.size(0) != 1) {
      throw DimensionError("from_tensor expects a single image, got batch of " +
                           std::to_string(t.size(0)));
    }
    t = t.squeeze(0);
  }
  if (t.dim() != 3) {
    throw DimensionError("from_tensor expects C x H x W");
  }
  auto hwc = t.permute({1, 2, 0}).contiguous();
  std::vector<float> values(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel());
  return Raster(hwc.size(0), hwc.size(1), hwc.size(2), depth, std::move(values));
}

Raster read_image(const std::filesystem::path& path) {
  cv::Mat decoded = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (decoded.empty()) {
    throw ConfigError("could not read image " + path.string());
  }
  return from_mat(decoded);
}

Raster decode_image(std::span<const std::uint8_t> bytes) {
  cv::Mat buffer(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
  return from_mat(cv::imdecode(buffer, cv::IMREAD_UNCHANGED));
}

void write_image(const Raster& raster, const std::filesystem::path& path) {
  const auto bgr = to_bgr_mat(raster);
  if (!cv::imwrite(path.string(), bgr)) {
    throw ConfigError("could not write image " + path.string());
  }
}

std::vector<std::uint8_t> encode_png(const Raster& raster) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_bgr_mat(raster), out)) {
    throw ConfigError("png encoding failed");
  }
  return out;
}

}  // namespace muse2he
