#pragma once

#include <cstdint>
#include <vector>

namespace muse2he {

/// Tile origins along one axis: k * stride for every k with k * stride + tile <= extent.
inline std::vector<std::int64_t> axis_origins(std::int64_t extent, std::int64_t tile,
                                              std::int64_t stride) {
  std::vector<std::int64_t> out;
  for (std::int64_t o = 0; o + tile <= extent; o += stride) {
    out.push_back(o);
  }
  return out;
}

}  // namespace muse2he
