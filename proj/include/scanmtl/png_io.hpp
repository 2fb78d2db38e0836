#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "scanmtl/data.hpp"

namespace mcx::png {

/// 8-bit pixels, `channels` interleaved samples per pixel.
struct Raster {
  int rows = 0;
  int cols = 0;
  int channels = 1;
  std::vector<std::uint8_t> bytes;
};

/// Decodes any PNG into 8-bit grayscale (color is luma-converted, alpha
/// dropped, 16-bit stripped). Throws DataError when unreadable.
Raster read_gray8(const std::filesystem::path& path);
/// channels must be 1 (gray) or 3 (RGB).
void write(const std::filesystem::path& path, const Raster& raster);

Raster from_image(const Image& img);
Image to_image(const Raster& r);

}  // namespace mcx::png
