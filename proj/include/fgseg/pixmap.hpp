#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fgseg {

// 8-bit raster image: P5 graymap (channels=1) or P6 pixmap (channels=3,
// interleaved RGB), row-major.
struct Pixmap {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  std::uint8_t at(int y, int x, int ch = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
};

// Binary portable anymap, maxval 255 only. Header whitespace and '#'
// comments follow the anymap convention.
Pixmap load_pixmap(const std::filesystem::path& path);
void save_pixmap(const Pixmap& img, const std::filesystem::path& path);

}  // namespace fgseg
