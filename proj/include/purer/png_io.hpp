#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace purer {

/// 8-bit interleaved image.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

/// Decodes any 8/16-bit PNG to 8-bit RGB or gray (`channels`); alpha is dropped.
Image8 read_png(const std::string& path, int channels = 3);
void write_png(const std::string& path, const Image8& image);

}  // namespace purer
