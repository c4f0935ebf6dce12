#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace imcx::png {

// 8-bit image, interleaved samples, channels = 1 (gray) or 3 (RGB).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;
};

std::vector<std::uint8_t> encode(const Image& image);
void write(const std::filesystem::path& path, const Image& image);
Image read(const std::filesystem::path& path);

}  // namespace imcx::png
