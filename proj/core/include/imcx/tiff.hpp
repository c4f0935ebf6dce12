#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "imcx/stack.hpp"

namespace imcx::tiff {

struct Page {
  Image16 image;
  std::string page_name;  // PageName tag (285), empty when absent
};

struct Document {
  std::vector<Page> pages;
  std::string image_description;  // first-page ImageDescription, OME-XML for OME-TIFF
};

// Writes a little-endian baseline TIFF: one uncompressed 16-bit grayscale page per entry.
void write(const std::filesystem::path& path, const Document& doc);

// Reads classic (non-Big) TIFF in either byte order. Only uncompressed, single-sample,
// 16-bit unsigned strip images decode; anything else raises IoError.
Document read(const std::filesystem::path& path);

}  // namespace imcx::tiff
