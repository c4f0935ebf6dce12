#include "imcx/png.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "imcx/errors.hpp"

namespace imcx::png {

namespace {

// libpng reports errors by longjmp; the message is kept for the exception thrown afterwards.
void on_error(png_structp p, png_const_charp msg) {
  auto* buf = static_cast<char*>(png_get_error_ptr(p));
  std::strncpy(buf, msg, 255);
  buf[255] = '\0';
  png_longjmp(p, 1);
}
void on_warning(png_structp, png_const_charp) {}

void append(png_structp p, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
  out->insert(out->end(), data, data + n);
}

void flush(png_structp) {}

struct Reader {
  const std::vector<std::uint8_t>* bytes;
  std::size_t offset = 0;
};

void consume(png_structp p, png_bytep data, png_size_t n) {
  auto* r = static_cast<Reader*>(png_get_io_ptr(p));
  if (r->offset + n > r->bytes->size()) {
    png_error(p, "truncated file");
  }
  std::memcpy(data, r->bytes->data() + r->offset, n);
  r->offset += n;
}

}  // namespace

std::vector<std::uint8_t> encode(const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ParameterError("png: channels must be 1 or 3");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ShapeError("png: pixel buffer does not match dimensions");
  }
  std::vector<std::uint8_t> out;
  char message[256] = "";
  png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, message, on_error, on_warning);
  png_infop info = png_create_info_struct(p);
  if (setjmp(png_jmpbuf(p))) {
    png_destroy_write_struct(&p, &info);
    throw IoError(std::string("png: ") + message);
  }
  {
    png_set_write_fn(p, &out, append, flush);
    png_set_IHDR(p, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(p, 6);
    png_write_info(p, info);
    const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y) {
      png_write_row(p, const_cast<png_bytep>(image.pixels.data() + stride * y));
    }
    png_write_end(p, nullptr);
  }
  png_destroy_write_struct(&p, &info);
  return out;
}

void write(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("cannot write " + path.string());
}

Image read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError(path.string() + " is not a PNG");
  Reader reader{&bytes};
  Image image;
  char message[256] = "";
  png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, message, on_error, on_warning);
  png_infop info = png_create_info_struct(p);
  if (setjmp(png_jmpbuf(p))) {
    png_destroy_read_struct(&p, &info, nullptr);
    throw IoError("png: " + std::string(message) + " in " + path.string());
  }
  {
    png_set_read_fn(p, &reader, consume);
    png_read_info(p, info);
    png_set_strip_16(p);
    png_set_palette_to_rgb(p);
    png_set_strip_alpha(p);
    png_read_update_info(p, info);
    image.width = static_cast<int>(png_get_image_width(p, info));
    image.height = static_cast<int>(png_get_image_height(p, info));
    image.channels = png_get_channels(p, info);
    image.pixels.resize(static_cast<std::size_t>(image.width) * image.height * image.channels);
    const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
    for (int y = 0; y < image.height; ++y) png_read_row(p, image.pixels.data() + stride * y, nullptr);
  }
  png_destroy_read_struct(&p, &info, nullptr);
  return image;
}

}  // namespace imcx::png
