#include "imcx/tiff.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "imcx/errors.hpp"

namespace imcx::tiff {
namespace {

enum Tag : std::uint16_t {
  kNewSubfileType = 254,
  kImageWidth = 256,
  kImageLength = 257,
  kBitsPerSample = 258,
  kCompression = 259,
  kPhotometric = 262,
  kImageDescription = 270,
  kStripOffsets = 273,
  kSamplesPerPixel = 277,
  kRowsPerStrip = 278,
  kStripByteCounts = 279,
  kPlanarConfig = 284,
  kPageName = 285,
  kTileWidth = 322,
  kSampleFormat = 339,
};

enum Type : std::uint16_t { kByte = 1, kAscii = 2, kShort = 3, kLong = 4 };

std::size_t type_size(std::uint16_t type) {
  switch (type) {
    case 1: case 2: case 6: case 7: return 1;
    case 3: case 8: return 2;
    case 4: case 9: case 11: return 4;
    case 5: case 10: case 12: return 8;
    default: return 0;
  }
}

class ByteWriter {
 public:
  std::vector<std::uint8_t> bytes;

  std::size_t pos() const { return bytes.size(); }
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v & 0xff));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    u16(static_cast<std::uint16_t>(v & 0xffff));
    u16(static_cast<std::uint16_t>(v >> 16));
  }
  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
  }
  void align2() {
    if (bytes.size() % 2) u8(0);
  }
};

struct Entry {
  std::uint16_t tag;
  std::uint16_t type;
  std::uint32_t count;
  std::vector<std::uint8_t> payload;  // little-endian encoded values
};

Entry short_entry(std::uint16_t tag, std::uint16_t v) {
  return {tag, kShort, 1, {static_cast<std::uint8_t>(v & 0xff), static_cast<std::uint8_t>(v >> 8)}};
}

Entry long_entry(std::uint16_t tag, std::uint32_t v) {
  Entry e{tag, kLong, 1, {}};
  for (int i = 0; i < 4; ++i) e.payload.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  return e;
}

Entry ascii_entry(std::uint16_t tag, const std::string& s) {
  Entry e{tag, kAscii, static_cast<std::uint32_t>(s.size() + 1), {}};
  e.payload.assign(s.begin(), s.end());
  e.payload.push_back(0);
  return e;
}

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> data, bool little) : data_(std::move(data)), little_(little) {}

  std::size_t size() const { return data_.size(); }
  void require(std::size_t at, std::size_t n) const {
    if (at + n > data_.size() || at + n < at) throw IoError("TIFF: truncated file");
  }
  std::uint16_t u16(std::size_t at) const {
    require(at, 2);
    return little_ ? static_cast<std::uint16_t>(data_[at] | (data_[at + 1] << 8))
                   : static_cast<std::uint16_t>((data_[at] << 8) | data_[at + 1]);
  }
  std::uint32_t u32(std::size_t at) const {
    require(at, 4);
    std::uint32_t a = u16(at), b = u16(at + 2);
    return little_ ? (a | (b << 16)) : ((a << 16) | b);
  }
  const std::uint8_t* ptr(std::size_t at) const { return data_.data() + at; }
  bool little() const { return little_; }

 private:
  std::vector<std::uint8_t> data_;
  bool little_;
};

struct RawEntry {
  std::uint16_t type = 0;
  std::uint32_t count = 0;
  std::size_t value_offset = 0;  // where the value bytes live
};

std::vector<std::uint32_t> read_uints(const ByteReader& r, const RawEntry& e) {
  std::vector<std::uint32_t> out;
  out.reserve(e.count);
  for (std::uint32_t i = 0; i < e.count; ++i) {
    if (e.type == kShort) {
      out.push_back(r.u16(e.value_offset + 2 * i));
    } else if (e.type == kLong) {
      out.push_back(r.u32(e.value_offset + 4 * i));
    } else if (e.type == kByte) {
      r.require(e.value_offset + i, 1);
      out.push_back(*r.ptr(e.value_offset + i));
    } else {
      throw IoError("TIFF: unexpected field type " + std::to_string(e.type));
    }
  }
  return out;
}

std::string read_ascii(const ByteReader& r, const RawEntry& e) {
  r.require(e.value_offset, e.count);
  std::string s(reinterpret_cast<const char*>(r.ptr(e.value_offset)), e.count);
  while (!s.empty() && s.back() == '\0') s.pop_back();
  return s;
}

}  // namespace

void write(const std::filesystem::path& path, const Document& doc) {
  if (doc.pages.empty()) throw IoError("TIFF: refusing to write a file without pages");
  ByteWriter w;
  w.u8('I');
  w.u8('I');
  w.u16(42);
  const std::size_t first_ifd_ptr = w.pos();
  w.u32(0);

  std::size_t prev_next_ptr = first_ifd_ptr;
  for (std::size_t p = 0; p < doc.pages.size(); ++p) {
    const Page& page = doc.pages[p];
    const Image16& img = page.image;
    if (img.height <= 0 || img.width <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.height) * img.width) {
      throw StructuralError("TIFF: page " + std::to_string(p) + " has an invalid grid");
    }
    w.align2();
    const std::size_t strip_offset = w.pos();
    for (std::uint16_t v : img.pixels) w.u16(v);
    const auto strip_bytes = static_cast<std::uint32_t>(img.pixels.size() * 2);

    std::vector<Entry> entries;
    entries.push_back(long_entry(kNewSubfileType, 0));
    entries.push_back(long_entry(kImageWidth, static_cast<std::uint32_t>(img.width)));
    entries.push_back(long_entry(kImageLength, static_cast<std::uint32_t>(img.height)));
    entries.push_back(short_entry(kBitsPerSample, 16));
    entries.push_back(short_entry(kCompression, 1));
    entries.push_back(short_entry(kPhotometric, 1));
    if (p == 0 && !doc.image_description.empty()) {
      entries.push_back(ascii_entry(kImageDescription, doc.image_description));
    }
    entries.push_back(long_entry(kStripOffsets, static_cast<std::uint32_t>(strip_offset)));
    entries.push_back(short_entry(kSamplesPerPixel, 1));
    entries.push_back(long_entry(kRowsPerStrip, static_cast<std::uint32_t>(img.height)));
    entries.push_back(long_entry(kStripByteCounts, strip_bytes));
    entries.push_back(short_entry(kPlanarConfig, 1));
    if (!page.page_name.empty()) entries.push_back(ascii_entry(kPageName, page.page_name));
    entries.push_back(short_entry(kSampleFormat, 1));

    // Out-of-line payloads first, then the IFD itself.
    std::map<std::size_t, std::size_t> external;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].payload.size() > 4) {
        w.align2();
        external[i] = w.pos();
        for (auto b : entries[i].payload) w.u8(b);
      }
    }
    w.align2();
    const std::size_t ifd_pos = w.pos();
    w.patch_u32(prev_next_ptr, static_cast<std::uint32_t>(ifd_pos));
    w.u16(static_cast<std::uint16_t>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const Entry& e = entries[i];
      w.u16(e.tag);
      w.u16(e.type);
      w.u32(e.count);
      if (auto it = external.find(i); it != external.end()) {
        w.u32(static_cast<std::uint32_t>(it->second));
      } else {
        std::uint8_t buf[4] = {0, 0, 0, 0};
        std::memcpy(buf, e.payload.data(), e.payload.size());
        for (auto b : buf) w.u8(b);
      }
    }
    prev_next_ptr = w.pos();
    w.u32(0);
  }
  if (w.bytes.size() > 0xffffffffULL) throw IoError("TIFF: file exceeds 4 GiB");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("TIFF: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("TIFF: write failed for " + path.string());
}

Document read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("TIFF: no such file " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("TIFF: cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (data.size() < 8) throw IoError("TIFF: " + path.string() + " is not a TIFF file");
  bool little;
  if (data[0] == 'I' && data[1] == 'I') {
    little = true;
  } else if (data[0] == 'M' && data[1] == 'M') {
    little = false;
  } else {
    throw IoError("TIFF: " + path.string() + " has no TIFF byte-order mark");
  }
  ByteReader r(std::move(data), little);
  const auto magic = r.u16(2);
  if (magic == 43) throw IoError("TIFF: BigTIFF is not supported");
  if (magic != 42) throw IoError("TIFF: bad magic number in " + path.string());

  Document doc;
  std::set<std::uint32_t> visited;
  std::uint32_t ifd = r.u32(4);
  while (ifd != 0) {
    if (!visited.insert(ifd).second) throw IoError("TIFF: IFD chain contains a cycle");
    const std::uint16_t n = r.u16(ifd);
    std::map<std::uint16_t, RawEntry> tags;
    for (std::uint16_t i = 0; i < n; ++i) {
      const std::size_t at = ifd + 2 + 12 * static_cast<std::size_t>(i);
      RawEntry e;
      const std::uint16_t tag = r.u16(at);
      e.type = r.u16(at + 2);
      e.count = r.u32(at + 4);
      const std::size_t bytes = type_size(e.type) * e.count;
      e.value_offset = bytes <= 4 ? at + 8 : r.u32(at + 8);
      tags[tag] = e;
    }
    const std::size_t page_index = doc.pages.size();
    auto get = [&](std::uint16_t tag, std::uint32_t fallback) -> std::uint32_t {
      auto it = tags.find(tag);
      if (it == tags.end()) return fallback;
      auto v = read_uints(r, it->second);
      return v.empty() ? fallback : v.front();
    };
    auto fail = [&](const std::string& what) {
      throw IoError("TIFF: page " + std::to_string(page_index) + " cannot be decoded: " + what);
    };
    if (tags.count(kTileWidth)) fail("tiled layout");
    if (!tags.count(kImageWidth) || !tags.count(kImageLength)) fail("missing dimensions");
    if (get(kCompression, 1) != 1) fail("compression scheme " + std::to_string(get(kCompression, 1)));
    if (get(kSamplesPerPixel, 1) != 1) fail("more than one sample per pixel");
    if (get(kBitsPerSample, 1) != 16) fail(std::to_string(get(kBitsPerSample, 1)) + "-bit samples");
    if (get(kSampleFormat, 1) != 1) fail("non-unsigned sample format");
    if (!tags.count(kStripOffsets) || !tags.count(kStripByteCounts)) fail("missing strip table");

    const auto width = static_cast<int>(get(kImageWidth, 0));
    const auto height = static_cast<int>(get(kImageLength, 0));
    if (width <= 0 || height <= 0) fail("zero-sized image");
    const auto offsets = read_uints(r, tags.at(kStripOffsets));
    const auto counts = read_uints(r, tags.at(kStripByteCounts));
    if (offsets.size() != counts.size()) fail("strip table size mismatch");

    Page page;
    page.image = Image16(height, width);
    const std::size_t expected = page.image.pixels.size() * 2;
    std::size_t written = 0;
    for (std::size_t s = 0; s < offsets.size() && written < expected; ++s) {
      r.require(offsets[s], counts[s]);
      const std::size_t take = std::min<std::size_t>(counts[s], expected - written);
      for (std::size_t b = 0; b + 1 < take; b += 2) {
        page.image.pixels[(written + b) / 2] = r.u16(offsets[s] + b);
      }
      written += take;
    }
    if (written != expected) fail("strip data shorter than image");
    if (auto it = tags.find(kPageName); it != tags.end() && it->second.type == kAscii) {
      page.page_name = read_ascii(r, it->second);
    }
    if (page_index == 0) {
      if (auto it = tags.find(kImageDescription); it != tags.end() && it->second.type == kAscii) {
        doc.image_description = read_ascii(r, it->second);
      }
    }
    doc.pages.push_back(std::move(page));
    ifd = r.u32(ifd + 2 + 12 * static_cast<std::size_t>(n));
  }
  if (doc.pages.empty()) throw IoError("TIFF: " + path.string() + " contains no images");
  return doc;
}

}  // namespace imcx::tiff
