#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace imcx {

enum class ClassLabel { control = 0, patient = 1 };

std::string_view to_string(ClassLabel label);
ClassLabel parse_class_label(std::string_view text);

inline constexpr std::array<std::string_view, 10> kCanonicalChannels = {
    "COX4", "Dystrophin", "GRIM19", "MTCO1", "NDUFB8",
    "OSCP", "SDHA",       "TOM22",  "UqCRC2", "VDAC1"};

bool is_canonical_channel(std::string_view name);

// Unsigned 16-bit ion-count image, row-major.
struct Image16 {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> pixels;

  Image16() = default;
  Image16(int h, int w, std::uint16_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint16_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t at(int y, int x) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }

  bool operator==(const Image16&) const = default;
};

// One subject's co-registered channels. Channel order is insertion order.
class ChannelStack {
 public:
  std::string subject_id;
  ClassLabel class_label = ClassLabel::control;
  std::optional<std::string> subtype;
  double pixel_size_um = 1.0;

  // Throws StructuralError when the grid size differs from existing channels
  // and ValidationError on duplicate names.
  void add_channel(std::string name, Image16 image);

  const Image16& channel(std::string_view name) const;
  bool has_channel(std::string_view name) const;
  std::vector<std::string> channel_names() const;
  const std::vector<std::pair<std::string, Image16>>& channels() const { return channels_; }

  std::size_t channel_count() const { return channels_.size(); }
  int height() const { return channels_.empty() ? 0 : channels_.front().second.height; }
  int width() const { return channels_.empty() ? 0 : channels_.front().second.width; }

 private:
  std::vector<std::pair<std::string, Image16>> channels_;
};

}  // namespace imcx
