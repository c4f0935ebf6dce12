#include "imcx/stack.hpp"

#include <algorithm>

#include "imcx/errors.hpp"

namespace imcx {

std::string_view to_string(ClassLabel label) {
  return label == ClassLabel::control ? "control" : "patient";
}

ClassLabel parse_class_label(std::string_view text) {
  if (text == "control") return ClassLabel::control;
  if (text == "patient") return ClassLabel::patient;
  throw ValidationError("unknown class label '" + std::string(text) + "'");
}

bool is_canonical_channel(std::string_view name) {
  return std::find(kCanonicalChannels.begin(), kCanonicalChannels.end(), name) !=
         kCanonicalChannels.end();
}

void ChannelStack::add_channel(std::string name, Image16 image) {
  if (has_channel(name)) throw ValidationError("duplicate channel '" + name + "'");
  if (image.pixels.size() != static_cast<std::size_t>(image.height) * image.width) {
    throw StructuralError("channel '" + name + "' pixel buffer does not match its dimensions");
  }
  if (!channels_.empty() && (image.height != height() || image.width != width())) {
    throw StructuralError("channel '" + name + "' is " + std::to_string(image.height) + "x" +
                          std::to_string(image.width) + " but the stack is " +
                          std::to_string(height()) + "x" + std::to_string(width()));
  }
  channels_.emplace_back(std::move(name), std::move(image));
}

const Image16& ChannelStack::channel(std::string_view name) const {
  for (const auto& [n, img] : channels_)
    if (n == name) return img;
  throw ValidationError("stack '" + subject_id + "' has no channel '" + std::string(name) + "'");
}

bool ChannelStack::has_channel(std::string_view name) const {
  return std::any_of(channels_.begin(), channels_.end(), [&](const auto& c) { return c.first == name; });
}

std::vector<std::string> ChannelStack::channel_names() const {
  std::vector<std::string> names;
  for (const auto& c : channels_) names.push_back(c.first);
  return names;
}

}  // namespace imcx
