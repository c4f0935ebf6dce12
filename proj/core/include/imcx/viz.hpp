#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "imcx/png.hpp"
#include "imcx/tensor.hpp"
#include "imcx/xmethods.hpp"

namespace imcx::viz {

// Single-channel intensity grid (raw counts or normalised values).
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  static Grid from_channel(const Tensor& t, int channel);
};

struct DisplayNorm {
  enum class Kind { unit_max, image_max };
  Kind kind = Kind::unit_max;
  double full_scale = 65535.0;  // unit_max: full_scale maps to 255

  static DisplayNorm unit_max(double full_scale = 65535.0) { return {Kind::unit_max, full_scale}; }
  static DisplayNorm image_max() { return {Kind::image_max, 0.0}; }
};

enum class OverlayMode { attribution, signal };

struct OverlayImage {
  png::Image image;  // RGB
  std::string legend;
  std::string provenance;
};

std::uint8_t display_value(double v, double scale);

// R = membrane, G = mitochondrial mass, B = |map| summed over channels (attribution mode)
// or 0 (signal mode). Each plane is scaled by `norm`; |map| by its own maximum.
OverlayImage render_overlay(const Grid& membrane, const Grid& mito_mass, const std::optional<xai::RelevanceMap>& map,
                            OverlayMode mode, DisplayNorm norm = DisplayNorm::unit_max());

// Display-normalised magnitude plane used for the overlay's blue channel.
std::vector<std::uint8_t> magnitude_plane(const Tensor& values);

struct MapNorm {
  enum class Kind { symmetric_percentile, absmax };
  Kind kind = Kind::symmetric_percentile;
  double p = 99.0;

  static MapNorm symmetric_percentile(double p = 99.0) { return {Kind::symmetric_percentile, p}; }
  static MapNorm absmax() { return {Kind::absmax, 100.0}; }
};

enum class Colormap { diverging, grayscale };

// Signed values summed over channels, scaled to [-1, 1] and coloured; 0 sits at mid-grey.
OverlayImage render_map(const xai::RelevanceMap& map, MapNorm norm = MapNorm::symmetric_percentile(),
                        Colormap colormap = Colormap::diverging);

// Min-max grey rendering of a patch (channels summed).
png::Image grayscale_panel(const Tensor& patch);

// overlay | input | map, separated by 4-px white gutters unless `gutters` is false.
png::Image render_triptych(const Tensor& input_patch, const png::Image& overlay, const png::Image& map_image,
                           bool gutters = true);

inline constexpr int kGutter = 4;

}  // namespace imcx::viz
