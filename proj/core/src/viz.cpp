#include "imcx/viz.hpp"

#include <algorithm>
#include <cmath>

#include "imcx/errors.hpp"
#include "imcx/imc_io.hpp"

namespace imcx::viz {

Grid Grid::from_channel(const Tensor& t, int channel) {
  if (channel < 0 || channel >= t.channels) throw ShapeError("channel index out of range");
  const auto c = t.channel(channel);
  return Grid{t.height, t.width, std::vector<double>(c.begin(), c.end())};
}

std::uint8_t display_value(double v, double scale) {
  if (!(scale > 0.0)) return 0;
  const double x = std::clamp(v / scale, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(255.0 * x));
}

namespace {

double plane_scale(const Grid& g, const DisplayNorm& norm) {
  if (norm.kind == DisplayNorm::Kind::unit_max) return norm.full_scale;
  double m = 0.0;
  for (double v : g.values) m = std::max(m, v);
  return m;
}

Tensor channel_sum(const Tensor& t) {
  Tensor out(1, t.height, t.width);
  for (int c = 0; c < t.channels; ++c) {
    const auto ch = t.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) out.data[i] += ch[i];
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> magnitude_plane(const Tensor& values) {
  std::vector<double> mag(values.plane(), 0.0);
  for (int c = 0; c < values.channels; ++c) {
    const auto ch = values.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) mag[i] += std::abs(ch[i]);
  }
  const double m = mag.empty() ? 0.0 : *std::max_element(mag.begin(), mag.end());
  std::vector<std::uint8_t> out(mag.size());
  for (std::size_t i = 0; i < mag.size(); ++i) out[i] = display_value(mag[i], m);
  return out;
}

OverlayImage render_overlay(const Grid& membrane, const Grid& mito_mass, const std::optional<xai::RelevanceMap>& map,
                            OverlayMode mode, DisplayNorm norm) {
  if (membrane.height != mito_mass.height || membrane.width != mito_mass.width) {
    throw ShapeError("overlay: membrane and mitochondrial mass grids differ in size");
  }
  if (mode == OverlayMode::attribution && !map) throw ParameterError("overlay: attribution mode needs a map");
  if (mode == OverlayMode::signal && map) throw ParameterError("overlay: signal mode takes no map");
  if (map && (map->values.height != membrane.height || map->values.width != membrane.width)) {
    throw ShapeError("overlay: map " + map->values.shape_string() + " does not match the channel grids");
  }
  OverlayImage out;
  out.image.width = membrane.width;
  out.image.height = membrane.height;
  out.image.channels = 3;
  out.image.pixels.assign(static_cast<std::size_t>(membrane.width) * membrane.height * 3, 0);
  const double rs = plane_scale(membrane, norm);
  const double gs = plane_scale(mito_mass, norm);
  std::vector<std::uint8_t> blue;
  if (map) blue = magnitude_plane(map->values);
  for (std::size_t i = 0; i < membrane.values.size(); ++i) {
    out.image.pixels[3 * i] = display_value(membrane.values[i], rs);
    out.image.pixels[3 * i + 1] = display_value(mito_mass.values[i], gs);
    out.image.pixels[3 * i + 2] = blue.empty() ? 0 : blue[i];
  }
  out.legend = map ? "R=membrane G=mitochondrial_mass B=|" + std::string(xai::to_string(map->method)) + "|"
                   : "R=membrane G=mitochondrial_mass B=0";
  if (map) out.provenance = map->patch_ref;
  return out;
}

OverlayImage render_map(const xai::RelevanceMap& map, MapNorm norm, Colormap colormap) {
  if (!all_finite(map.values)) throw ParameterError("render_map: map has non-finite values");
  const Tensor v = channel_sum(map.values);
  double scale = max_abs(v);
  if (norm.kind == MapNorm::Kind::symmetric_percentile && v.size() > 0) {
    std::vector<double> mags(v.data.size());
    std::transform(v.data.begin(), v.data.end(), mags.begin(), [](double x) { return std::abs(x); });
    const double p = percentile(std::move(mags), norm.p);
    if (p > 0.0) scale = p;
  }
  if (!(scale > 0.0)) scale = 1.0;
  OverlayImage out;
  out.image.width = v.width;
  out.image.height = v.height;
  out.image.channels = 3;
  out.image.pixels.resize(v.size() * 3);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = std::clamp(v.data[i] / scale, -1.0, 1.0);
    std::uint8_t r, g, b;
    if (colormap == Colormap::diverging) {
      r = static_cast<std::uint8_t>(std::lround(127.5 * (1.0 + t)));
      g = 128;
      b = static_cast<std::uint8_t>(std::lround(127.5 * (1.0 - t)));
    } else {
      r = g = b = static_cast<std::uint8_t>(std::lround(127.5 * (1.0 + t)));
    }
    out.image.pixels[3 * i] = r;
    out.image.pixels[3 * i + 1] = g;
    out.image.pixels[3 * i + 2] = b;
  }
  out.legend = std::string(xai::to_string(map.method)) + (colormap == Colormap::diverging ? " diverging" : " grey");
  out.provenance = map.patch_ref;
  return out;
}

png::Image grayscale_panel(const Tensor& patch) {
  const Tensor v = channel_sum(patch);
  png::Image img{v.width, v.height, 3, std::vector<std::uint8_t>(v.size() * 3, 0)};
  if (v.size() == 0) return img;
  const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint8_t g = range > 0.0 ? display_value(v.data[i] - *lo, range) : 0;
    img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = g;
  }
  return img;
}

png::Image render_triptych(const Tensor& input_patch, const png::Image& overlay, const png::Image& map_image,
                           bool gutters) {
  const png::Image input = grayscale_panel(input_patch);
  const png::Image* panels[] = {&overlay, &input, &map_image};
  for (const auto* p : panels) {
    if (p->height != overlay.height) throw ShapeError("triptych: panels differ in height");
    if (p->channels != 3) throw ParameterError("triptych: panels must be RGB");
  }
  const int gap = gutters ? kGutter : 0;
  png::Image out;
  out.height = overlay.height;
  out.width = overlay.width + input.width + map_image.width + 2 * gap;
  out.channels = 3;
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * 3, 255);
  int x0 = 0;
  for (const auto* p : panels) {
    for (int y = 0; y < p->height; ++y) {
      std::copy_n(p->pixels.begin() + static_cast<std::ptrdiff_t>(y) * p->width * 3, p->width * 3,
                  out.pixels.begin() + (static_cast<std::ptrdiff_t>(y) * out.width + x0) * 3);
    }
    x0 += p->width + gap;
  }
  return out;
}

}  // namespace imcx::viz
