#include <doctest.h>

#include <cmath>

#include "imcx/errors.hpp"
#include "imcx/viz.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace imcx;
using namespace imcx::viz;

namespace {

Grid constant_grid(int h, int w, double v) { return Grid{h, w, std::vector<double>(static_cast<std::size_t>(h) * w, v)}; }

xai::RelevanceMap map_of(Tensor values, xai::Method method = xai::Method::lrp_z) {
  xai::RelevanceMap m;
  m.method = method;
  m.values = std::move(values);
  m.patch_ref = "s@0,0";
  return m;
}

std::uint8_t plane(const png::Image& img, std::size_t pixel, int c) { return img.pixels[3 * pixel + c]; }

}  // namespace

TEST_SUITE("viz") {
  TEST_CASE("signal mode leaves the blue plane black") {
    const Grid mem = Grid::from_channel(oracle::random_tensor(1, 20, 20, 1, 0, 65535), 0);
    const Grid mito = Grid::from_channel(oracle::random_tensor(1, 20, 20, 2, 0, 65535), 0);
    const OverlayImage o = render_overlay(mem, mito, std::nullopt, OverlayMode::signal);
    for (std::size_t i = 0; i < 400; ++i) CHECK(plane(o.image, i, 2) == 0);
    CHECK(o.legend.find("B=0") != std::string::npos);
  }

  TEST_CASE("attribution mode blue plane is the normalised magnitude") {
    const Grid mem = constant_grid(6, 5, 1000);
    const Grid mito = constant_grid(6, 5, 2000);
    const Tensor v = oracle::random_tensor(2, 6, 5, 3, -2.0, 1.0);
    const OverlayImage o = render_overlay(mem, mito, map_of(v), OverlayMode::attribution);
    std::vector<double> mag(30, 0.0);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 30; ++i) mag[i] += std::abs(v.data[c * 30 + i]);
    const double m = *std::max_element(mag.begin(), mag.end());
    for (int i = 0; i < 30; ++i) CHECK(plane(o.image, i, 2) == std::lround(255.0 * mag[i] / m));

    const OverlayImage zero = render_overlay(mem, mito, map_of(Tensor(1, 6, 5)), OverlayMode::attribution);
    for (int i = 0; i < 30; ++i) CHECK(plane(zero.image, i, 2) == 0);
  }

  TEST_CASE("red and green planes follow the display normalisation") {
    const OverlayImage full =
        render_overlay(constant_grid(4, 4, 65535), constant_grid(4, 4, 0), std::nullopt, OverlayMode::signal);
    for (int i = 0; i < 16; ++i) {
      CHECK(plane(full.image, i, 0) == 255);
      CHECK(plane(full.image, i, 1) == 0);
    }
    Grid ramp{1, 3, {0.0, 50.0, 100.0}};
    const OverlayImage rel = render_overlay(ramp, ramp, std::nullopt, OverlayMode::signal, DisplayNorm::image_max());
    CHECK(plane(rel.image, 0, 0) == 0);
    CHECK(plane(rel.image, 1, 0) == 128);
    CHECK(plane(rel.image, 2, 1) == 255);
    CHECK(display_value(1.5, 1.0) == 255);
    CHECK(display_value(-1.0, 1.0) == 0);
    CHECK(display_value(5.0, 0.0) == 0);
  }

  TEST_CASE("overlay argument errors") {
    const Grid a = constant_grid(4, 4, 1), b = constant_grid(4, 5, 1);
    CHECK_THROWS_AS(render_overlay(a, b, std::nullopt, OverlayMode::signal), ShapeError);
    CHECK_THROWS_AS(render_overlay(a, a, std::nullopt, OverlayMode::attribution), ParameterError);
    CHECK_THROWS_AS(render_overlay(a, a, map_of(Tensor(1, 4, 4)), OverlayMode::signal), ParameterError);
    CHECK_THROWS_AS(render_overlay(a, a, map_of(Tensor(1, 3, 4)), OverlayMode::attribution), ShapeError);
  }

  TEST_CASE("zero map renders uniform mid-grey") {
    const OverlayImage o = render_map(map_of(Tensor(1, 8, 8)));
    for (std::size_t i = 0; i < 64; ++i)
      for (int c = 0; c < 3; ++c) CHECK(std::abs(plane(o.image, i, c) - 128) <= 1);
  }

  TEST_CASE("negated map renders colour-inverted") {
    const Tensor v = oracle::random_tensor(1, 10, 10, 4);
    Tensor neg = v;
    for (double& x : neg.data) x = -x;
    for (MapNorm norm : {MapNorm::absmax(), MapNorm::symmetric_percentile(95)}) {
      const OverlayImage a = render_map(map_of(v), norm);
      const OverlayImage b = render_map(map_of(neg), norm);
      for (std::size_t i = 0; i < 100; ++i) {
        CHECK(std::abs(plane(a.image, i, 0) - plane(b.image, i, 2)) <= 1);
        CHECK(std::abs(plane(a.image, i, 2) - plane(b.image, i, 0)) <= 1);
      }
    }
  }

  TEST_CASE("single hot pixel saturates exactly one pixel") {
    Tensor v(1, 7, 7);
    v.at(0, 3, 2) = 100.0;
    const OverlayImage o = render_map(map_of(v), MapNorm::absmax());
    int saturated = 0;
    for (std::size_t i = 0; i < 49; ++i) saturated += plane(o.image, i, 0) == 255;
    CHECK(saturated == 1);
    CHECK(plane(o.image, 3 * 7 + 2, 0) == 255);
    CHECK(plane(o.image, 3 * 7 + 2, 2) == 0);
  }

  TEST_CASE("argmax magnitude is the most saturated pixel under absmax") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      const Tensor v = oracle::random_tensor(1, 9, 9, rng(), -3.0, 3.0);
      const OverlayImage o = render_map(map_of(v), MapNorm::absmax());
      std::size_t arg = 0;
      for (std::size_t i = 1; i < v.size(); ++i)
        if (std::abs(v.data[i]) > std::abs(v.data[arg])) arg = i;
      auto saturation = [&](std::size_t i) { return std::abs(plane(o.image, i, 0) - plane(o.image, i, 2)); };
      for (std::size_t i = 0; i < v.size(); ++i) CHECK(saturation(i) <= saturation(arg));
      CHECK(saturation(arg) == 255);
    }
  }

  TEST_CASE("percentile scaling clips outliers") {
    Tensor v(1, 10, 10, 1.0);
    v.data[0] = 1000.0;
    const OverlayImage o = render_map(map_of(v), MapNorm::symmetric_percentile(50));
    CHECK(plane(o.image, 0, 0) == 255);
    CHECK(plane(o.image, 5, 0) == 255);
    const OverlayImage a = render_map(map_of(v), MapNorm::absmax());
    CHECK(plane(a.image, 5, 0) < 140);
    Tensor bad(1, 2, 2);
    bad.data[1] = std::nan("");
    CHECK_THROWS_AS(render_map(map_of(bad)), ParameterError);
  }

  TEST_CASE("triptych layout") {
    const Tensor input = oracle::random_tensor(1, 512, 512, 1, 0, 1);
    const png::Image overlay{512, 512, 3, std::vector<std::uint8_t>(512 * 512 * 3, 10)};
    const png::Image map{512, 512, 3, std::vector<std::uint8_t>(512 * 512 * 3, 20)};
    const png::Image t = render_triptych(input, overlay, map);
    CHECK(t.width == 3 * 512 + 8);
    CHECK(t.height == 512);
    CHECK(t.pixels[(100 * t.width + 10) * 3] == 10);
    CHECK(t.pixels[(100 * t.width + 513) * 3] == 255);
    CHECK(t.pixels[(100 * t.width + 2 * 512 + 8 + 1) * 3] == 20);
    CHECK(render_triptych(input, overlay, map, false).width == 3 * 512);
    const png::Image shorter{512, 500, 3, std::vector<std::uint8_t>(512 * 500 * 3, 0)};
    CHECK_THROWS_AS(render_triptych(input, overlay, shorter), ShapeError);
  }

  TEST_CASE("grey input panel spans the full range") {
    const Tensor input = oracle::random_tensor(2, 16, 16, 3, 0.0, 1.0);
    const png::Image g = grayscale_panel(input);
    const auto [lo, hi] = std::minmax_element(g.pixels.begin(), g.pixels.end());
    CHECK(*lo == 0);
    CHECK(*hi == 255);
  }

  TEST_CASE("PNG encoding is deterministic and lossless") {
    test::TempDir dir;
    const Tensor input = oracle::random_tensor(1, 32, 32, 1, 0, 1);
    const OverlayImage m = render_map(map_of(oracle::random_tensor(1, 32, 32, 2)));
    const OverlayImage o = render_overlay(constant_grid(32, 32, 100), constant_grid(32, 32, 200),
                                          map_of(oracle::random_tensor(1, 32, 32, 2)), OverlayMode::attribution);
    const png::Image t = render_triptych(input, o.image, m.image);
    CHECK(png::encode(t) == png::encode(render_triptych(input, o.image, m.image)));
    png::write(dir / "a.png", t);
    png::write(dir / "b.png", t);
    CHECK(test::read_bytes(dir / "a.png") == test::read_bytes(dir / "b.png"));
    const png::Image back = png::read(dir / "a.png");
    CHECK(back.width == t.width);
    CHECK(back.height == t.height);
    CHECK(back.pixels == t.pixels);
    test::write_bytes(dir / "bad.png", "\x89PNG broken");
    CHECK_THROWS_AS(png::read(dir / "bad.png"), IoError);
  }
}
