#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "imcx/errors.hpp"
#include "imcx/imc_io.hpp"
#include "imcx/synthgen.hpp"
#include "imcx/tiff.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace imcx;
using namespace imcx::synth;

namespace {

TissueParams small_params() {
  TissueParams p = TissueParams::defaults();
  p.image_size = 192;
  p.fiber_count = 14;
  return p;
}

// Mean of one channel over the non-membrane pixels of the given fibres.
double interior_mean(const Subject& s, const std::string& channel, const std::set<int>& ids) {
  const Image16& img = s.stack.channel(channel);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (s.truth.membrane_mask[i] || !ids.count(s.truth.fiber_label_mask[i])) continue;
    total += img.pixels[i];
    ++n;
  }
  return total / static_cast<double>(n);
}

std::vector<double> per_fibre_means(const Subject& s, const std::string& channel) {
  std::vector<double> out;
  for (int id : s.truth.fiber_ids()) out.push_back(interior_mean(s, channel, {id}));
  return out;
}

}  // namespace

TEST_SUITE("synthgen") {
  TEST_CASE("without noise or holes the membrane channel is nonzero exactly on the membrane mask") {
    TissueParams p = small_params();
    p.noise_sd = 0.0;
    p.hole_fraction = 0.0;
    const Subject s = generate_tissue(p, ClassLabel::control, 4);
    const Image16& m = s.stack.channel(p.membrane_channel);
    std::size_t membrane_pixels = 0;
    for (std::size_t i = 0; i < m.pixels.size(); ++i) {
      CHECK((m.pixels[i] != 0) == (s.truth.membrane_mask[i] != 0));
      membrane_pixels += s.truth.membrane_mask[i];
    }
    CHECK(membrane_pixels > 0);
  }

  TEST_CASE("generation is deterministic in params, label and seed") {
    const TissueParams p = small_params();
    const Subject a = generate_tissue(p, ClassLabel::patient, 9);
    const Subject b = generate_tissue(p, ClassLabel::patient, 9);
    for (const auto& [name, img] : a.stack.channels()) CHECK(b.stack.channel(name) == img);
    CHECK(a.truth.fiber_label_mask == b.truth.fiber_label_mask);
    CHECK(a.truth.deficient_fiber_ids == b.truth.deficient_fiber_ids);
    const Subject c = generate_tissue(p, ClassLabel::patient, 10);
    CHECK_FALSE(c.stack.channel("NDUFB8") == a.stack.channel("NDUFB8"));
  }

  TEST_CASE("deficient fibres carry the configured fraction of the healthy intensity") {
    TissueParams p = TissueParams::defaults();
    p.deficiency_factor = 0.3;
    p.deficient_fiber_fraction = 0.5;
    const Subject s = generate_tissue(p, ClassLabel::patient, 21);
    const auto& def = s.truth.deficient_fiber_ids;
    REQUIRE(!def.empty());
    std::set<int> healthy;
    for (int id : s.truth.fiber_ids())
      if (!def.count(id)) healthy.insert(id);
    REQUIRE(!healthy.empty());
    for (const auto& ch : p.deficient_channels) {
      const double ratio = interior_mean(s, ch, def) / interior_mean(s, ch, healthy);
      // Fibre-to-fibre variation (sd 0.08) over tens of fibres bounds the spread.
      CHECK(ratio == doctest::Approx(0.3).epsilon(0.1));
    }
    const double unaffected = interior_mean(s, "SDHA", def) / interior_mean(s, "SDHA", healthy);
    CHECK(unaffected == doctest::Approx(1.0).epsilon(0.1));
  }

  TEST_CASE("cohort shape and naming") {
    const TissueParams p = small_params();
    const auto cohort = generate_cohort(p, 4, 10, 1);
    REQUIRE(cohort.size() == 14);
    std::set<std::string> ids;
    int controls = 0;
    for (const auto& s : cohort) {
      ids.insert(s.stack.subject_id);
      controls += s.stack.class_label == ClassLabel::control;
    }
    CHECK(ids.size() == 14);
    CHECK(controls == 4);
    CHECK(cohort.front().stack.subject_id == "control_00");
    CHECK(generate_cohort(p, 0, 0, 1).empty());
    CHECK_THROWS_AS(generate_cohort(p, -1, 2, 1), ParameterError);
  }

  TEST_CASE("without planted deficiency patient and control fibre intensities are indistinguishable") {
    TissueParams p = small_params();
    p.deficient_fiber_fraction = 0.0;
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
      const auto cohort = generate_cohort(p, 2, 2, seed);
      std::vector<double> control, patient;
      for (const auto& s : cohort) {
        auto m = per_fibre_means(s, "NDUFB8");
        auto& dst = s.stack.class_label == ClassLabel::control ? control : patient;
        dst.insert(dst.end(), m.begin(), m.end());
      }
      CHECK(oracle::ks_p_value(control, patient) > 0.01);
    }
  }

  TEST_CASE("the planted signal is detectable by the same test") {
    TissueParams p = small_params();
    std::vector<double> control, patient;
    for (const auto& s : generate_cohort(p, 2, 2, 1)) {
      auto m = per_fibre_means(s, "NDUFB8");
      auto& dst = s.stack.class_label == ClassLabel::control ? control : patient;
      dst.insert(dst.end(), m.begin(), m.end());
    }
    CHECK(oracle::ks_p_value(control, patient) < 0.01);
  }

  TEST_CASE("holes carry no signal above three noise deviations") {
    TissueParams p = small_params();
    p.hole_fraction = 0.2;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const Subject s = generate_tissue(p, ClassLabel::patient, seed);
      std::size_t hole_pixels = 0;
      for (const auto& [name, img] : s.stack.channels())
        for (std::size_t i = 0; i < img.pixels.size(); ++i) {
          if (s.truth.fiber_label_mask[i] != 0) continue;
          ++hole_pixels;
          CHECK(img.pixels[i] <= 3.0 * p.noise_sd);
        }
      CHECK(hole_pixels > 0);
    }
  }

  TEST_CASE("deficient fraction converges to the configured value") {
    TissueParams p = TissueParams::defaults();
    p.image_size = 768;
    p.mean_fiber_diameter = 20.0;
    p.fiber_count = 900;
    p.hole_fraction = 0.0;
    for (double fraction : {0.2, 0.5}) {
      p.deficient_fiber_fraction = fraction;
      for (std::uint64_t seed : {1u, 2u}) {
        const Subject s = generate_tissue(p, ClassLabel::patient, seed);
        const double n = static_cast<double>(s.truth.fiber_ids().size());
        const double observed = static_cast<double>(s.truth.deficient_fiber_ids.size()) / n;
        CHECK(std::abs(observed - fraction) <= 3.0 * std::sqrt(fraction * (1.0 - fraction) / n));
      }
    }
  }

  TEST_CASE("controls never contain deficient or ragged-red fibres and id sets are subsets") {
    TissueParams p = small_params();
    p.deficient_fiber_fraction = 1.0;
    p.rrf_fraction = 1.0;
    for (const auto& s : generate_cohort(p, 3, 3, 8)) {
      const auto ids = s.truth.fiber_ids();
      if (s.stack.class_label == ClassLabel::control) {
        CHECK(s.truth.deficient_fiber_ids.empty());
        CHECK(s.truth.rrf_fiber_ids.empty());
      } else {
        CHECK(!s.truth.deficient_fiber_ids.empty());
      }
      for (int id : s.truth.deficient_fiber_ids) CHECK(ids.count(id));
      for (int id : s.truth.rrf_fiber_ids) CHECK(ids.count(id));
      CHECK(s.truth.height == s.stack.height());
      CHECK(s.truth.fiber_label_mask.size() == s.stack.channel("NDUFB8").pixels.size());
    }
  }

  TEST_CASE("parameter validation") {
    TissueParams p = small_params();
    p.image_size = 64;
    p.fiber_count = 1000;
    CHECK_THROWS_AS(generate_tissue(p, ClassLabel::control, 1), ParameterError);
    for (auto mutate : std::vector<std::function<void(TissueParams&)>>{
             [](TissueParams& q) { q.deficiency_factor = 0.0; },
             [](TissueParams& q) { q.deficiency_factor = 1.5; },
             [](TissueParams& q) { q.hole_fraction = 1.2; },
             [](TissueParams& q) { q.rrf_gain = 0.5; },
             [](TissueParams& q) { q.fiber_count = 0; },
         }) {
      TissueParams q = small_params();
      mutate(q);
      CHECK_THROWS_AS(q.validate(), ParameterError);
    }
  }

  TEST_CASE("parameters round trip through JSON") {
    TissueParams p = small_params();
    p.deficiency_factor = 0.45;
    p.deficient_channels = {"COX4"};
    const TissueParams back = params_from_json(params_to_json(p));
    CHECK(params_to_json(back) == params_to_json(p));
    CHECK(back.deficiency_factor == 0.45);
  }

  TEST_CASE("written subjects load back with their ground truth") {
    test::TempDir dir;
    const TissueParams p = small_params();
    const Subject s = generate_tissue(p, ClassLabel::patient, 3, "patient_07");
    write_subject(dir.path(), s, p);
    const ChannelStack back = load_stack(dir / "patient_07.ome.tiff");
    CHECK(back.class_label == ClassLabel::patient);
    for (const auto& [name, img] : s.stack.channels()) CHECK(back.channel(name) == img);
    const auto masks = tiff::read(dir / "patient_07.labels.tiff");
    REQUIRE(masks.pages.size() == 2);
    for (std::size_t i = 0; i < s.truth.fiber_label_mask.size(); ++i)
      REQUIRE(masks.pages[0].image.pixels[i] == s.truth.fiber_label_mask[i]);
    const auto meta = nlohmann::json::parse(test::read_bytes(dir / "patient_07.truth.json"));
    CHECK(meta.at("deficient_fiber_ids").get<std::set<int>>() == s.truth.deficient_fiber_ids);
  }
}
