#include "imcx/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <cstdio>
#include <random>

#include <json.hpp>

#include "imcx/errors.hpp"
#include "imcx/imc_io.hpp"
#include "imcx/tiff.hpp"

namespace imcx::synth {
namespace {

struct Point {
  double y;
  double x;
};

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TissueParams TissueParams::defaults() {
  TissueParams p;
  p.baseline_intensity = {{"COX4", 18000},  {"Dystrophin", 22000}, {"GRIM19", 16000}, {"MTCO1", 17000},
                          {"NDUFB8", 20000}, {"OSCP", 15000},       {"SDHA", 16000},   {"TOM22", 14000},
                          {"UqCRC2", 19000}, {"VDAC1", 21000}};
  return p;
}

void TissueParams::validate() const {
  auto fraction = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
  };
  fraction(hole_fraction, "hole_fraction");
  fraction(deficient_fiber_fraction, "deficient_fiber_fraction");
  fraction(rrf_fraction, "rrf_fraction");
  if (!(deficiency_factor > 0.0 && deficiency_factor <= 1.0)) throw ParameterError("deficiency_factor must lie in (0, 1]");
  if (!(rrf_gain >= 1.0)) throw ParameterError("rrf_gain must be >= 1");
  if (fiber_count < 1) throw ParameterError("fiber_count must be >= 1");
  if (image_size < 8) throw ParameterError("image_size must be >= 8");
  if (!(mean_fiber_diameter > 0.0)) throw ParameterError("mean_fiber_diameter must be positive");
  if (!(membrane_thickness > 0.0)) throw ParameterError("membrane_thickness must be positive");
  if (!(subsarcolemmal_width >= 0.0)) throw ParameterError("subsarcolemmal_width must be non-negative");
  if (!(noise_sd >= 0.0)) throw ParameterError("noise_sd must be non-negative");
  if (!(fiber_intensity_sd >= 0.0)) throw ParameterError("fiber_intensity_sd must be non-negative");
  if (baseline_intensity.empty()) throw ParameterError("no channels configured (baseline_intensity is empty)");
  if (!baseline_intensity.count(membrane_channel)) {
    throw ParameterError("membrane channel '" + membrane_channel + "' has no baseline intensity");
  }
  for (const auto& [name, v] : baseline_intensity) {
    if (!(v >= 0.0 && v <= 65535.0)) throw ParameterError("baseline for '" + name + "' outside [0, 65535]");
  }
  // Centres keep half a diameter apart; each fibre then needs at least a disc of that size.
  const double spacing = 0.5 * mean_fiber_diameter;
  const double needed = fiber_count * std::numbers::pi / 4.0 * spacing * spacing;
  if (needed > 0.9 * static_cast<double>(image_size) * image_size) {
    throw ParameterError("image of " + std::to_string(image_size) + " px cannot host " +
                         std::to_string(fiber_count) + " fibres of diameter " +
                         std::to_string(mean_fiber_diameter));
  }
}

std::set<int> GroundTruth::fiber_ids() const {
  std::set<int> ids;
  for (int v : fiber_label_mask)
    if (v > 0) ids.insert(v);
  return ids;
}

Subject generate_tissue(const TissueParams& params, ClassLabel class_label, std::uint64_t seed,
                        std::string subject_id) {
  params.validate();
  const int n = params.image_size;
  const std::size_t area = static_cast<std::size_t>(n) * n;

  // Fibre centres by dart throwing with a minimum spacing.
  std::mt19937_64 geo(derive_seed(seed, 0));
  std::uniform_real_distribution<double> coord(0.0, static_cast<double>(n));
  const double min_d2 = std::pow(0.5 * params.mean_fiber_diameter, 2);
  std::vector<Point> centres;
  const long max_attempts = 2000L * params.fiber_count;
  for (long attempt = 0; attempt < max_attempts && static_cast<int>(centres.size()) < params.fiber_count; ++attempt) {
    Point p{coord(geo), coord(geo)};
    bool ok = std::all_of(centres.begin(), centres.end(), [&](const Point& c) {
      return (c.y - p.y) * (c.y - p.y) + (c.x - p.x) * (c.x - p.x) >= min_d2;
    });
    if (ok) centres.push_back(p);
  }
  if (static_cast<int>(centres.size()) < params.fiber_count) {
    throw ParameterError("could only place " + std::to_string(centres.size()) + " of " +
                         std::to_string(params.fiber_count) + " fibres in a " + std::to_string(n) + " px image");
  }

  // Voronoi labelling plus distance to the nearest cell boundary.
  GroundTruth truth;
  truth.height = n;
  truth.width = n;
  truth.fiber_label_mask.assign(area, 0);
  truth.membrane_mask.assign(area, 0);
  truth.subsarcolemmal_mask.assign(area, 0);
  std::vector<double> boundary_dist(area, 0.0);
  const std::size_t k = centres.size();
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      std::size_t best = 0;
      double best_d2 = std::numeric_limits<double>::max();
      for (std::size_t j = 0; j < k; ++j) {
        const double d2 = (centres[j].y - py) * (centres[j].y - py) + (centres[j].x - px) * (centres[j].x - px);
        if (d2 < best_d2) {
          best_d2 = d2;
          best = j;
        }
      }
      double bd = std::numeric_limits<double>::max();
      for (std::size_t j = 0; j < k; ++j) {
        if (j == best) continue;
        const double d2 = (centres[j].y - py) * (centres[j].y - py) + (centres[j].x - px) * (centres[j].x - px);
        const double sep = std::hypot(centres[j].y - centres[best].y, centres[j].x - centres[best].x);
        bd = std::min(bd, (d2 - best_d2) / (2.0 * sep));
      }
      const std::size_t i = static_cast<std::size_t>(y) * n + x;
      truth.fiber_label_mask[i] = static_cast<int>(best) + 1;
      boundary_dist[i] = bd;
      const double half = 0.5 * params.membrane_thickness;
      if (bd < half) {
        truth.membrane_mask[i] = 1;
      } else if (bd < half + params.subsarcolemmal_width) {
        truth.subsarcolemmal_mask[i] = 1;
      }
    }
  }

  // Holes: drop whole fibres until the requested area is gone.
  std::mt19937_64 holes(derive_seed(seed, 1));
  if (params.hole_fraction > 0.0) {
    std::vector<std::size_t> fibre_area(k + 1, 0);
    for (int v : truth.fiber_label_mask) ++fibre_area[v];
    std::vector<int> order(k);
    std::iota(order.begin(), order.end(), 1);
    std::shuffle(order.begin(), order.end(), holes);
    const double target = params.hole_fraction * static_cast<double>(area);
    std::set<int> removed;
    double removed_area = 0.0;
    for (int id : order) {
      if (removed_area >= target || removed.size() + 1 >= k) break;
      removed.insert(id);
      removed_area += static_cast<double>(fibre_area[id]);
    }
    for (std::size_t i = 0; i < area; ++i) {
      if (removed.count(truth.fiber_label_mask[i])) {
        truth.fiber_label_mask[i] = 0;
        truth.membrane_mask[i] = 0;
        truth.subsarcolemmal_mask[i] = 0;
      }
    }
  }
  const std::set<int> present = truth.fiber_ids();

  // Phenotypes.
  std::mt19937_64 pheno(derive_seed(seed, 2));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const bool patient = class_label == ClassLabel::patient;
  const double p_def = patient ? params.deficient_fiber_fraction : 0.0;
  const double p_rrf = patient ? params.rrf_fraction : 0.0;
  std::vector<double> fibre_factor(k + 1, 1.0);
  for (int id = 1; id <= static_cast<int>(k); ++id) {
    const bool deficient = unit(pheno) < p_def;
    const bool rrf = unit(pheno) < p_rrf;
    fibre_factor[id] = std::max(0.2, 1.0 + params.fiber_intensity_sd * gauss(pheno));
    if (!present.count(id)) continue;
    if (deficient) truth.deficient_fiber_ids.insert(id);
    if (rrf) truth.rrf_fiber_ids.insert(id);
  }

  // Channel rendering.
  Subject subject;
  subject.truth = std::move(truth);
  const GroundTruth& gt = subject.truth;
  ChannelStack& stack = subject.stack;
  stack.subject_id = std::move(subject_id);
  stack.class_label = class_label;
  stack.pixel_size_um = 1.0;

  std::mt19937_64 noise_rng(derive_seed(seed, 3));
  std::normal_distribution<double> noise(0.0, params.noise_sd > 0 ? params.noise_sd : 1.0);
  const double noise_bound = std::floor(3.0 * params.noise_sd);
  const double half = 0.5 * params.membrane_thickness;

  std::vector<std::string> order;
  for (auto c : kCanonicalChannels)
    if (params.baseline_intensity.count(std::string(c))) order.emplace_back(c);
  for (const auto& [name, v] : params.baseline_intensity)
    if (!contains(order, name)) order.push_back(name);

  for (const std::string& name : order) {
    const double base = params.baseline_intensity.at(name);
    const bool is_membrane = name == params.membrane_channel;
    const bool deficient_channel = contains(params.deficient_channels, name);
    const bool rrf_channel = contains(params.rrf_channels, name);
    Image16 img(n, n);
    for (std::size_t i = 0; i < area; ++i) {
      const int id = gt.fiber_label_mask[i];
      double v = 0.0;
      if (id > 0) {
        if (is_membrane) {
          if (gt.membrane_mask[i]) v = base * fibre_factor[id];
        } else if (!gt.membrane_mask[i]) {
          double profile = 1.0;
          if (gt.subsarcolemmal_mask[i]) {
            const double depth = (boundary_dist[i] - half) / std::max(params.subsarcolemmal_width, 1e-9);
            profile += params.subsarcolemmal_boost * (1.0 - depth);
            if (rrf_channel && gt.rrf_fiber_ids.count(id)) profile *= params.rrf_gain;
          }
          v = base * fibre_factor[id] * profile;
          if (deficient_channel && gt.deficient_fiber_ids.count(id)) v *= params.deficiency_factor;
        }
      }
      if (params.noise_sd > 0) v += std::clamp(noise(noise_rng), -noise_bound, noise_bound);
      img.pixels[i] = static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, 65535.0));
    }
    stack.add_channel(name, std::move(img));
  }
  return subject;
}

std::vector<Subject> generate_cohort(const TissueParams& params, int n_control, int n_patient, std::uint64_t seed) {
  if (n_control < 0 || n_patient < 0) throw ParameterError("cohort sizes must be non-negative");
  std::vector<Subject> cohort;
  cohort.reserve(static_cast<std::size_t>(n_control + n_patient));
  auto name = [](const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%02d", prefix, i);
    return std::string(buf);
  };
  std::uint64_t index = 0;
  for (int i = 0; i < n_control; ++i) {
    cohort.push_back(generate_tissue(params, ClassLabel::control, derive_seed(seed, 100 + index++), name("control", i)));
  }
  for (int i = 0; i < n_patient; ++i) {
    cohort.push_back(generate_tissue(params, ClassLabel::patient, derive_seed(seed, 100 + index++), name("patient", i)));
  }
  return cohort;
}

std::string params_to_json(const TissueParams& p) {
  nlohmann::ordered_json j;
  j["image_size"] = p.image_size;
  j["fiber_count"] = p.fiber_count;
  j["mean_fiber_diameter"] = p.mean_fiber_diameter;
  j["membrane_thickness"] = p.membrane_thickness;
  j["subsarcolemmal_width"] = p.subsarcolemmal_width;
  j["subsarcolemmal_boost"] = p.subsarcolemmal_boost;
  j["baseline_intensity"] = p.baseline_intensity;
  j["fiber_intensity_sd"] = p.fiber_intensity_sd;
  j["noise_sd"] = p.noise_sd;
  j["hole_fraction"] = p.hole_fraction;
  j["deficient_fiber_fraction"] = p.deficient_fiber_fraction;
  j["deficiency_factor"] = p.deficiency_factor;
  j["rrf_fraction"] = p.rrf_fraction;
  j["rrf_gain"] = p.rrf_gain;
  j["membrane_channel"] = p.membrane_channel;
  j["deficient_channels"] = p.deficient_channels;
  j["rrf_channels"] = p.rrf_channels;
  return j.dump(2);
}

TissueParams params_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tissue params: ") + e.what());
  }
  TissueParams p = TissueParams::defaults();
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("image_size", p.image_size);
    get("fiber_count", p.fiber_count);
    get("mean_fiber_diameter", p.mean_fiber_diameter);
    get("membrane_thickness", p.membrane_thickness);
    get("subsarcolemmal_width", p.subsarcolemmal_width);
    get("subsarcolemmal_boost", p.subsarcolemmal_boost);
    get("baseline_intensity", p.baseline_intensity);
    get("fiber_intensity_sd", p.fiber_intensity_sd);
    get("noise_sd", p.noise_sd);
    get("hole_fraction", p.hole_fraction);
    get("deficient_fiber_fraction", p.deficient_fiber_fraction);
    get("deficiency_factor", p.deficiency_factor);
    get("rrf_fraction", p.rrf_fraction);
    get("rrf_gain", p.rrf_gain);
    get("membrane_channel", p.membrane_channel);
    get("deficient_channels", p.deficient_channels);
    get("rrf_channels", p.rrf_channels);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tissue params: ") + e.what());
  }
  return p;
}

void write_subject(const std::filesystem::path& dir, const Subject& subject, const TissueParams& params) {
  std::filesystem::create_directories(dir);
  const std::string id = subject.stack.subject_id;
  write_stack(dir / (id + ".ome.tiff"), subject.stack);

  const GroundTruth& gt = subject.truth;
  tiff::Document masks;
  Image16 labels(gt.height, gt.width), membrane(gt.height, gt.width);
  for (std::size_t i = 0; i < labels.pixels.size(); ++i) {
    labels.pixels[i] = static_cast<std::uint16_t>(gt.fiber_label_mask[i]);
    membrane.pixels[i] = gt.membrane_mask[i];
  }
  masks.pages.push_back({std::move(labels), "fiber_label"});
  masks.pages.push_back({std::move(membrane), "membrane"});
  tiff::write(dir / (id + ".labels.tiff"), masks);

  nlohmann::ordered_json meta;
  meta["subject_id"] = id;
  meta["class_label"] = std::string(to_string(subject.stack.class_label));
  meta["deficient_fiber_ids"] = gt.deficient_fiber_ids;
  meta["rrf_fiber_ids"] = gt.rrf_fiber_ids;
  meta["params"] = nlohmann::ordered_json::parse(params_to_json(params));
  std::ofstream out(dir / (id + ".truth.json"));
  out << meta.dump(2) << '\n';
  if (!out) throw IoError("cannot write ground truth for " + id);
}

}  // namespace imcx::synth
