#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "imcx/random.hpp"
#include "imcx/stack.hpp"

namespace imcx::synth {

// Parameters of a synthetic muscle section. Lengths are pixels (1 um per pixel) unless noted.
struct TissueParams {
  int image_size = 512;
  int fiber_count = 80;
  double mean_fiber_diameter = 50.0;  // um; sets the minimum spacing of fibre centres
  double membrane_thickness = 3.0;
  double subsarcolemmal_width = 3.0;
  double subsarcolemmal_boost = 0.25;  // intensity gradient toward the membrane in every fibre
  std::map<std::string, double> baseline_intensity;
  double fiber_intensity_sd = 0.08;  // fibre-to-fibre multiplicative variation
  double noise_sd = 300.0;
  double hole_fraction = 0.05;
  double deficient_fiber_fraction = 0.5;
  double deficiency_factor = 0.3;
  double rrf_fraction = 0.1;
  double rrf_gain = 1.8;
  std::string membrane_channel = "Dystrophin";
  std::vector<std::string> deficient_channels = {"NDUFB8", "GRIM19"};
  std::vector<std::string> rrf_channels = {"VDAC1", "TOM22"};

  static TissueParams defaults();  // canonical 10-channel panel baselines

  // Throws ParameterError on invalid ranges or when the image cannot host fiber_count fibres.
  void validate() const;
};

struct GroundTruth {
  int height = 0;
  int width = 0;
  std::vector<int> fiber_label_mask;  // 0 = hole, k = fibre k
  std::vector<std::uint8_t> membrane_mask;
  std::vector<std::uint8_t> subsarcolemmal_mask;
  std::set<int> deficient_fiber_ids;
  std::set<int> rrf_fiber_ids;

  int label(int y, int x) const { return fiber_label_mask[static_cast<std::size_t>(y) * width + x]; }
  bool membrane(int y, int x) const { return membrane_mask[static_cast<std::size_t>(y) * width + x] != 0; }
  std::set<int> fiber_ids() const;
};

struct Subject {
  ChannelStack stack;
  GroundTruth truth;
};

Subject generate_tissue(const TissueParams& params, ClassLabel class_label, std::uint64_t seed,
                        std::string subject_id = "synthetic");

// Subjects are named control_00.., patient_00..; each gets a seed derived from (seed, index).
std::vector<Subject> generate_cohort(const TissueParams& params, int n_control, int n_patient,
                                     std::uint64_t seed);

// <dir>/<subject>.ome.tiff, <subject>.labels.tiff (fibre ids, 16-bit) and <subject>.truth.json.
void write_subject(const std::filesystem::path& dir, const Subject& subject, const TissueParams& params);

std::string params_to_json(const TissueParams& params);
TissueParams params_from_json(const std::string& json_text);

}  // namespace imcx::synth
