#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "imcx/imc_io.hpp"
#include "imcx/synthgen.hpp"
#include "imcx/trainer.hpp"
#include "imcx/xmethods.hpp"

namespace imcx::pipeline {

struct IngestEntry {
  std::filesystem::path path;
  std::optional<std::string> subject_id;  // overrides the file's metadata
  std::optional<ClassLabel> class_label;
};

struct RunConfig {
  std::filesystem::path output_dir = "run";

  // data
  std::string source = "synthetic";  // synthetic | ingest
  synth::TissueParams synthetic = synth::TissueParams::defaults();
  int n_control = 4;
  int n_patient = 10;
  std::uint64_t data_seed = 0;
  std::vector<IngestEntry> ingest;
  ChannelMap channel_map;
  ChannelMode channel_mode = ChannelMode::strict;

  // preprocessing
  int patch_size = 512;
  int stride = 512;
  EdgePolicy edge_policy = EdgePolicy::drop;
  NormalizationPolicy normalization = NormalizationPolicy::unit_max();
  SplitRatios split;
  bool group_by_subject = false;
  std::uint64_t split_seed = 0;

  // training matrix: backbones x channel selections x seeds; "ALL" selects every channel
  std::vector<Backbone> backbones = {Backbone::smallcnn};
  std::vector<std::vector<std::string>> channel_selections = {
      {"ALL"},  {"COX4"}, {"Dystrophin"}, {"GRIM19"}, {"MTCO1"}, {"NDUFB8"},
      {"OSCP"}, {"SDHA"}, {"TOM22"},      {"UqCRC2"}, {"VDAC1"}};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3};
  TrainConfig train;  // backbone, seed and channel_selection are filled per run

  // explanation matrix
  std::vector<xai::Method> methods = {xai::kAllMethods.begin(), xai::kAllMethods.end()};
  int top_k = 5;
  int patches_per_class = 1;
  std::string membrane_channel = "Dystrophin";
  std::string mito_mass_channel = "VDAC1";
  double map_percentile = 99.0;

  // Throws ConfigError.
  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

enum class Stage { data, patchify, train, evaluate, explain, render, report };
inline constexpr Stage kStages[] = {Stage::data,    Stage::patchify, Stage::train, Stage::evaluate,
                                    Stage::explain, Stage::render,   Stage::report};
std::string_view to_string(Stage s);

struct Artifact {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct StageRecord {
  Stage stage = Stage::data;
  std::string status;     // complete | failed | skipped
  std::string input_key;  // checksum of the stage's config and upstream artifacts
  std::vector<Artifact> artifacts;
  std::string started;
  std::string finished;
  std::string message;
};

struct RunManifest {
  std::string config_sha256;
  std::string software_version;
  std::vector<StageRecord> stages;

  const StageRecord* find(Stage s) const;
  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  static std::optional<RunManifest> load(const std::filesystem::path& run_dir);
  void save(const std::filesystem::path& run_dir) const;
  // Every artifact of every complete stage exists and matches its checksum.
  bool verify(const std::filesystem::path& run_dir) const;
};

using Logger = std::function<void(const std::string&)>;

// Runs every stage up to and including `last`, skipping stages whose inputs are unchanged.
// A failing stage is recorded in the manifest and rethrown.
RunManifest run_experiment(const RunConfig& config, Stage last = Stage::report, const Logger& log = {});

// Markdown report for a run directory; stages missing from the manifest are listed as gaps.
std::string report(const RunManifest& manifest, const std::filesystem::path& run_dir);

std::string selection_name(const std::vector<std::string>& selection);

}  // namespace imcx::pipeline
