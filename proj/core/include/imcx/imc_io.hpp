#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "imcx/stack.hpp"
#include "imcx/tensor.hpp"

namespace imcx {

enum class ChannelMode { strict, permissive };

// Keys are a page index ("0", "1", ...) or a channel name as stored in the file;
// values are the names the stack will use.
using ChannelMap = std::map<std::string, std::string>;

ChannelStack load_stack(const std::filesystem::path& path, const ChannelMap& channel_map = {},
                        ChannelMode mode = ChannelMode::strict);

// OME-TIFF with one page per channel; subject, label and subtype ride in the OME-XML.
void write_stack(const std::filesystem::path& path, const ChannelStack& stack);

struct Patch {
  std::string source_subject;
  ClassLabel class_label = ClassLabel::control;
  int origin_row = 0;
  int origin_col = 0;
  Tensor data;  // (C, H, W)
  std::vector<std::string> channel_names;

  std::string id() const;
};

enum class EdgePolicy { drop, pad_zero };

std::vector<Patch> patchify(const ChannelStack& stack, std::span<const std::string> channel_selection,
                            int patch_size, int stride, EdgePolicy edge_policy = EdgePolicy::drop);

struct NormalizationPolicy {
  enum class Kind { unit_max, percentile_clip, zscore };
  Kind kind = Kind::unit_max;
  double p_lo = 1.0;
  double p_hi = 99.0;

  static NormalizationPolicy unit_max() { return {}; }
  static NormalizationPolicy percentile_clip(double lo, double hi) { return {Kind::percentile_clip, lo, hi}; }
  static NormalizationPolicy zscore() { return {Kind::zscore}; }

  std::string to_string() const;
  static NormalizationPolicy parse(const std::string& text);
};

Patch normalize_patch(Patch patch, const NormalizationPolicy& policy);

// Linear-interpolated percentile of unsorted values, p in [0, 100].
double percentile(std::vector<double> values, double p);

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

// Indices into the patch list handed to split_dataset.
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  SplitRatios ratios;
  std::uint64_t seed = 0;
  bool grouped = false;
};

// Patch-level: validation and test get floor(n * ratio), train the remainder.
// Subject-grouped: the same rule is applied to subjects within each class, with every
// partition receiving at least one subject of a class that has three or more.
DatasetSplit split_dataset(std::span<const Patch> patches, SplitRatios ratios, std::uint64_t seed,
                           bool group_by_subject);

std::string split_fingerprint(const DatasetSplit& split, std::span<const Patch> patches);

// On-disk patch set: <dir>/patches/<index>.f32 raw little-endian float32 (C, H, W)
// plus <dir>/manifest.csv.
struct PatchSetInfo {
  std::filesystem::path manifest;
  std::vector<std::string> checksums;
};

PatchSetInfo write_patch_set(const std::filesystem::path& dir, std::span<const Patch> patches,
                             const NormalizationPolicy& policy);
std::vector<Patch> read_patch_set(const std::filesystem::path& dir);

}  // namespace imcx
