#include "imcx/imc_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "imcx/checksum.hpp"
#include "imcx/errors.hpp"
#include "imcx/tiff.hpp"

namespace imcx {
namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string xml_unescape(std::string s) {
  static const std::pair<const char*, const char*> kEntities[] = {
      {"&lt;", "<"}, {"&gt;", ">"}, {"&quot;", "\""}, {"&apos;", "'"}, {"&amp;", "&"}};
  for (const auto& [from, to] : kEntities) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
      s.replace(pos, std::strlen(from), to);
      pos += std::strlen(to);
    }
  }
  return s;
}

std::string ome_xml(const ChannelStack& stack) {
  std::ostringstream x;
  x << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<OME xmlns=\"http://www.openmicroscopy.org/Schemas/OME/2016-06\">\n"
    << "  <Image ID=\"Image:0\" Name=\"" << xml_escape(stack.subject_id) << "\">\n"
    << "    <Pixels ID=\"Pixels:0\" DimensionOrder=\"XYCZT\" Type=\"uint16\" SizeX=\""
    << stack.width() << "\" SizeY=\"" << stack.height() << "\" SizeC=\"" << stack.channel_count()
    << "\" SizeZ=\"1\" SizeT=\"1\" PhysicalSizeX=\"" << stack.pixel_size_um
    << "\" PhysicalSizeY=\"" << stack.pixel_size_um << "\">\n";
  std::size_t c = 0;
  for (const auto& [name, img] : stack.channels()) {
    x << "      <Channel ID=\"Channel:0:" << c++ << "\" Name=\"" << xml_escape(name)
      << "\" SamplesPerPixel=\"1\"/>\n";
  }
  x << "      <TiffData IFD=\"0\" PlaneCount=\"" << stack.channel_count() << "\"/>\n"
    << "    </Pixels>\n"
    << "  </Image>\n"
    << "  <StructuredAnnotations>\n"
    << "    <MapAnnotation ID=\"Annotation:0\"><Value>"
    << "<M K=\"class_label\">" << to_string(stack.class_label) << "</M>";
  if (stack.subtype) x << "<M K=\"subtype\">" << xml_escape(*stack.subtype) << "</M>";
  x << "</Value></MapAnnotation>\n"
    << "  </StructuredAnnotations>\n"
    << "</OME>\n";
  return x.str();
}

struct OmeInfo {
  std::vector<std::string> channel_names;
  std::string image_name;
  std::optional<std::string> class_label;
  std::optional<std::string> subtype;
  std::optional<double> pixel_size;
};

OmeInfo parse_ome(const std::string& xml) {
  OmeInfo info;
  if (xml.find("<OME") == std::string::npos) return info;
  static const std::regex channel_re(R"re(<Channel\b[^>]*?\bName="([^"]*)")re");
  for (auto it = std::sregex_iterator(xml.begin(), xml.end(), channel_re); it != std::sregex_iterator(); ++it) {
    info.channel_names.push_back(xml_unescape((*it)[1].str()));
  }
  static const std::regex image_re(R"re(<Image\b[^>]*?\bName="([^"]*)")re");
  std::smatch m;
  if (std::regex_search(xml, m, image_re)) info.image_name = xml_unescape(m[1].str());
  static const std::regex label_re(R"(<M K="class_label">([^<]*)</M>)");
  if (std::regex_search(xml, m, label_re)) info.class_label = xml_unescape(m[1].str());
  static const std::regex subtype_re(R"(<M K="subtype">([^<]*)</M>)");
  if (std::regex_search(xml, m, subtype_re)) info.subtype = xml_unescape(m[1].str());
  static const std::regex size_re(R"re(PhysicalSizeX="([0-9.eE+-]+)")re");
  if (std::regex_search(xml, m, size_re)) info.pixel_size = std::stod(m[1].str());
  return info;
}

std::string file_stem(const std::filesystem::path& path) {
  std::string name = path.filename().string();
  for (const char* suffix : {".ome.tiff", ".ome.tif", ".tiff", ".tif"}) {
    const std::string s(suffix);
    if (name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) {
      return name.substr(0, name.size() - s.size());
    }
  }
  return path.stem().string();
}

}  // namespace

ChannelStack load_stack(const std::filesystem::path& path, const ChannelMap& channel_map, ChannelMode mode) {
  const tiff::Document doc = tiff::read(path);
  const OmeInfo ome = parse_ome(doc.image_description);

  std::vector<std::string> file_names(doc.pages.size());
  for (std::size_t i = 0; i < doc.pages.size(); ++i) {
    if (i < ome.channel_names.size() && !ome.channel_names[i].empty()) {
      file_names[i] = ome.channel_names[i];
    } else {
      file_names[i] = doc.pages[i].page_name;
    }
  }

  ChannelStack stack;
  stack.subject_id = ome.image_name.empty() ? file_stem(path) : ome.image_name;
  if (ome.class_label) stack.class_label = parse_class_label(*ome.class_label);
  stack.subtype = ome.subtype;
  if (ome.pixel_size) stack.pixel_size_um = *ome.pixel_size;

  // Page order is preserved; with a map, only mapped pages are kept.
  std::set<std::string> used_keys;
  for (std::size_t i = 0; i < doc.pages.size(); ++i) {
    std::string name;
    if (channel_map.empty()) {
      name = file_names[i];
      if (name.empty()) {
        if (mode == ChannelMode::strict) {
          throw ValidationError("page " + std::to_string(i) + " of " + path.string() +
                                " carries no channel name and no channel map was given");
        }
        name = "channel_" + std::to_string(i);
      }
    } else if (auto it = channel_map.find(std::to_string(i)); it != channel_map.end()) {
      name = it->second;
      used_keys.insert(it->first);
    } else if (auto jt = channel_map.find(file_names[i]); !file_names[i].empty() && jt != channel_map.end()) {
      name = jt->second;
      used_keys.insert(jt->first);
    } else {
      continue;
    }
    const Image16& img = doc.pages[i].image;
    if (stack.channel_count() > 0 && (img.height != stack.height() || img.width != stack.width())) {
      throw StructuralError("channel '" + name + "' (page " + std::to_string(i) + ") is " +
                            std::to_string(img.height) + "x" + std::to_string(img.width) +
                            " but preceding channels are " + std::to_string(stack.height()) + "x" +
                            std::to_string(stack.width()));
    }
    stack.add_channel(name, img);
  }
  for (const auto& [key, value] : channel_map) {
    if (!used_keys.count(key)) {
      throw StructuralError("channel map entry '" + key + "' -> '" + value + "' matches no page in " +
                            path.string());
    }
  }
  if (stack.channel_count() == 0) throw StructuralError(path.string() + ": no channels selected");

  if (mode == ChannelMode::strict) {
    for (auto canonical : kCanonicalChannels) {
      if (!stack.has_channel(canonical)) {
        throw ValidationError(path.string() + " lacks canonical channel '" + std::string(canonical) +
                              "' (use permissive mode for other marker panels)");
      }
    }
  }
  return stack;
}

void write_stack(const std::filesystem::path& path, const ChannelStack& stack) {
  tiff::Document doc;
  doc.image_description = ome_xml(stack);
  for (const auto& [name, img] : stack.channels()) doc.pages.push_back({img, name});
  tiff::write(path, doc);
}

std::string Patch::id() const {
  return source_subject + "@" + std::to_string(origin_row) + "," + std::to_string(origin_col);
}

std::vector<Patch> patchify(const ChannelStack& stack, std::span<const std::string> channel_selection,
                            int patch_size, int stride, EdgePolicy edge_policy) {
  if (channel_selection.empty()) throw ParameterError("patchify: empty channel selection");
  if (patch_size < 1 || stride < 1) throw ParameterError("patchify: patch size and stride must be >= 1");
  std::vector<const Image16*> grids;
  for (const auto& name : channel_selection) grids.push_back(&stack.channel(name));

  const int h = stack.height();
  const int w = stack.width();
  auto origins = [&](int extent) {
    std::vector<int> out;
    if (edge_policy == EdgePolicy::drop) {
      for (int o = 0; o + patch_size <= extent; o += stride) out.push_back(o);
    } else {
      for (int o = 0; o < extent; o += stride) out.push_back(o);
    }
    return out;
  };

  const auto rows = origins(h);
  const auto cols = origins(w);
  const int c = static_cast<int>(grids.size());
  std::vector<Patch> patches;
  patches.reserve(rows.size() * cols.size());
  for (int r0 : rows) {
    for (int c0 : cols) {
      Patch p;
      p.source_subject = stack.subject_id;
      p.class_label = stack.class_label;
      p.origin_row = r0;
      p.origin_col = c0;
      p.channel_names.assign(channel_selection.begin(), channel_selection.end());
      p.data = Tensor(c, patch_size, patch_size, 0.0);
      const int ylim = std::min(patch_size, h - r0);
      const int xlim = std::min(patch_size, w - c0);
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < ylim; ++y) {
          for (int x = 0; x < xlim; ++x) p.data.at(ch, y, x) = grids[ch]->at(r0 + y, c0 + x);
        }
      }
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

std::string NormalizationPolicy::to_string() const {
  switch (kind) {
    case Kind::unit_max: return "unit_max";
    case Kind::zscore: return "zscore";
    case Kind::percentile_clip: {
      std::ostringstream s;
      s << "percentile_clip(" << p_lo << "," << p_hi << ")";
      return s.str();
    }
  }
  return "unknown";
}

NormalizationPolicy NormalizationPolicy::parse(const std::string& text) {
  if (text == "unit_max") return unit_max();
  if (text == "zscore") return zscore();
  static const std::regex pc(R"(percentile_clip\(\s*([0-9.eE+-]+)\s*,\s*([0-9.eE+-]+)\s*\))");
  std::smatch m;
  if (text == "percentile_clip") return percentile_clip(1.0, 99.0);
  if (std::regex_match(text, m, pc)) {
    const double lo = std::stod(m[1].str()), hi = std::stod(m[2].str());
    if (!(lo >= 0 && lo < hi && hi <= 100)) throw ParameterError("percentile_clip bounds out of order: " + text);
    return percentile_clip(lo, hi);
  }
  throw ParameterError("unknown normalization policy '" + text + "'");
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw ParameterError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Patch normalize_patch(Patch patch, const NormalizationPolicy& policy) {
  constexpr double kEps = 1e-12;
  for (int ch = 0; ch < patch.data.channels; ++ch) {
    auto plane = patch.data.channel(ch);
    switch (policy.kind) {
      case NormalizationPolicy::Kind::unit_max:
        for (double& v : plane) v = std::clamp(v / 65535.0, 0.0, 1.0);
        break;
      case NormalizationPolicy::Kind::percentile_clip: {
        std::vector<double> values(plane.begin(), plane.end());
        const double lo = percentile(values, policy.p_lo);
        const double hi = percentile(std::move(values), policy.p_hi);
        if (hi - lo <= kEps) {
          std::fill(plane.begin(), plane.end(), 0.0);
        } else {
          for (double& v : plane) v = (std::clamp(v, lo, hi) - lo) / (hi - lo);
        }
        break;
      }
      case NormalizationPolicy::Kind::zscore: {
        const double n = static_cast<double>(plane.size());
        const double mean = std::accumulate(plane.begin(), plane.end(), 0.0) / n;
        double var = 0.0;
        for (double v : plane) var += (v - mean) * (v - mean);
        var /= n;
        const double sd = std::sqrt(var);
        if (sd <= kEps) {
          std::fill(plane.begin(), plane.end(), 0.0);
        } else {
          for (double& v : plane) v = (v - mean) / (sd + kEps);
        }
        break;
      }
    }
  }
  return patch;
}

namespace {

std::size_t floor_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9));
}

void check_ratios(const SplitRatios& r) {
  if (r.train < 0 || r.validation < 0 || r.test < 0) throw ParameterError("split ratios must be non-negative");
  if (std::abs(r.train + r.validation + r.test - 1.0) > 1e-9) throw ParameterError("split ratios must sum to 1");
}

}  // namespace

DatasetSplit split_dataset(std::span<const Patch> patches, SplitRatios ratios, std::uint64_t seed,
                           bool group_by_subject) {
  check_ratios(ratios);
  DatasetSplit split;
  split.ratios = ratios;
  split.seed = seed;
  split.grouped = group_by_subject;
  std::mt19937_64 rng(seed);

  if (!group_by_subject) {
    const std::size_t n = patches.size();
    if (n < 3) throw ParameterError("split_dataset: need at least 3 patches, got " + std::to_string(n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_val = floor_count(n, ratios.validation);
    const std::size_t n_test = floor_count(n, ratios.test);
    split.validation.assign(order.begin(), order.begin() + n_val);
    split.test.assign(order.begin() + n_val, order.begin() + n_val + n_test);
    split.train.assign(order.begin() + n_val + n_test, order.end());
  } else {
    std::map<std::string, ClassLabel> subject_label;
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const auto& p = patches[i];
      auto [it, inserted] = subject_label.emplace(p.source_subject, p.class_label);
      if (!inserted && it->second != p.class_label) {
        throw ValidationError("subject '" + p.source_subject + "' has patches with both labels");
      }
      members[p.source_subject].push_back(i);
    }
    if (subject_label.size() < 3) {
      throw ParameterError("split_dataset: need at least 3 subjects for a grouped split, got " +
                           std::to_string(subject_label.size()));
    }
    for (ClassLabel label : {ClassLabel::control, ClassLabel::patient}) {
      std::vector<std::string> subjects;
      for (const auto& [s, l] : subject_label)
        if (l == label) subjects.push_back(s);
      std::shuffle(subjects.begin(), subjects.end(), rng);
      const std::size_t n = subjects.size();
      std::size_t n_val = floor_count(n, ratios.validation);
      std::size_t n_test = floor_count(n, ratios.test);
      if (n >= 3) {
        if (ratios.validation > 0) n_val = std::max<std::size_t>(n_val, 1);
        if (ratios.test > 0) n_test = std::max<std::size_t>(n_test, 1);
        while (n_val + n_test >= n) {
          if (n_val >= n_test && n_val > 1) --n_val;
          else if (n_test > 1) --n_test;
          else break;
        }
      }
      for (std::size_t k = 0; k < n; ++k) {
        auto& target = k < n_val ? split.validation : (k < n_val + n_test ? split.test : split.train);
        const auto& idx = members[subjects[k]];
        target.insert(target.end(), idx.begin(), idx.end());
      }
    }
    if (split.train.empty() || split.validation.empty() || split.test.empty()) {
      throw ParameterError("split_dataset: grouped split left a partition empty");
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

std::string split_fingerprint(const DatasetSplit& split, std::span<const Patch> patches) {
  Sha256 h;
  auto part = [&](const char* tag, const std::vector<std::size_t>& idx) {
    h.update(tag);
    for (auto i : idx) {
      h.update(patches[i].id());
      h.update(";");
    }
  };
  part("train:", split.train);
  part("validation:", split.validation);
  part("test:", split.test);
  return h.hex_digest();
}

namespace {

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

PatchSetInfo write_patch_set(const std::filesystem::path& dir, std::span<const Patch> patches,
                             const NormalizationPolicy& policy) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "patches");
  PatchSetInfo info;
  info.manifest = dir / "manifest.csv";
  std::ofstream manifest(info.manifest);
  if (!manifest) throw IoError("cannot write " + info.manifest.string());
  manifest << "index,file,subject,label,origin_row,origin_col,channels,height,width,normalization,sha256\n";
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Patch& p = patches[i];
    std::vector<float> buf(p.data.data.begin(), p.data.data.end());
    const std::string file = "patches/" + std::to_string(i) + ".f32";
    {
      std::ofstream out(dir / file, std::ios::binary);
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!out) throw IoError("cannot write " + (dir / file).string());
    }
    const std::string digest = sha256_file(dir / file);
    info.checksums.push_back(digest);
    manifest << i << ',' << file << ',' << p.source_subject << ',' << to_string(p.class_label) << ','
             << p.origin_row << ',' << p.origin_col << ',' << join(p.channel_names, ';') << ','
             << p.data.height << ',' << p.data.width << ',' << '"' << policy.to_string() << '"' << ','
             << digest << '\n';
  }
  return info;
}

std::vector<Patch> read_patch_set(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw IoError("no patch manifest in " + dir.string());
  std::string line;
  std::getline(manifest, line);
  std::vector<Patch> patches;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    // The quoted normalization field may contain a comma; pull it out first.
    const auto q0 = line.find('"');
    const auto q1 = line.find('"', q0 + 1);
    if (q0 == std::string::npos || q1 == std::string::npos) throw IoError("malformed patch manifest line: " + line);
    auto head = split_on(line.substr(0, q0), ',');
    const std::string digest = line.substr(q1 + 2);
    if (head.size() < 9) throw IoError("malformed patch manifest line: " + line);
    Patch p;
    const std::string file = head[1];
    p.source_subject = head[2];
    p.class_label = parse_class_label(head[3]);
    p.origin_row = std::stoi(head[4]);
    p.origin_col = std::stoi(head[5]);
    p.channel_names = split_on(head[6], ';');
    const int h = std::stoi(head[7]);
    const int w = std::stoi(head[8]);
    if (sha256_file(dir / file) != digest) throw IoError("checksum mismatch for " + (dir / file).string());
    p.data = Tensor(static_cast<int>(p.channel_names.size()), h, w);
    std::vector<float> buf(p.data.size());
    std::ifstream in(dir / file, std::ios::binary);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError("short patch file " + (dir / file).string());
    std::copy(buf.begin(), buf.end(), p.data.data.begin());
    patches.push_back(std::move(p));
  }
  return patches;
}

}  // namespace imcx
