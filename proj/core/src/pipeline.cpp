#include "imcx/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "imcx/checksum.hpp"
#include "imcx/errors.hpp"
#include "imcx/metrics.hpp"
#include "imcx/png.hpp"
#include "imcx/viz.hpp"

#ifndef IMCX_VERSION
#define IMCX_VERSION "0.0.0"
#endif

namespace imcx::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::data: return "data";
    case Stage::patchify: return "patchify";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
    case Stage::explain: return "explain";
    case Stage::render: return "render";
    case Stage::report: return "report";
  }
  return "unknown";
}

namespace {

Stage parse_stage(std::string_view s) {
  for (Stage st : kStages)
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

std::string edge_to_string(EdgePolicy e) { return e == EdgePolicy::drop ? "drop" : "pad_zero"; }

EdgePolicy parse_edge(const std::string& s) {
  if (s == "drop") return EdgePolicy::drop;
  if (s == "pad_zero") return EdgePolicy::pad_zero;
  throw ConfigError("edge_policy must be drop or pad_zero, got '" + s + "'");
}

bool is_all(const std::vector<std::string>& sel) { return sel.size() == 1 && sel[0] == "ALL"; }
bool is_single(const std::vector<std::string>& sel) { return sel.size() == 1 && sel[0] != "ALL"; }

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw IoError("cannot write " + p.string());
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(csv_fields(line));
  return rows;
}

}  // namespace

std::string selection_name(const std::vector<std::string>& selection) {
  if (is_all(selection)) return "All-Channels";
  std::string s;
  for (const auto& c : selection) s += (s.empty() ? "" : "+") + c;
  return s;
}

// ---- RunConfig ----------------------------------------------------------------

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
  if (source != "synthetic" && source != "ingest") throw ConfigError("data.source must be synthetic or ingest");
  if (source == "synthetic") {
    if (n_control < 0 || n_patient < 0) throw ConfigError("subject counts must be >= 0");
    try {
      synthetic.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("synthetic params: ") + e.what());
    }
  } else if (ingest.empty()) {
    throw ConfigError("data.ingest lists no files");
  }
  if (patch_size < 1 || stride < 1) throw ConfigError("patch_size and stride must be >= 1");
  if (std::abs(split.train + split.validation + split.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
  if (seeds.empty()) throw ConfigError("training.seeds is empty");
  if (backbones.empty()) throw ConfigError("training.backbones is empty");
  if (channel_selections.empty()) throw ConfigError("training.channel_selections is empty");
  for (const auto& sel : channel_selections) {
    if (sel.empty()) throw ConfigError("empty channel selection");
    if (!is_all(sel) && std::find(sel.begin(), sel.end(), "ALL") != sel.end()) {
      throw ConfigError("ALL cannot be combined with named channels");
    }
  }
  try {
    train.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
  std::size_t single = 0;
  for (const auto& sel : channel_selections)
    if (is_single(sel)) ++single;
  single *= backbones.size();
  if (top_k < 0) throw ConfigError("explanation.top_k must be >= 0");
  if (!methods.empty() && static_cast<std::size_t>(top_k) > single) {
    throw ConfigError("explanation.top_k = " + std::to_string(top_k) + " exceeds the " + std::to_string(single) +
                      " single-channel models in the training matrix");
  }
  if (patches_per_class < 0) throw ConfigError("explanation.patches_per_class must be >= 0");
  if (!(map_percentile > 0.0 && map_percentile <= 100.0)) throw ConfigError("explanation.map_percentile out of range");
}

std::string RunConfig::to_json() const {
  json j;
  j["output_dir"] = output_dir.string();
  json d;
  d["source"] = source;
  d["synthetic"] = json::parse(synth::params_to_json(synthetic));
  d["n_control"] = n_control;
  d["n_patient"] = n_patient;
  d["seed"] = data_seed;
  json ing = json::array();
  for (const auto& e : ingest) {
    json x;
    x["path"] = e.path.string();
    if (e.subject_id) x["subject_id"] = *e.subject_id;
    if (e.class_label) x["class_label"] = std::string(imcx::to_string(*e.class_label));
    ing.push_back(x);
  }
  d["ingest"] = ing;
  d["channel_map"] = channel_map;
  d["channel_mode"] = channel_mode == ChannelMode::strict ? "strict" : "permissive";
  j["data"] = d;

  json p;
  p["patch_size"] = patch_size;
  p["stride"] = stride;
  p["edge_policy"] = edge_to_string(edge_policy);
  p["normalization"] = normalization.to_string();
  p["split"] = {{"train", split.train}, {"validation", split.validation}, {"test", split.test}};
  p["group_by_subject"] = group_by_subject;
  p["split_seed"] = split_seed;
  j["preprocess"] = p;

  json t = json::parse(train.to_json());
  t.erase("backbone");
  t.erase("seed");
  t.erase("channel_selection");
  json bb = json::array();
  for (Backbone b : backbones) bb.push_back(std::string(imcx::to_string(b)));
  t["backbones"] = bb;
  t["channel_selections"] = channel_selections;
  t["seeds"] = seeds;
  j["training"] = t;

  json x;
  json ms = json::array();
  for (xai::Method m : methods) ms.push_back(std::string(xai::to_string(m)));
  x["methods"] = ms;
  x["top_k"] = top_k;
  x["patches_per_class"] = patches_per_class;
  x["membrane_channel"] = membrane_channel;
  x["mito_mass_channel"] = mito_mass_channel;
  x["map_percentile"] = map_percentile;
  j["explanation"] = x;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    c.output_dir = j.value("output_dir", c.output_dir.string());
    if (j.contains("data")) {
      const json& d = j["data"];
      c.source = d.value("source", c.source);
      if (d.contains("synthetic")) c.synthetic = synth::params_from_json(d["synthetic"].dump());
      c.n_control = d.value("n_control", c.n_control);
      c.n_patient = d.value("n_patient", c.n_patient);
      c.data_seed = d.value("seed", c.data_seed);
      if (d.contains("ingest")) {
        for (const auto& x : d["ingest"]) {
          IngestEntry e;
          if (x.is_string()) {
            e.path = x.get<std::string>();
          } else {
            e.path = x.at("path").get<std::string>();
            if (x.contains("subject_id")) e.subject_id = x["subject_id"].get<std::string>();
            if (x.contains("class_label")) e.class_label = parse_class_label(x["class_label"].get<std::string>());
          }
          c.ingest.push_back(std::move(e));
        }
      }
      if (d.contains("channel_map")) c.channel_map = d["channel_map"].get<ChannelMap>();
      const std::string mode = d.value("channel_mode", std::string("strict"));
      if (mode != "strict" && mode != "permissive") throw ConfigError("channel_mode must be strict or permissive");
      c.channel_mode = mode == "strict" ? ChannelMode::strict : ChannelMode::permissive;
    }
    if (j.contains("preprocess")) {
      const json& p = j["preprocess"];
      c.patch_size = p.value("patch_size", c.patch_size);
      c.stride = p.value("stride", c.patch_size);
      c.edge_policy = parse_edge(p.value("edge_policy", std::string("drop")));
      if (p.contains("normalization")) c.normalization = NormalizationPolicy::parse(p["normalization"].get<std::string>());
      if (p.contains("split")) {
        c.split.train = p["split"].value("train", c.split.train);
        c.split.validation = p["split"].value("validation", c.split.validation);
        c.split.test = p["split"].value("test", c.split.test);
      }
      c.group_by_subject = p.value("group_by_subject", c.group_by_subject);
      c.split_seed = p.value("split_seed", c.split_seed);
    }
    if (j.contains("training")) {
      json t = j["training"];
      if (t.contains("backbones")) {
        c.backbones.clear();
        for (const auto& b : t["backbones"]) c.backbones.push_back(parse_backbone(b.get<std::string>()));
      }
      if (t.contains("channel_selections")) {
        c.channel_selections.clear();
        for (const auto& s : t["channel_selections"]) {
          if (s.is_string()) {
            c.channel_selections.push_back({s.get<std::string>()});
          } else {
            c.channel_selections.push_back(s.get<std::vector<std::string>>());
          }
        }
      }
      if (t.contains("seeds")) c.seeds = t["seeds"].get<std::vector<std::uint64_t>>();
      t.erase("backbones");
      t.erase("channel_selections");
      t.erase("seeds");
      c.train = TrainConfig::from_json(t.dump());
    }
    if (j.contains("explanation")) {
      const json& x = j["explanation"];
      if (x.contains("methods")) {
        c.methods.clear();
        for (const auto& m : x["methods"]) c.methods.push_back(xai::parse_method(m.get<std::string>()));
      }
      c.top_k = x.value("top_k", c.top_k);
      c.patches_per_class = x.value("patches_per_class", c.patches_per_class);
      c.membrane_channel = x.value("membrane_channel", c.membrane_channel);
      c.mito_mass_channel = x.value("mito_mass_channel", c.mito_mass_channel);
      c.map_percentile = x.value("map_percentile", c.map_percentile);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return from_json(s.str());
}

// ---- RunManifest ----------------------------------------------------------------

const StageRecord* RunManifest::find(Stage s) const {
  for (const auto& r : stages)
    if (r.stage == s) return &r;
  return nullptr;
}

std::string RunManifest::to_json() const {
  json j;
  j["config_sha256"] = config_sha256;
  j["software_version"] = software_version;
  json st = json::array();
  for (const auto& r : stages) {
    json x;
    x["stage"] = std::string(to_string(r.stage));
    x["status"] = r.status;
    x["input_key"] = r.input_key;
    x["started"] = r.started;
    x["finished"] = r.finished;
    if (!r.message.empty()) x["message"] = r.message;
    json arts = json::array();
    for (const auto& a : r.artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}});
    x["artifacts"] = arts;
    st.push_back(x);
  }
  j["stages"] = st;
  return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  const json j = json::parse(text);
  m.config_sha256 = j.value("config_sha256", "");
  m.software_version = j.value("software_version", "");
  for (const auto& x : j.at("stages")) {
    StageRecord r;
    r.stage = parse_stage(x.at("stage").get<std::string>());
    r.status = x.value("status", "");
    r.input_key = x.value("input_key", "");
    r.started = x.value("started", "");
    r.finished = x.value("finished", "");
    r.message = x.value("message", "");
    for (const auto& a : x.at("artifacts")) r.artifacts.push_back({a.at("path"), a.at("sha256")});
    m.stages.push_back(std::move(r));
  }
  return m;
}

std::optional<RunManifest> RunManifest::load(const fs::path& run_dir) {
  const fs::path p = run_dir / "manifest.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    return from_json(read_text(p));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void RunManifest::save(const fs::path& run_dir) const { write_text(run_dir / "manifest.json", to_json() + "\n"); }

namespace {

bool artifacts_valid(const StageRecord& r, const fs::path& run_dir) {
  for (const auto& a : r.artifacts) {
    const fs::path p = run_dir / a.path;
    if (!fs::exists(p) || sha256_file(p) != a.sha256) return false;
  }
  return true;
}

}  // namespace

bool RunManifest::verify(const fs::path& run_dir) const {
  for (const auto& r : stages)
    if (r.status == "complete" && !artifacts_valid(r, run_dir)) return false;
  return true;
}

// ---- stages -------------------------------------------------------------------------

namespace {

struct Context {
  const RunConfig& cfg;
  fs::path dir;
  const Logger& log;
  std::vector<Artifact> artifacts;

  void info(const std::string& msg) const {
    if (log) log(msg);
  }

  void add(const fs::path& p) {
    artifacts.push_back({fs::relative(p, dir).generic_string(), sha256_file(p)});
  }
};

std::string section_json(const RunConfig& cfg, const char* key) {
  return json::parse(cfg.to_json())[key].dump();
}

std::string artifacts_key(const RunManifest& m, std::initializer_list<Stage> stages) {
  Sha256 h;
  for (Stage s : stages) {
    const StageRecord* r = m.find(s);
    if (!r) continue;
    for (const auto& a : r->artifacts) {
      h.update(a.path);
      h.update(a.sha256);
    }
  }
  return h.hex_digest();
}

struct SubjectRow {
  std::string subject;
  ClassLabel label = ClassLabel::control;
  std::string file;
};

std::vector<SubjectRow> read_subjects(const fs::path& dir) {
  std::vector<SubjectRow> out;
  const auto rows = read_csv(dir / "data" / "subjects.csv");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    out.push_back({rows[i].at(0), parse_class_label(rows[i].at(1)), rows[i].at(2)});
  }
  return out;
}

void stage_data(Context& ctx) {
  const fs::path data = ctx.dir / "data";
  fs::remove_all(data);
  fs::create_directories(data);
  std::ostringstream subjects;
  subjects << "subject,class_label,file\n";
  if (ctx.cfg.source == "synthetic") {
    ctx.info("generating " + std::to_string(ctx.cfg.n_control) + " control and " + std::to_string(ctx.cfg.n_patient) +
             " patient sections");
    const auto cohort = synth::generate_cohort(ctx.cfg.synthetic, ctx.cfg.n_control, ctx.cfg.n_patient,
                                               ctx.cfg.data_seed);
    for (const auto& s : cohort) {
      synth::write_subject(data, s, ctx.cfg.synthetic);
      const std::string id = s.stack.subject_id;
      subjects << id << ',' << imcx::to_string(s.stack.class_label) << ',' << id << ".ome.tiff\n";
      for (const char* ext : {".ome.tiff", ".labels.tiff", ".truth.json"}) ctx.add(data / (id + ext));
    }
  } else {
    std::set<std::string> seen;
    for (const auto& e : ctx.cfg.ingest) {
      ChannelStack stack = load_stack(e.path, ctx.cfg.channel_map, ctx.cfg.channel_mode);
      if (e.subject_id) stack.subject_id = *e.subject_id;
      if (e.class_label) stack.class_label = *e.class_label;
      if (!seen.insert(stack.subject_id).second) {
        throw ConfigError("duplicate subject id '" + stack.subject_id + "' in data.ingest");
      }
      const std::string file = stack.subject_id + ".ome.tiff";
      write_stack(data / file, stack);
      subjects << stack.subject_id << ',' << imcx::to_string(stack.class_label) << ',' << file << '\n';
      ctx.add(data / file);
      ctx.info("ingested " + e.path.string() + " as " + stack.subject_id);
    }
  }
  write_text(data / "subjects.csv", subjects.str());
  ctx.add(data / "subjects.csv");
}

std::vector<std::string> needed_channels(const RunConfig& cfg, const ChannelStack& stack) {
  const auto names = stack.channel_names();
  std::set<std::string> want;
  for (const auto& sel : cfg.channel_selections) {
    if (is_all(sel)) return names;
    for (const auto& c : sel) {
      if (!stack.has_channel(c)) {
        throw ConfigError("channel '" + c + "' is not present in subject " + stack.subject_id);
      }
      want.insert(c);
    }
  }
  std::vector<std::string> out;
  for (const auto& n : names)
    if (want.count(n)) out.push_back(n);
  return out;
}

json split_to_json(const DatasetSplit& s, const std::string& fingerprint) {
  json j;
  j["train"] = s.train;
  j["validation"] = s.validation;
  j["test"] = s.test;
  j["seed"] = s.seed;
  j["grouped"] = s.grouped;
  j["ratios"] = {s.ratios.train, s.ratios.validation, s.ratios.test};
  j["fingerprint"] = fingerprint;
  return j;
}

DatasetSplit split_from_json(const json& j) {
  DatasetSplit s;
  s.train = j.at("train").get<std::vector<std::size_t>>();
  s.validation = j.at("validation").get<std::vector<std::size_t>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.grouped = j.at("grouped").get<bool>();
  const auto r = j.at("ratios").get<std::vector<double>>();
  s.ratios = {r.at(0), r.at(1), r.at(2)};
  return s;
}

void stage_patchify(Context& ctx) {
  std::vector<Patch> patches;
  for (const auto& s : read_subjects(ctx.dir)) {
    const ChannelStack stack = load_stack(ctx.dir / "data" / s.file, {}, ChannelMode::permissive);
    const auto channels = needed_channels(ctx.cfg, stack);
    auto ps = patchify(stack, channels, ctx.cfg.patch_size, ctx.cfg.stride, ctx.cfg.edge_policy);
    for (auto& p : ps) patches.push_back(normalize_patch(std::move(p), ctx.cfg.normalization));
  }
  ctx.info("extracted " + std::to_string(patches.size()) + " patches");
  const fs::path out = ctx.dir / "patches";
  fs::remove_all(out);
  const PatchSetInfo info = write_patch_set(out, patches, ctx.cfg.normalization);
  const DatasetSplit split = split_dataset(patches, ctx.cfg.split, ctx.cfg.split_seed, ctx.cfg.group_by_subject);
  ctx.info("split " + std::to_string(split.train.size()) + " / " + std::to_string(split.validation.size()) + " / " +
           std::to_string(split.test.size()) + " (train / validation / test)");
  write_text(out / "split.json", split_to_json(split, split_fingerprint(split, patches)).dump(2) + "\n");
  ctx.add(info.manifest);
  ctx.add(out / "split.json");
}

std::vector<Patch> select_channels(const std::vector<Patch>& patches, const std::vector<std::string>& selection) {
  if (is_all(selection)) return patches;
  std::vector<Patch> out;
  out.reserve(patches.size());
  for (const auto& p : patches) {
    Patch q;
    q.source_subject = p.source_subject;
    q.class_label = p.class_label;
    q.origin_row = p.origin_row;
    q.origin_col = p.origin_col;
    q.channel_names = selection;
    q.data = Tensor(static_cast<int>(selection.size()), p.data.height, p.data.width);
    for (std::size_t c = 0; c < selection.size(); ++c) {
      const auto it = std::find(p.channel_names.begin(), p.channel_names.end(), selection[c]);
      if (it == p.channel_names.end()) throw ConfigError("channel '" + selection[c] + "' missing from patch set");
      const auto src = p.data.channel(static_cast<int>(it - p.channel_names.begin()));
      std::copy(src.begin(), src.end(), q.data.channel(static_cast<int>(c)).begin());
    }
    out.push_back(std::move(q));
  }
  return out;
}

struct ModelUnit {
  Backbone backbone;
  std::vector<std::string> selection;
  std::uint64_t seed;

  std::string name() const {
    return std::string(imcx::to_string(backbone)) + "__" + selection_name(selection) + "__seed" + std::to_string(seed);
  }
  TrainConfig config(const TrainConfig& base) const {
    TrainConfig c = base;
    c.backbone = backbone;
    c.seed = seed;
    c.channel_selection = is_all(selection) ? std::vector<std::string>{} : selection;
    return c;
  }
};

std::vector<ModelUnit> model_units(const RunConfig& cfg) {
  std::vector<ModelUnit> out;
  for (Backbone b : cfg.backbones)
    for (const auto& sel : cfg.channel_selections)
      for (std::uint64_t s : cfg.seeds) out.push_back({b, sel, s});
  return out;
}

struct PatchData {
  std::vector<Patch> patches;
  DatasetSplit split;
  std::string fingerprint;
};

PatchData load_patches(const fs::path& dir) {
  PatchData d;
  d.patches = read_patch_set(dir / "patches");
  const json j = json::parse(read_text(dir / "patches" / "split.json"));
  d.split = split_from_json(j);
  d.fingerprint = j.at("fingerprint").get<std::string>();
  return d;
}

void stage_train(Context& ctx, const std::string& upstream_key) {
  const PatchData data = load_patches(ctx.dir);
  const auto units = model_units(ctx.cfg);
  for (std::size_t u = 0; u < units.size(); ++u) {
    const ModelUnit& unit = units[u];
    const TrainConfig cfg = unit.config(ctx.cfg.train);
    const fs::path mdir = ctx.dir / "models" / unit.name();
    Sha256 h;
    h.update(upstream_key);
    h.update(cfg.to_json());
    const std::string key = h.hex_digest();
    const bool cached = fs::exists(mdir / "input.key") && read_text(mdir / "input.key") == key &&
                        fs::exists(mdir / "weights.imcxw") && fs::exists(mdir / "config.json");
    const std::string tag = "[" + std::to_string(u + 1) + "/" + std::to_string(units.size()) + "] " + unit.name();
    if (cached) {
      ctx.info(tag + ": unchanged, reusing");
    } else {
      const auto patches = select_channels(data.patches, unit.selection);
      const int channels = patches.empty() ? 0 : patches.front().data.channels;
      nn::Network net = build_model(cfg, channels);
      const auto t0 = std::chrono::steady_clock::now();
      TrainedModel m = train(std::move(net), patches, data.split, cfg, [&](const EpochRecord& r) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s epoch %d: loss %.4f acc %.3f | val loss %.4f acc %.3f", tag.c_str(),
                      r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy);
        ctx.info(buf);
      });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      fs::remove_all(mdir);
      m.save(mdir);
      write_text(mdir / "input.key", key);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s: stopped at epoch %d, best epoch %d (%.1f s)", tag.c_str(), m.stopped_epoch,
                    m.best_epoch, secs);
      ctx.info(buf);
    }
    for (const char* f : {"weights.imcxw", "config.json", "history.csv", "split.sha256"}) ctx.add(mdir / f);
  }
}

void stage_evaluate(Context& ctx) {
  const PatchData data = load_patches(ctx.dir);
  const fs::path out = ctx.dir / "metrics";
  fs::create_directories(out);
  const std::string dataset = ctx.cfg.source == "synthetic" ? "synthetic" : "ingested";
  std::ostringstream metrics, macro, patient, preds;
  metrics << "model,dataset,channel,seed,test_accuracy,macro_precision,macro_recall,macro_f1,patient_precision,"
             "patient_recall,patient_f1,stopped_epoch,best_epoch\n";
  macro << "model,channel,seed,accuracy,precision,recall,f1\n";
  patient << "model,channel,seed,precision,recall,f1\n";
  preds << "model,channel,seed,patch_index,subject,origin_row,origin_col,label,predicted\n";

  std::map<std::pair<Backbone, std::vector<std::string>>, std::vector<double>> accs;
  std::vector<std::pair<Backbone, std::vector<std::string>>> order;
  for (const ModelUnit& unit : model_units(ctx.cfg)) {
    const TrainedModel m = TrainedModel::load(ctx.dir / "models" / unit.name());
    const auto patches = select_channels(data.patches, unit.selection);
    const Evaluation ev = evaluate(m.network, patches, data.split.test);
    if (ev.labels.empty()) throw Error("test partition is empty");
    const MetricsReport r = classification_report(confusion(ev.predictions, ev.labels), unit.seed);
    const std::string model(imcx::to_string(unit.backbone));
    const std::string channel = selection_name(unit.selection);
    metrics << model << ',' << dataset << ',' << channel << ',' << unit.seed << ',' << fmt(r.test_accuracy) << ','
            << fmt(r.macro_precision) << ',' << fmt(r.macro_recall) << ',' << fmt(r.macro_f1) << ','
            << fmt(r.patient_precision) << ',' << fmt(r.patient_recall) << ',' << fmt(r.patient_f1) << ','
            << m.stopped_epoch << ',' << m.best_epoch << '\n';
    macro << model << ',' << channel << ',' << unit.seed << ',' << fmt(r.test_accuracy) << ','
          << fmt(r.macro_precision) << ',' << fmt(r.macro_recall) << ',' << fmt(r.macro_f1) << '\n';
    patient << model << ',' << channel << ',' << unit.seed << ',' << fmt(r.patient_precision) << ','
            << fmt(r.patient_recall) << ',' << fmt(r.patient_f1) << '\n';
    for (std::size_t i = 0; i < data.split.test.size(); ++i) {
      const Patch& p = data.patches[data.split.test[i]];
      preds << model << ',' << channel << ',' << unit.seed << ',' << data.split.test[i] << ',' << p.source_subject
            << ',' << p.origin_row << ',' << p.origin_col << ',' << ev.labels[i] << ',' << ev.predictions[i] << '\n';
    }
    const auto key = std::make_pair(unit.backbone, unit.selection);
    if (!accs.count(key)) order.push_back(key);
    accs[key].push_back(100.0 * r.test_accuracy);
    ctx.info(unit.name() + ": test accuracy " + fmt(r.test_accuracy));
  }
  std::vector<RankingRow> rows;
  for (const auto& key : order) {
    rows.push_back({std::string(imcx::to_string(key.first)), dataset, selection_name(key.second), accs[key], {}});
  }
  const RankingTable table = rank_models(std::move(rows));
  write_text(out / "metrics.csv", metrics.str());
  write_text(out / "macro_metrics.csv", macro.str());
  write_text(out / "patient_metrics.csv", patient.str());
  write_text(out / "predictions.csv", preds.str());
  write_text(out / "ranking.csv", ranking_csv(table));
  for (const char* f : {"metrics.csv", "macro_metrics.csv", "patient_metrics.csv", "predictions.csv",
                        "ranking.csv"}) {
    ctx.add(out / f);
  }
}

struct ExplainItem {
  std::string stem;
  ModelUnit unit;
  std::size_t patch_index;
  xai::Method method;
};

void stage_explain(Context& ctx) {
  const fs::path out = ctx.dir / "explanations";
  fs::remove_all(out);
  fs::create_directories(out);
  std::ostringstream sel;
  sel << "stem,model,channel,seed,method,patch_index,subject,origin_row,origin_col,class_label,target_class,"
         "target_score\n";
  if (ctx.cfg.methods.empty() || ctx.cfg.top_k == 0 || ctx.cfg.patches_per_class == 0) {
    write_text(out / "selection.csv", sel.str());
    ctx.add(out / "selection.csv");
    return;
  }
  // Rank single-channel models, best seed per model.
  const auto ranking = read_csv(ctx.dir / "metrics" / "ranking.csv");
  const auto metrics = read_csv(ctx.dir / "metrics" / "metrics.csv");
  const PatchData data = load_patches(ctx.dir);
  int chosen = 0;
  for (std::size_t r = 1; r < ranking.size() && chosen < ctx.cfg.top_k; ++r) {
    const std::string& model = ranking[r].at(0);
    const std::string& channel = ranking[r].at(2);
    if (channel == "All-Channels" || channel.find('+') != std::string::npos) continue;
    ++chosen;
    std::uint64_t best_seed = 0;
    double best_acc = -1.0;
    for (std::size_t i = 1; i < metrics.size(); ++i) {
      if (metrics[i].at(0) != model || metrics[i].at(2) != channel) continue;
      const double acc = std::stod(metrics[i].at(4));
      const std::uint64_t seed = std::stoull(metrics[i].at(3));
      if (acc > best_acc || (acc == best_acc && seed < best_seed)) {
        best_acc = acc;
        best_seed = seed;
      }
    }
    const ModelUnit unit{parse_backbone(model), {channel}, best_seed};
    const TrainedModel m = TrainedModel::load(ctx.dir / "models" / unit.name());
    const std::string checksum = m.weights_checksum();
    const nn::Network net = xai::prepare_for_explanation(m.network);
    const auto patches = select_channels(data.patches, unit.selection);

    std::vector<std::size_t> picks;
    for (ClassLabel label : {ClassLabel::control, ClassLabel::patient}) {
      int taken = 0;
      for (std::size_t i : data.split.test) {
        if (taken == ctx.cfg.patches_per_class) break;
        if (patches[i].class_label == label) {
          picks.push_back(i);
          ++taken;
        }
      }
    }
    ctx.info("explaining " + unit.name() + " on " + std::to_string(picks.size()) + " test patches");
    for (std::size_t i : picks) {
      const Patch& p = patches[i];
      const int target = predict(net, p.data).predicted();
      for (xai::Method method : ctx.cfg.methods) {
        xai::RelevanceMap map = xai::explain(net, p.data, method, target);
        map.patch_ref = p.id();
        const std::string stem = p.source_subject + "_r" + std::to_string(p.origin_row) + "_c" +
                                 std::to_string(p.origin_col) + "__" + channel + "__" + model + "__" +
                                 std::string(xai::to_string(method)) + "__seed" + std::to_string(best_seed);
        xai::save_map(out / stem, map, checksum);
        ctx.add(out / (stem + ".f32"));
        ctx.add(out / (stem + ".json"));
        sel << stem << ',' << model << ',' << channel << ',' << best_seed << ',' << xai::to_string(method) << ','
            << i << ',' << p.source_subject << ',' << p.origin_row << ',' << p.origin_col << ','
            << imcx::to_string(p.class_label) << ',' << target << ',' << fmt(map.target_score) << '\n';
      }
    }
  }
  write_text(out / "selection.csv", sel.str());
  ctx.add(out / "selection.csv");
}

viz::Grid crop(const ChannelStack& stack, const std::string& channel, int row, int col, int size) {
  if (!stack.has_channel(channel)) {
    throw ConfigError("overlay channel '" + channel + "' is not present in subject " + stack.subject_id);
  }
  const Image16& img = stack.channel(channel);
  viz::Grid g{size, size, std::vector<double>(static_cast<std::size_t>(size) * size, 0.0)};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (row + y < img.height && col + x < img.width) {
        g.values[static_cast<std::size_t>(y) * size + x] = img.at(row + y, col + x);
      }
  return g;
}

void stage_render(Context& ctx) {
  const fs::path out = ctx.dir / "figures";
  fs::remove_all(out);
  fs::create_directories(out);
  std::ostringstream index;
  index << "file,subject,origin_row,origin_col,channel,model,method,seed,mode,target_class,target_score\n";
  const auto rows = read_csv(ctx.dir / "explanations" / "selection.csv");
  std::map<std::string, std::string> files;
  for (const auto& s : read_subjects(ctx.dir)) files[s.subject] = s.file;
  std::map<std::string, ChannelStack> stacks;
  std::optional<PatchData> data;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::string& stem = row.at(0);
    const std::string& subject = row.at(6);
    const int orow = std::stoi(row.at(7));
    const int ocol = std::stoi(row.at(8));
    if (!stacks.count(subject)) {
      stacks.emplace(subject, load_stack(ctx.dir / "data" / files.at(subject), {}, ChannelMode::permissive));
    }
    if (!data) data = load_patches(ctx.dir);
    const ChannelStack& stack = stacks.at(subject);
    const xai::RelevanceMap map = xai::load_map(ctx.dir / "explanations" / stem);
    const std::size_t patch_index = std::stoull(row.at(5));
    const Patch input = select_channels({data->patches[patch_index]}, {row.at(2)}).front();
    const int size = map.values.height;
    const viz::Grid membrane = crop(stack, ctx.cfg.membrane_channel, orow, ocol, size);
    const viz::Grid mito = crop(stack, ctx.cfg.mito_mass_channel, orow, ocol, size);
    const bool signal = xai::is_signal_method(map.method);
    const viz::OverlayImage overlay =
        signal ? viz::render_overlay(membrane, mito, std::nullopt, viz::OverlayMode::signal)
               : viz::render_overlay(membrane, mito, map, viz::OverlayMode::attribution);
    const viz::OverlayImage map_image = viz::render_map(map, viz::MapNorm::symmetric_percentile(ctx.cfg.map_percentile));
    const png::Image tri = viz::render_triptych(input.data, overlay.image, map_image.image);
    png::write(out / (stem + ".png"), tri);
    ctx.add(out / (stem + ".png"));
    index << stem << ".png," << subject << ',' << orow << ',' << ocol << ',' << row.at(2) << ',' << row.at(1) << ','
          << row.at(4) << ',' << row.at(3) << ',' << (signal ? "signal" : "attribution") << ',' << row.at(10) << ','
          << row.at(11) << '\n';
  }
  ctx.info("rendered " + std::to_string(rows.empty() ? 0 : rows.size() - 1) + " figures");
  write_text(out / "index.csv", index.str());
  ctx.add(out / "index.csv");
}

}  // namespace

// ---- report ---------------------------------------------------------------------------

std::string report(const RunManifest& manifest, const fs::path& run_dir) {
  std::ostringstream md;
  md << "# Experiment report\n\n";
  md << "- configuration sha256: `" << manifest.config_sha256 << "`\n";
  md << "- software version: " << manifest.software_version << "\n\n";
  md << "## Stages\n\n| Stage | Status | Artifacts |\n|---|---|---:|\n";
  for (Stage s : kStages) {
    const StageRecord* r = manifest.find(s);
    md << "| " << to_string(s) << " | " << (r ? r->status : std::string("missing")) << " | "
       << (r ? r->artifacts.size() : 0) << " |\n";
  }
  md << '\n';

  auto complete = [&](Stage s) {
    const StageRecord* r = manifest.find(s);
    return r && r->status == "complete";
  };

  md << "## Model ranking\n\n";
  const fs::path ranking = run_dir / "metrics" / "ranking.csv";
  if (complete(Stage::evaluate) && fs::exists(ranking)) {
    const auto rows = read_csv(ranking);
    const std::size_t seeds = rows.empty() ? 0 : rows[0].size() - 6;
    md << "Ordered by mean test accuracy (TA) over " << seeds << " training run" << (seeds == 1 ? "" : "s")
       << ".\n\n| Model | Dataset | Channel |";
    for (std::size_t s = 0; s < seeds; ++s) md << " TA seed " << static_cast<char>('A' + s) << " (%) |";
    md << " Mean TA (%) | SD TA | Var TA |\n|---|---|---|";
    for (std::size_t s = 0; s < seeds + 3; ++s) md << "---:|";
    md << '\n';
    for (std::size_t r = 1; r < rows.size(); ++r) {
      md << '|';
      for (const auto& f : rows[r]) md << ' ' << f << " |";
      md << '\n';
    }
    md << '\n';
  } else {
    md << "_Gap: the evaluate stage has not completed, so no ranking is available._\n\n";
  }

  md << "## Per-run metrics\n\n";
  const fs::path metrics = run_dir / "metrics" / "metrics.csv";
  if (complete(Stage::evaluate) && fs::exists(metrics)) {
    const auto rows = read_csv(metrics);
    md << "| Model | Channel | Seed | TA | Macro P | Macro R | Macro F1 | Patient P | Patient R | Patient F1 |\n"
          "|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n";
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& f = rows[r];
      md << "| " << f.at(0) << " | " << f.at(2) << " | " << f.at(3);
      for (std::size_t k = 4; k <= 10; ++k) md << " | " << f.at(k);
      md << " |\n";
    }
    md << '\n';
  } else {
    md << "_Gap: the evaluate stage has not completed._\n\n";
  }

  md << "## Explanation figures\n\n";
  const fs::path index = run_dir / "figures" / "index.csv";
  if (!complete(Stage::render) || !fs::exists(index)) {
    md << "_No figures: the render stage has not completed._\n";
  } else {
    const auto rows = read_csv(index);
    if (rows.size() <= 1) {
      md << "_No figures: the explanation matrix is empty (no methods, top_k = 0 or no sampled patches)._\n";
    } else {
      md << "Left: overlay (R membrane, G mitochondrial mass, B |map| or black for signal methods). "
            "Middle: input patch. Right: signed map.\n\n";
      md << "| Figure | Subject | Origin | Channel | Model | Method | Seed |\n|---|---|---|---|---|---|---:|\n";
      for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& f = rows[r];
        md << "| [" << f.at(0) << "](figures/" << f.at(0) << ") | " << f.at(1) << " | (" << f.at(2) << ", " << f.at(3)
           << ") | " << f.at(4) << " | " << f.at(5) << " | " << f.at(6) << " | " << f.at(7) << " |\n";
      }
    }
  }
  return md.str();
}

// ---- driver ---------------------------------------------------------------------------

RunManifest run_experiment(const RunConfig& config, Stage last, const Logger& log) {
  config.validate();
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);
  const std::string cfg_json = config.to_json();
  write_text(dir / "config.json", cfg_json + "\n");

  const std::optional<RunManifest> previous = RunManifest::load(dir);
  RunManifest manifest;
  // The output location is not part of the experiment's identity.
  json identity = json::parse(cfg_json);
  identity.erase("output_dir");
  manifest.config_sha256 = sha256_hex(identity.dump());
  manifest.software_version = IMCX_VERSION;

  auto input_key = [&](Stage s) {
    Sha256 h;
    h.update(std::string(to_string(s)));
    switch (s) {
      case Stage::data: h.update(section_json(config, "data")); break;
      case Stage::patchify:
        h.update(section_json(config, "preprocess"));
        h.update(json::parse(cfg_json)["training"]["channel_selections"].dump());
        h.update(artifacts_key(manifest, {Stage::data}));
        break;
      case Stage::train:
        h.update(section_json(config, "training"));
        h.update(artifacts_key(manifest, {Stage::patchify}));
        break;
      case Stage::evaluate: h.update(artifacts_key(manifest, {Stage::patchify, Stage::train})); break;
      case Stage::explain:
        h.update(section_json(config, "explanation"));
        h.update(artifacts_key(manifest, {Stage::patchify, Stage::evaluate}));
        break;
      case Stage::render:
        h.update(section_json(config, "explanation"));
        h.update(artifacts_key(manifest, {Stage::data, Stage::explain}));
        break;
      case Stage::report: h.update(artifacts_key(manifest, {Stage::evaluate, Stage::render})); break;
    }
    return h.hex_digest();
  };

  for (Stage s : kStages) {
    const std::string key = input_key(s);
    if (previous) {
      const StageRecord* old = previous->find(s);
      if (old && old->status == "complete" && old->input_key == key && artifacts_valid(*old, dir)) {
        if (log) log(std::string(to_string(s)) + ": unchanged, skipped");
        manifest.stages.push_back(*old);
        if (s == last) break;
        continue;
      }
    }
    StageRecord rec;
    rec.stage = s;
    rec.input_key = key;
    rec.started = now_utc();
    Context ctx{config, dir, log, {}};
    if (log) log(std::string(to_string(s)) + ": running");
    try {
      switch (s) {
        case Stage::data: stage_data(ctx); break;
        case Stage::patchify: stage_patchify(ctx); break;
        case Stage::train: stage_train(ctx, key); break;
        case Stage::evaluate: stage_evaluate(ctx); break;
        case Stage::explain: stage_explain(ctx); break;
        case Stage::render: stage_render(ctx); break;
        case Stage::report: {
          // The report lists itself as the completed final stage.
          RunManifest partial = manifest;
          StageRecord self = rec;
          self.status = "complete";
          self.artifacts = {{"report.md", ""}};
          partial.stages.push_back(std::move(self));
          write_text(dir / "report.md", report(partial, dir));
          ctx.add(dir / "report.md");
          break;
        }
      }
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.message = e.what();
      rec.finished = now_utc();
      rec.artifacts = std::move(ctx.artifacts);
      manifest.stages.push_back(std::move(rec));
      manifest.save(dir);
      throw;
    }
    rec.status = "complete";
    rec.finished = now_utc();
    rec.artifacts = std::move(ctx.artifacts);
    manifest.stages.push_back(std::move(rec));
    manifest.save(dir);
    if (s == last) break;
  }
  manifest.save(dir);
  return manifest;
}

}  // namespace imcx::pipeline
