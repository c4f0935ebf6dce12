#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "imcx/errors.hpp"
#include "imcx/pipeline.hpp"

namespace {

using json = nlohmann::ordered_json;
using imcx::pipeline::RunConfig;
using imcx::pipeline::Stage;

constexpr int kExitStageFailure = 1;
constexpr int kExitInvalidConfig = 2;

// Every leaf of the default configuration becomes a --dotted.path flag.
void collect_leaves(const json& node, const std::string& prefix, std::vector<std::string>& out) {
  if (node.is_object() && !node.empty()) {
    for (const auto& [k, v] : node.items()) collect_leaves(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out.push_back(prefix);
  }
}

json parse_value(const std::string& text, const json* current) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
  }
  if (current && current->is_array()) {
    json arr = json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        arr.push_back(json::parse(item));
      } catch (const json::parse_error&) {
        arr.push_back(item);
      }
    }
    return arr;
  }
  return text;
}

void set_path(json& root, const std::string& path, const std::string& text) {
  json* node = &root;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  if (keys.empty()) throw imcx::ConfigError("empty override path");
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    json& next = (*node)[keys[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw imcx::ConfigError("override path " + path + " crosses a non-object value");
    node = &next;
  }
  const json* current = node->contains(keys.back()) ? &(*node)[keys.back()] : nullptr;
  (*node)[keys.back()] = parse_value(text, current);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw imcx::ConfigError("cannot open config " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  // Activations are large, short-lived buffers; keep them on the heap instead of
  // re-mapping pages for every layer call.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"imcx: classify multichannel tissue images and explain the classifier"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  bool quiet = false;
  app.add_option("-c,--config", config_path, "JSON run configuration");
  app.add_option("--set", sets, "Override any configuration value: key.path=value")->take_all();
  app.add_flag("-q,--quiet", quiet, "Only report errors");

  const json defaults = json::parse(RunConfig{}.to_json());
  std::vector<std::string> leaves;
  collect_leaves(defaults, "", leaves);
  std::map<std::string, std::string> flag_values;
  auto* group = app.add_option_group("Configuration fields", "Each flag overrides the matching config value");
  for (const auto& leaf : leaves) {
    std::string pointer = "/" + leaf;
    for (auto& ch : pointer)
      if (ch == '.') ch = '/';
    group->add_option("--" + leaf, flag_values[leaf], "default: " + defaults.at(json::json_pointer(pointer)).dump());
  }

  struct Command {
    const char* name;
    const char* help;
    Stage last;
  };
  const Command commands[] = {
      {"synth", "Generate a synthetic cohort", Stage::data},
      {"ingest", "Import OME-TIFF stacks listed in data.ingest", Stage::data},
      {"patchify", "Extract, normalise and split patches", Stage::patchify},
      {"train", "Train every backbone x channel selection x seed", Stage::train},
      {"evaluate", "Compute test metrics and the model ranking", Stage::evaluate},
      {"explain", "Compute explanation maps for the top single-channel models", Stage::explain},
      {"render", "Render overlay triptychs", Stage::render},
      {"report", "Write the markdown report", Stage::report},
      {"run", "Run the full pipeline", Stage::report},
  };
  std::map<const CLI::App*, Command> subs;
  for (const auto& c : commands) subs.emplace(app.add_subcommand(c.name, c.help), c);
  auto* print = app.add_subcommand("config", "Print the resolved configuration and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalidConfig;
  }

  try {
    json cfg = config_path.empty() ? defaults : json::parse(read_file(config_path));
    for (const auto& [leaf, value] : flag_values)
      if (app.count("--" + leaf)) set_path(cfg, leaf, value);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw imcx::ConfigError("--set expects key.path=value, got '" + s + "'");
      set_path(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    const CLI::App* chosen = app.get_subcommands().front();
    if (chosen->get_name() == "synth") cfg["data"]["source"] = "synthetic";
    if (chosen->get_name() == "ingest") cfg["data"]["source"] = "ingest";
    const RunConfig config = RunConfig::from_json(cfg.dump());
    if (chosen == print) {
      std::cout << config.to_json() << '\n';
      return 0;
    }
    const Command& cmd = subs.at(chosen);
    const auto t0 = std::chrono::steady_clock::now();
    auto log = [&](const std::string& msg) {
      if (quiet) return;
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "[%7.1fs] %s\n", s, msg.c_str());
    };
    imcx::pipeline::run_experiment(config, cmd.last, log);
    if (!quiet) std::fprintf(stderr, "done: %s\n", config.output_dir.string().c_str());
    return 0;
  } catch (const imcx::ConfigError& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return kExitInvalidConfig;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "invalid configuration: %s\n", e.what());
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStageFailure;
  }
}
