#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "imcx/errors.hpp"
#include "imcx/metrics.hpp"
#include "imcx/pipeline.hpp"
#include "reference_table.hpp"
#include "test_support.hpp"

using namespace imcx;
using namespace imcx::pipeline;
namespace fs = std::filesystem;

namespace {

// Six subjects of 64 x 64 px give 24 patches of 32 px; one smallcnn run trains in well under a second.
RunConfig tiny_config(const fs::path& dir) {
  RunConfig c;
  c.output_dir = dir;
  c.synthetic.image_size = 64;
  c.synthetic.fiber_count = 4;
  c.synthetic.mean_fiber_diameter = 20.0;
  c.n_control = 3;
  c.n_patient = 3;
  c.patch_size = 32;
  c.stride = 32;
  c.group_by_subject = true;
  c.backbones = {Backbone::smallcnn};
  c.channel_selections = {{"NDUFB8"}};
  c.seeds = {0};
  c.train.max_epochs = 1;
  c.train.batch_size = 8;
  c.methods = {xai::Method::gradients, xai::Method::lrp_z};
  c.top_k = 1;
  return c;
}

// Two backbones x three channels x two seeds, explained with every method.
RunConfig matrix_config(const fs::path& dir) {
  RunConfig c = tiny_config(dir);
  c.synthetic.image_size = 96;
  c.synthetic.fiber_count = 6;
  c.synthetic.mean_fiber_diameter = 24.0;
  c.backbones = {Backbone::smallcnn, Backbone::vgg16};
  c.channel_selections = {{"COX4"}, {"NDUFB8"}, {"SDHA"}};
  c.seeds = {0, 1};
  c.methods = {xai::kAllMethods.begin(), xai::kAllMethods.end()};
  c.top_k = 2;
  c.patches_per_class = 1;
  return c;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string read_text(const fs::path& p) { return test::read_bytes(p); }

// The matrix run is shared by several cases.
const fs::path& matrix_run() {
  static test::TempDir dir;
  static const bool done = [] {
    run_experiment(matrix_config(dir.path()));
    return true;
  }();
  (void)done;
  return dir.path();
}

#ifdef IMCX_CLI_PATH
int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + IMCX_CLI_PATH + "\" -q " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
#endif

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("run configuration JSON round trip") {
    const RunConfig c = matrix_config("some/dir");
    const RunConfig back = RunConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.backbones.size() == 2);
    CHECK(back.methods.size() == xai::kAllMethods.size());
    CHECK(back.output_dir == fs::path("some/dir"));

    const RunConfig partial = RunConfig::from_json(R"({"explanation": {"top_k": 1}})");
    CHECK(partial.top_k == 1);
    CHECK(partial.patch_size == RunConfig{}.patch_size);
  }

  TEST_CASE("invalid configurations raise ConfigError") {
    CHECK_THROWS_AS(RunConfig::from_json("{ not json"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(R"({"training": {"backbones": ["alexnet"]}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(R"({"training": {"optimizer": "sgd"}})"), ConfigError);

    auto invalid = [](auto mutate) {
      RunConfig c = tiny_config("x");
      mutate(c);
      CHECK_THROWS_AS(c.validate(), ConfigError);
    };
    invalid([](RunConfig& c) { c.patch_size = 0; });
    invalid([](RunConfig& c) { c.split = {0.5, 0.1, 0.1}; });
    invalid([](RunConfig& c) { c.seeds.clear(); });
    invalid([](RunConfig& c) { c.channel_selections = {{"ALL", "COX4"}}; });
    invalid([](RunConfig& c) { c.top_k = 2; });
    invalid([](RunConfig& c) { c.top_k = -1; });
    invalid([](RunConfig& c) { c.map_percentile = 0.0; });
    invalid([](RunConfig& c) { c.source = "ingest"; });
    invalid([](RunConfig& c) { c.train.learning_rate = -1.0; });
    CHECK_NOTHROW(tiny_config("x").validate());
  }

  TEST_CASE("selection names") {
    CHECK(selection_name({"ALL"}) == "All-Channels");
    CHECK(selection_name({"COX4"}) == "COX4");
    CHECK(selection_name({"COX4", "SDHA"}) == "COX4+SDHA");
  }

  TEST_CASE("full run ranks every backbone and channel") {
    const fs::path& dir = matrix_run();
    const auto ranking = lines(read_text(dir / "metrics" / "ranking.csv"));
    REQUIRE(ranking.size() == 1 + 2 * 3);
    CHECK(ranking[0] == "model,dataset,channel,ta_seed1,ta_seed2,mean_ta,sd_ta,var_ta");
    std::set<std::string> units;
    for (std::size_t i = 1; i < ranking.size(); ++i) units.insert(ranking[i].substr(0, ranking[i].find(",synthetic,")));
    CHECK(units == std::set<std::string>{"smallcnn", "vgg16"});
    CHECK(lines(read_text(dir / "metrics" / "metrics.csv")).size() == 1 + 2 * 3 * 2);
    for (const char* f : {"macro_metrics.csv", "patient_metrics.csv", "predictions.csv"})
      CHECK(fs::exists(dir / "metrics" / f));

    const auto manifest = RunManifest::load(dir);
    REQUIRE(manifest);
    REQUIRE(manifest->stages.size() == std::size(kStages));
    for (const auto& s : manifest->stages) CHECK(s.status == "complete");
    CHECK(manifest->verify(dir));
  }

  TEST_CASE("explanation matrix renders one figure per method, model and patch") {
    const fs::path& dir = matrix_run();
    const auto index = lines(read_text(dir / "figures" / "index.csv"));
    REQUIRE(index.size() == 1 + 9 * 2 * 2);
    std::set<std::string> files;
    for (std::size_t i = 1; i < index.size(); ++i) {
      const std::string name = index[i].substr(0, index[i].find(','));
      CHECK(name.ends_with(".png"));
      CHECK(fs::exists(dir / "figures" / name));
      files.insert(name);
    }
    CHECK(files.size() == 36);
    for (const auto m : xai::kAllMethods) {
      const std::string tag = "__" + std::string(xai::to_string(m)) + "__";
      CHECK(std::count_if(files.begin(), files.end(), [&](const std::string& f) {
              return f.find(tag) != std::string::npos;
            }) == 4);
    }
    const std::string rep = read_text(dir / "report.md");
    CHECK(rep.find("## Model ranking") != std::string::npos);
    CHECK(rep.find("_Gap") == std::string::npos);
    CHECK(rep.find(*files.begin()) != std::string::npos);
  }

  TEST_CASE("an unchanged rerun skips every stage") {
    const fs::path& dir = matrix_run();
    const std::string before = read_text(dir / "manifest.json");
    const std::string ranking = read_text(dir / "metrics" / "ranking.csv");
    std::vector<std::string> log;
    run_experiment(matrix_config(dir), Stage::report, [&](const std::string& m) { log.push_back(m); });
    int skipped = 0;
    for (const auto& m : log) skipped += m.find("unchanged, skipped") != std::string::npos;
    CHECK(skipped == static_cast<int>(std::size(kStages)));
    CHECK(read_text(dir / "manifest.json") == before);
    CHECK(read_text(dir / "metrics" / "ranking.csv") == ranking);
  }

  TEST_CASE("identical configurations give identical outputs") {
    test::TempDir a, b;
    run_experiment(tiny_config(a.path()));
    run_experiment(tiny_config(b.path()));
    for (const char* f : {"metrics/ranking.csv", "metrics/metrics.csv", "metrics/predictions.csv",
                          "figures/index.csv", "report.md"})
      CHECK(read_text(a / f) == read_text(b / f));
    for (const auto& e : fs::directory_iterator(a / "figures"))
      if (e.path().extension() == ".png")
        CHECK(read_text(e.path()) == read_text(b / "figures" / e.path().filename().string()));
  }

  TEST_CASE("tampered artifacts fail verification and are regenerated") {
    test::TempDir dir;
    run_experiment(tiny_config(dir.path()));
    auto manifest = RunManifest::load(dir.path());
    REQUIRE(manifest);
    CHECK(manifest->verify(dir.path()));
    const std::string ranking = read_text(dir / "metrics" / "ranking.csv");
    test::write_bytes(dir / "metrics" / "ranking.csv", "tampered\n");
    CHECK_FALSE(manifest->verify(dir.path()));

    std::vector<std::string> rerun;
    run_experiment(tiny_config(dir.path()), Stage::report, [&](const std::string& m) { rerun.push_back(m); });
    CHECK(std::find(rerun.begin(), rerun.end(), "train: unchanged, skipped") != rerun.end());
    CHECK(std::find(rerun.begin(), rerun.end(), "evaluate: running") != rerun.end());
    CHECK(read_text(dir / "metrics" / "ranking.csv") == ranking);
    CHECK(RunManifest::load(dir.path())->verify(dir.path()));
  }

  TEST_CASE("changing a stage setting reruns that stage and its dependents only") {
    test::TempDir dir;
    RunConfig c = tiny_config(dir.path());
    run_experiment(c);
    c.methods = {xai::Method::deep_taylor};
    std::vector<std::string> log;
    run_experiment(c, Stage::report, [&](const std::string& m) { log.push_back(m); });
    for (const char* s : {"data", "patchify", "train", "evaluate"})
      CHECK(std::find(log.begin(), log.end(), std::string(s) + ": unchanged, skipped") != log.end());
    for (const char* s : {"explain", "render", "report"})
      CHECK(std::find(log.begin(), log.end(), std::string(s) + ": running") != log.end());
    const auto index = lines(read_text(dir / "figures" / "index.csv"));
    REQUIRE(index.size() == 3);
    CHECK(index[1].find("__deep_taylor__") != std::string::npos);
  }

  TEST_CASE("a failing stage is recorded in the manifest") {
    test::TempDir dir;
    RunConfig c = tiny_config(dir.path());
    c.train.learning_rate = 1e308;  // the first update overflows the weights
    c.train.max_epochs = 3;
    CHECK_THROWS_AS(run_experiment(c), TrainingError);
    const auto manifest = RunManifest::load(dir.path());
    REQUIRE(manifest);
    const StageRecord* train = manifest->find(Stage::train);
    REQUIRE(train);
    CHECK(train->status == "failed");
    CHECK(train->message.find("non-finite") != std::string::npos);
    CHECK(manifest->find(Stage::evaluate) == nullptr);
    CHECK(manifest->find(Stage::patchify)->status == "complete");
  }

  TEST_CASE("an empty explanation matrix is reported with its reason") {
    test::TempDir dir;
    RunConfig c = tiny_config(dir.path());
    c.top_k = 0;
    run_experiment(c);
    const std::string rep = read_text(dir / "report.md");
    CHECK(rep.find("_No figures: the explanation matrix is empty") != std::string::npos);
    CHECK(lines(read_text(dir / "figures" / "index.csv")).size() == 1);
  }

  TEST_CASE("partial runs report their gaps") {
    test::TempDir dir;
    const RunManifest m = run_experiment(tiny_config(dir.path()), Stage::patchify);
    CHECK(m.stages.size() == 2);
    const std::string rep = report(m, dir.path());
    CHECK(rep.find("| train | missing | 0 |") != std::string::npos);
    CHECK(rep.find("_Gap: the evaluate stage has not completed, so no ranking is available._") != std::string::npos);
    CHECK(rep.find("_No figures: the render stage has not completed._") != std::string::npos);
  }

  TEST_CASE("report reproduces the reference accuracy table") {
    test::TempDir dir;
    std::vector<RankingRow> rows;
    for (const auto& r : reference::kRows) rows.push_back({r.model, "IMC", r.channel, r.accuracies, {}});
    fs::create_directories(dir / "metrics");
    test::write_bytes(dir / "metrics" / "ranking.csv", ranking_csv(rank_models(rows)));
    RunManifest m;
    m.config_sha256 = "0";
    m.software_version = "test";
    for (Stage s : {Stage::data, Stage::patchify, Stage::train, Stage::evaluate}) {
      StageRecord r;
      r.stage = s;
      r.status = "complete";
      m.stages.push_back(r);
    }
    const std::string rep = report(m, dir.path());
    for (const auto& r : reference::kRows) {
      std::ostringstream row;
      row << "| " << r.model << " | IMC | " << r.channel << " |";
      INFO(r.channel);
      const auto at = rep.find(row.str());
      REQUIRE(at != std::string::npos);
      const std::string line = rep.substr(at, rep.find('\n', at) - at);
      CHECK(line.ends_with(std::string(" ") + r.mean + " | " + r.sd + " | " + r.var + " |"));
    }
    CHECK(rep.find("VGG16 | IMC | All-Channels") < rep.find("ResNet50 | IMC | UqCRC2"));
    CHECK(rep.find("ResNet50 | IMC | VDAC1") < rep.find("ResNet50 | IMC | MTCO1"));
    CHECK(report(m, dir.path()) == rep);
  }

#ifdef IMCX_CLI_PATH
  TEST_CASE("command-line exit codes") {
    test::TempDir dir;
    const std::string cfg = (dir / "cfg.json").string();
    test::write_bytes(cfg, tiny_config(dir / "run").to_json());
    CHECK(run_cli("-c \"" + cfg + "\" config") == 0);
    CHECK(run_cli("-c \"" + cfg + "\" patchify") == 0);
    CHECK(fs::exists(dir / "run" / "patches"));
    CHECK(run_cli("-c \"" + cfg + "\" --preprocess.patch_size 0 patchify") == 2);
    CHECK(run_cli("-c \"" + (dir / "missing.json").string() + "\" run") == 2);
    test::write_bytes(dir / "bad.json", "{ nope");
    CHECK(run_cli("-c \"" + (dir / "bad.json").string() + "\" run") == 2);
    CHECK(run_cli("no-such-command") == 2);
    CHECK(run_cli("-c \"" + cfg + "\" --set training.learning_rate=1e308 train") == 1);
  }
#endif
}
