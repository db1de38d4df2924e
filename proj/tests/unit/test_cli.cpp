#include <fstream>
#include <sstream>

#include "atlas/bundle.hpp"
#include "atlas/cli.hpp"
#include "atlas/rect_hmm.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace atlas;
using testing_support::TempDir;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result atlas_run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[std::filesystem::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

}  // namespace

TEST_CASE("exit codes") {
  CHECK(atlas_run({}).code == cli::kExitUnknownCommand);
  const Result unknown = atlas_run({"frobnicate"});
  CHECK(unknown.code == cli::kExitUnknownCommand);
  CHECK(unknown.err.rfind("error: unknown-subcommand", 0) == 0);
  const Result bad = atlas_run({"synth", "--no-such-flag"});
  CHECK(bad.code == cli::kExitConfig);
  CHECK(bad.err.rfind("error: config:", 0) == 0);
  CHECK(atlas_run({"synth", "--family", "nope", "--out", "/tmp/x"}).code == cli::kExitConfig);
  TempDir dir;
  const Result missing = atlas_run({"fit-gmm", "--store", (dir / "nothing").string(), "--bundle", (dir / "b").string(),
                                    "--layer", "x", "--k", "2"});
  CHECK(missing.code == cli::kExitRuntime);
  CHECK(missing.err.rfind("error: ", 0) == 0);
}

TEST_CASE("config file supplies flags") {
  TempDir dir;
  {
    std::ofstream cfg(dir / "cfg.json");
    cfg << nlohmann::json{{"family", "gmm"}, {"examples", 50}, {"val-examples", 20}, {"seed", 3}}.dump();
  }
  const Result r = atlas_run({"synth", "--config", (dir / "cfg.json").string(), "--out", (dir / "d").string(),
                              "--examples", "40"});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(ActivationStore::open(dir / "d" / "train").example_count() == 40);
  CHECK(ActivationStore::open(dir / "d" / "val").example_count() == 20);
  {
    std::ofstream cfg(dir / "broken.json");
    cfg << "{not json";
  }
  CHECK(atlas_run({"synth", "--config", (dir / "broken.json").string(), "--out", (dir / "e").string()}).code ==
        cli::kExitConfig);
}

TEST_CASE("planted pipeline") {
  TempDir dir;
  const std::string data = (dir / "data").string(), bundle = (dir / "bundle").string();
  REQUIRE(atlas_run({"synth", "--family", "planted-cooc", "--examples", "200", "--val-examples", "80", "--seed", "1",
                     "--out", data})
              .code == 0);
  const auto store_before = tree(data);
  const Result fit = atlas_run({"fit-gmm", "--store", data, "--bundle", bundle, "--layer", "low", "--k", "6",
                                "--epochs", "5"});
  REQUIRE(fit.code == 0);
  CHECK(fit.out.find('\n') == fit.out.size() - 1);
  CHECK(ModelBundle::open(bundle).has("gmm_low"));
  REQUIRE(atlas_run({"fit-gmm", "--store", data, "--bundle", bundle, "--layer", "mid", "--k", "5", "--epochs", "5"}).code == 0);
  REQUIRE(atlas_run({"fit-gmm", "--store", data, "--bundle", bundle, "--layer", "out", "--fixed-output"}).code == 0);
  REQUIRE(atlas_run({"fit-gmm", "--store", data, "--bundle", bundle, "--layer", "mid", "--k", "5", "--epochs", "2",
                     "--loss", "discriminative", "--warm-epochs", "2"})
              .code == 0);
  REQUIRE(atlas_run({"assign", "--store", data, "--bundle", bundle, "--layers", "low,mid,out"}).code == 0);
  REQUIRE(atlas_run({"cooccur", "--store", data, "--bundle", bundle, "--layers", "low,mid,out"}).code == 0);
  const std::vector<std::string> mine{"mine", "--store", data, "--bundle", bundle, "--layers", "low,mid,out",
                                      "--class", "1", "--z", "2"};
  REQUIRE(atlas_run(mine).code == 0);
  const auto graph_file = std::filesystem::path(bundle) / "graph_class1.json";
  const std::string first = slurp(graph_file);
  const auto doc = nlohmann::json::parse(first);
  std::map<int, int> per_level;
  for (const auto& n : doc.at("nodes")) ++per_level[n.at("level").get<int>()];
  for (const auto& [level, count] : per_level) CHECK(count <= 2);
  CHECK(per_level[2] == 1);
  REQUIRE(atlas_run(mine).code == 0);
  CHECK(slurp(graph_file) == first);
  CHECK(std::filesystem::exists(std::filesystem::path(bundle) / "graph_class1.dot"));

  REQUIRE(atlas_run({"mine", "--store", data, "--bundle", bundle, "--layers", "low,mid,out", "--image", "3"}).code == 0);
  REQUIRE(atlas_run({"neighbors", "--store", data, "--bundle", bundle, "--class", "0", "--max", "2"}).code == 0);
  REQUIRE(atlas_run({"reps", "--store", data, "--bundle", bundle, "--layer", "mid", "--cluster", "0"}).code == 0);
  const auto reps = nlohmann::json::parse(slurp(std::filesystem::path(bundle) / "reps_mid_0.json"));
  for (const auto& r : reps.at("representatives")) {
    CHECK(r.at("crop").get<bool>() == (r.at("word_fraction").get<double>() < 0.05));
    CHECK(r.at("receptive_field").at(0).at("h") == 2);
  }
  REQUIRE(atlas_run({"simmat", "--store", data, "--bundle", bundle, "--layer", "low"}).code == 0);
  REQUIRE(atlas_run({"export-dot", "--graph", graph_file.string(), "--out", (dir / "g.dot").string()}).code == 0);
  CHECK(slurp(dir / "g.dot") == slurp(std::filesystem::path(bundle) / "graph_class1.dot"));
  CHECK(tree(data) == store_before);
}

TEST_CASE("hmm pipeline") {
  TempDir dir;
  const std::string data = (dir / "data").string(), bundle = (dir / "bundle").string();
  REQUIRE(atlas_run({"synth", "--family", "rect-hmm", "--examples", "300", "--val-examples", "50", "--k", "2,3",
                     "--layer-dims", "3,3", "--seed", "2", "--out", data})
              .code == 0);
  REQUIRE(atlas_run({"fit-hmm", "--store", data, "--bundle", bundle, "--layers", "fc1,fc2", "--k", "2,3", "--epochs",
                     "5"})
              .code == 0);
  REQUIRE(atlas_run({"path", "--store", data, "--bundle", bundle, "--example", "7"}).code == 0);
  const auto doc = nlohmann::json::parse(slurp(std::filesystem::path(bundle) / "path_7.json"));
  const RectHmm model = load_hmm(ModelBundle::open(bundle));
  const ActivationStore val = ActivationStore::open(std::filesystem::path(data) / "val");
  const std::vector<LayerData> layers{val.layer("fc1"), val.layer("fc2")};
  std::vector<std::vector<float>> buffer;
  Observation x;
  gather(layers, 7, buffer, x);
  CHECK(doc.at("states").get<std::vector<int>>() == viterbi(model, x).states);
  REQUIRE(atlas_run({"assign", "--store", data, "--bundle", bundle, "--layers", "fc1,fc2"}).code == 0);
  REQUIRE(atlas_run({"junction", "--store", data, "--bundle", bundle, "--layer", "fc1", "--cluster", "0", "--method",
                     "llr"})
              .code == 0);
  CHECK(std::filesystem::exists(std::filesystem::path(bundle) / "junction_fc1_0.json"));
  CHECK(atlas_run({"path", "--store", data, "--bundle", bundle, "--example", "5000"}).code == cli::kExitRuntime);
}
