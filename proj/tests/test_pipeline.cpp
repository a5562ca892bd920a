#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "racnet/pipeline.hpp"

using namespace racnet;

namespace fs = std::filesystem;

namespace {

Json tiny_config(const std::string& out_dir) {
  Json j;
  j["dataset"] = {{"type", "synthetic"}, {"train", 30}, {"val", 12}, {"test", 12},
                  {"noise", 0.4}};
  j["seed"] = 5;
  j["train"] = {{"lr", 2e-3}, {"batch", 8}, {"epochs", 1}};
  j["lrp"] = {{"max_samples", 20}};
  j["validation_layers"] = {4, 5};
  j["k"] = 4;
  j["delta_th"] = 0.7;
  j["blc"] = {{"epochs", 2}};
  j["out"] = out_dir;
  return j;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("parse_config: invalid values rejected with the field named") {
  Json j = tiny_config("/tmp/x");

  SUBCASE("bad delta_th") {
    j["delta_th"] = 1.5;
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("delta_th"),
                         std::invalid_argument);
  }
  SUBCASE("bad k") {
    j["k"] = 0;
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("config.k"),
                         std::invalid_argument);
  }
  SUBCASE("bad lrp alpha/beta") {
    j["lrp"] = {{"alpha", 2.0}, {"beta", 0.5}};
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("lrp.alpha"),
                         std::invalid_argument);
  }
  SUBCASE("non-increasing validation layers") {
    j["validation_layers"] = {5, 4};
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("validation_layers"),
                         std::invalid_argument);
  }
  SUBCASE("unknown dataset type") {
    j["dataset"]["type"] = "imagenet";
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("dataset.type"),
                         std::invalid_argument);
  }
  SUBCASE("idx dataset without paths") {
    j["dataset"] = {{"type", "idx"}};
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("train_images"),
                         std::invalid_argument);
  }
  SUBCASE("bad learning rate") {
    j["train"]["lr"] = -1.0;
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("train.lr"),
                         std::invalid_argument);
  }
  SUBCASE("wrong type for a field") {
    j["seed"] = "not-a-number";
    CHECK_THROWS_WITH_AS(parse_config(j), doctest::Contains("seed"),
                         std::invalid_argument);
  }
}

TEST_CASE("load_splits: synthetic splits are disjoint by construction and labeled") {
  DatasetSpec spec;
  spec.train_n = 20;
  spec.val_n = 10;
  spec.test_n = 10;
  const Splits s = load_splits(spec);
  CHECK(s.train.size() == 20);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 10);
  CHECK(s.train.num_classes == 10);
  CHECK(s.train.tag == "train");
  CHECK(s.val.tag == "validation");
  CHECK(s.test.tag == "test");
  for (int l : s.train.labels) {
    CHECK(l >= 0);
    CHECK(l < 10);
  }
  // First samples of different splits differ (independent salts).
  CHECK((s.train.inputs[0].data - s.val.inputs[0].data).lpNorm<Eigen::Infinity>() > 0.0);
}

TEST_CASE("pipeline: train/relevance/racs/eval end-to-end on a tiny config") {
  TempDir dir("racnet_pipeline_test");
  const ExperimentConfig cfg = parse_config(tiny_config(dir.str()));

  // Train and cache.
  const std::string mpath = cmd_train(cfg, false);
  REQUIRE(fs::exists(mpath));
  const std::string bytes = read_file(mpath);
  const auto mtime = fs::last_write_time(mpath);
  CHECK(fs::exists(dir.path / "training_log.json"));

  // Rerun without force: file untouched.
  cmd_train(cfg, false);
  CHECK(fs::last_write_time(mpath) == mtime);

  // Retrain with force: byte-identical (same config + seed).
  cmd_train(cfg, true);
  CHECK(read_file(mpath) == bytes);

  // Relevance: one file per validation layer, cached on rerun.
  const auto paths = cmd_relevance(cfg, false);
  REQUIRE(paths.size() == 2);
  for (const auto& p : paths) REQUIRE(fs::exists(p));
  const auto rel_mtime = fs::last_write_time(paths[0]);
  cmd_relevance(cfg, false);
  CHECK(fs::last_write_time(paths[0]) == rel_mtime);

  // RACs: structural checks on the bundle.
  const std::string rpath = cmd_train_racs(cfg, false);
  const RacBundle bundle = load_racs(rpath);
  REQUIRE(bundle.racs.size() == 2);
  const Network net = load_model(mpath);
  CHECK(bundle.model_hash == model_hash(net));
  double params = 0.0;
  for (const Rac& r : bundle.racs) {
    CHECK(r.blcs.size() == 10);
    params += r.param_count();
  }
  CHECK(params == 2.0 * 10.0 * (4 * 8 * 8 + 1));

  // Eval: outcome log size, identity, report file.
  const EvalOutputs out = cmd_eval(cfg, false);
  CHECK(out.detection.n_samples == 12);
  CHECK(out.detection.pct_correct + out.detection.pct_nd + out.detection.pct_bad ==
        doctest::Approx(100.0).epsilon(1e-9));
  std::ifstream log(out.outcomes_path);
  int lines = 0;
  for (std::string line; std::getline(log, line);)
    if (!line.empty()) ++lines;
  CHECK(lines == 12);

  // Baseline-only: pct_bad equals baseline error, ratio exactly 1.
  const EvalOutputs base = cmd_eval(cfg, true);
  CHECK(base.detection.pct_nd == 0.0);
  CHECK(base.flops.normalized_flops == doctest::Approx(1.0).epsilon(1e-12));
  if (base.detection.tnr.has_value()) CHECK(base.detection.tnr.value() == 0.0);
}

TEST_CASE("pipeline: eval refuses a RAC bundle from a different model") {
  TempDir dir("racnet_pipeline_mismatch");
  ExperimentConfig cfg = parse_config(tiny_config(dir.str()));
  cmd_train(cfg, false);
  cmd_relevance(cfg, false);
  cmd_train_racs(cfg, false);

  // Tamper with the stored model hash.
  RacBundle bundle = load_racs(racs_path(cfg));
  bundle.model_hash = "deadbeef";
  save_racs(bundle, racs_path(cfg));
  CHECK_THROWS_WITH_AS(cmd_eval(cfg, false), doctest::Contains("hash"),
                       std::runtime_error);
}

TEST_CASE("pipeline: k larger than the layer width fails citing r") {
  TempDir dir("racnet_pipeline_bigk");
  Json j = tiny_config(dir.str());
  j["k"] = 500;  // conv layers 4/5 have 128 maps
  const ExperimentConfig cfg = parse_config(j);
  cmd_train(cfg, false);
  cmd_relevance(cfg, false);
  CHECK_THROWS_WITH_AS(cmd_train_racs(cfg, false), doctest::Contains("128"),
                       std::invalid_argument);
}
