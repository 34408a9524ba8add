#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "icam/errors.hpp"
#include "icam/pipeline.hpp"
#include "icam/util.hpp"

using namespace icam;
using namespace icam::pipeline;

namespace {

EvalConfig small_eval() {
  EvalConfig c;
  c.max_pairs = 4;
  c.baseline_pairs = 2;
  c.interpolation_pairs = 2;
  c.interpolation_steps = 5;
  c.occlusion_block = 4;
  c.occlusion_stride = 4;
  c.ig_steps = 10;
  c.ig_check_images = 2;
  return c;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("run config JSON and seed derivation") {
    RunConfig c;
    c.seed = 42;
    nlohmann::json j = c;
    const auto back = j.get<RunConfig>();
    CHECK(nlohmann::json(back) == j);
    const auto r = c.resolved();
    CHECK(r.model.seed == derive_seed(42, 1));
    CHECK(r.train.seed == derive_seed(42, 2));
    CHECK(r.baseline.seed == derive_seed(42, 3));
    CHECK(r.model.seed != r.train.seed);

    j["extra"] = 1;
    CHECK_THROWS_AS(j.get<RunConfig>(), ConfigError);
    RunConfig mismatch;
    mismatch.model.height = 32;
    CHECK_THROWS_AS(mismatch.validate(), ConfigError);
    nlohmann::json e = small_eval();
    CHECK(e.get<EvalConfig>() == small_eval());
    e["interpolation_steps"] = 1;
    CHECK_THROWS_AS(e.get<EvalConfig>(), ConfigError);

    testing::TempDir dir;
    CHECK_THROWS_AS(load_run_config(dir / "missing.json"), IoError);
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS_AS(load_run_config(dir / "bad.json"), ConfigError);
  }

  TEST_CASE("staged directory") {
    testing::TempDir dir;
    const auto target = dir / "out";
    {
      StagedDirectory s(target, false);
      std::ofstream(s.path() / "a.txt") << "x";
      CHECK(!std::filesystem::exists(target));
      s.commit();
    }
    CHECK(std::filesystem::exists(target / "a.txt"));
    CHECK_THROWS_AS(StagedDirectory(target, false), IoError);
    {
      StagedDirectory s(target, true);
      std::ofstream(s.path() / "b.txt") << "y";
      // Abandoned without commit: the old contents survive.
    }
    CHECK(std::filesystem::exists(target / "a.txt"));
    CHECK(!std::filesystem::exists(target / "b.txt"));
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++entries;
    CHECK(entries == 1);
    {
      StagedDirectory s(target, true);
      std::ofstream(s.path() / "b.txt") << "y";
      s.commit();
    }
    CHECK(!std::filesystem::exists(target / "a.txt"));
    CHECK(std::filesystem::exists(target / "b.txt"));
  }

  TEST_CASE("run manifest") {
    const nlohmann::json cfg = {{"a", 1}};
    const auto m = run_manifest("train", cfg, 7, {{"data", "d"}});
    CHECK(m["command"] == "train");
    CHECK(m["config_hash"] == config_hash(cfg));
    CHECK(m["seed"] == 7);
    CHECK(m["inputs"]["data"] == "d");
    CHECK(m["versions"].contains("torch"));
    CHECK(config_hash(nlohmann::json{{"a", 1}}) != config_hash(nlohmann::json{{"a", 2}}));
  }

  TEST_CASE("identity translator skips every subject") {
    const auto test = testing::toy_split(8, 16);
    IdentityTranslator id;
    const auto res = evaluate(id, nullptr, test, small_eval());
    REQUIRE(res.subjects.size() == 8);
    for (const auto& s : res.subjects) {
      CHECK(s.skipped);
      CHECK(!s.reason.empty());
    }
    const auto* row = res.report.find("ncc_pos", "icam");
    REQUIRE(row != nullptr);
    CHECK(row->n == 0);
    CHECK(res.report.find("ncc_pos", "icam_skipped")->value == 4.0);
    CHECK(res.report.find("classification", "accuracy") == nullptr);

    testing::TempDir dir;
    write_subject_csv(dir / "s.csv", res.subjects);
    std::ifstream in(dir / "s.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "id,direction,method,ncc,status,reason");
    CHECK(first.find(",skipped,") != std::string::npos);
  }

  TEST_CASE("full evaluation on a tiny model") {
    const auto test = testing::toy_split(8, 16);
    nets::IcamModel model(testing::tiny_model());
    auto baseline = baselines::make_baseline(testing::tiny_model(), 3);
    IcamTranslator t(model);
    const auto res = evaluate(t, &baseline, test, small_eval());
    for (const char* section : {"ncc_pos", "ncc_neg"}) {
      for (const char* method : {"icam", "occlusion", "gradient", "integrated_gradients", "gradcam", "icam_matched"}) {
        CAPTURE(section);
        CAPTURE(method);
        CHECK(res.report.find(section, method) != nullptr);
      }
    }
    CHECK(res.report.find("classification", "accuracy") != nullptr);
    CHECK(res.report.find("flip_translated", "class1")->n == 4);
    CHECK(res.interpolation_spearman.size() == 2);
    CHECK(res.ig_completeness_error.size() == 2);
    CHECK(res.report.find("pairs", "count")->value == 4.0);
    CHECK_THROWS_AS(evaluate(t, nullptr, TensorDataset{}, small_eval()), InsufficientDataError);
  }

  TEST_CASE("integrated gradients completeness") {
    const auto w = torch::linspace(-1.0, 1.0, 16, torch::kFloat64).view({1, 4, 4});
    const baselines::ScalarModel lin = [w](const torch::Tensor& x) { return (x.flatten(1) * w.flatten()).sum(1); };
    const auto x = torch::rand({1, 4, 4}, torch::kFloat64);
    CHECK(ig_completeness_error(lin, x, torch::zeros_like(x), 3) < 1e-12);
    CHECK(ig_completeness_error(lin, x, x, 3) == 0.0);
    const baselines::ScalarModel cube = [](const torch::Tensor& t) { return t.flatten(1).pow(3).sum(1); };
    const auto coarse = ig_completeness_error(cube, x, torch::zeros_like(x), 5);
    const auto fine = ig_completeness_error(cube, x, torch::zeros_like(x), 200);
    CHECK(fine < coarse);
    CHECK(fine < 0.02);
  }
}
