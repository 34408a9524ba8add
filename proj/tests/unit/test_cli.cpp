#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "icam/util.hpp"

#ifndef ICAM_CLI_PATH
#error "ICAM_CLI_PATH must name the icam executable"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int status = -1;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome run_icam(const std::string& args, const fs::path& scratch) {
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string(ICAM_CLI_PATH) + " " + args + " > " + (scratch / "stdout.txt").string() +
                          " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  Outcome o;
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  o.err = slurp(err);
  return o;
}

const json kTiny = {
    {"seed", 3},
    {"data", {{"n_samples", 40}, {"height", 32}, {"width", 32}, {"band_thickness_young", 3.0},
              {"band_thickness_old", 1.0}}},
    {"model", {{"height", 32}, {"width", 32}, {"attr_channels", 3}, {"content_channels", 4},
               {"attr_encoder_widths", {4, 4, 6, 6}}, {"content_encoder_widths", {4, 4}},
               {"content_res_blocks", 1}, {"generator_res_blocks", 1}, {"generator_widths", {4, 4}},
               {"domain_disc_widths", {4, 6}}, {"content_disc_width", 6}}},
    {"train", {{"batch_size", 4}, {"epochs", 1}, {"regression_epochs", 1}, {"max_val_pairs", 2}}},
    {"baseline", {{"epochs", 1}}},
    {"eval", {{"max_pairs", 2}, {"baseline_pairs", 1}, {"interpolation_pairs", 1}, {"ig_steps", 10},
              {"ig_check_images", 1}, {"occlusion_block", 8}, {"occlusion_stride", 8}}}};

// One generated dataset and trained run shared by the cases below.
struct Workspace {
  testing::TempDir dir{"icam_cli"};
  fs::path config, data, run;
  bool ready = false;

  Workspace() {
    config = dir / "tiny.json";
    std::ofstream(config) << kTiny.dump(2);
    data = dir / "gen";
    run = dir / "run";
    ready = run_icam("gen-data -c " + config.string() + " -o " + data.string(), dir.path()).status == 0 &&
            run_icam("train -c " + config.string() + " -d " + (data / "data").string() + " -o " + run.string(),
                 dir.path())
                    .status == 0;
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

fs::path first_image(const fs::path& data_dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(data_dir / "images")) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files.front();
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("gen-data is reproducible") {
    auto& w = workspace();
    REQUIRE(w.ready);
    const auto again = w.dir / "gen2";
    REQUIRE(run_icam("gen-data -c " + w.config.string() + " -o " + again.string(), w.dir.path()).status == 0);
    CHECK(icam::directory_hash(w.data / "data") == icam::directory_hash(again / "data"));
    const auto manifest = json::parse(slurp(again / "run_manifest.json"));
    CHECK(manifest["command"] == "gen-data");
    CHECK(manifest["config_hash"] == icam::config_hash(manifest["config"]));
  }

  TEST_CASE("existing output directory is refused without --force") {
    auto& w = workspace();
    REQUIRE(w.ready);
    const auto o = run_icam("gen-data -c " + w.config.string() + " -o " + w.data.string(), w.dir.path());
    CHECK(o.status == 2);
    const auto err = json::parse(o.err);
    CHECK(err["error"] == "io_error");
    CHECK(err["command"] == "gen-data");
    CHECK(run_icam("gen-data -c " + w.config.string() + " -o " + w.data.string() + " --force", w.dir.path()).status ==
          0);
  }

  TEST_CASE("bad configuration and usage errors") {
    auto& w = workspace();
    auto bad = kTiny;
    bad["train"]["batch_size"] = 3;
    std::ofstream(w.dir / "bad.json") << bad.dump();
    const auto o = run_icam("gen-data -c " + (w.dir / "bad.json").string() + " -o " + (w.dir / "x").string(), w.dir.path());
    CHECK(o.status == 2);
    CHECK(json::parse(o.err)["error"] == "bad_config");
    CHECK(!fs::exists(w.dir / "x"));
    const auto u = run_icam("eval -d " + (w.data / "data").string() + " -o " + (w.dir / "y").string(), w.dir.path());
    CHECK(u.status == 2);
    CHECK(json::parse(u.err)["error"] == "usage_error");
  }

  TEST_CASE("training writes checkpoints") {
    auto& w = workspace();
    REQUIRE(w.ready);
    for (const char* f : {"best.ckpt", "last.ckpt", "baseline.ckpt", "metrics.csv", "config.json",
                          "run_manifest.json"}) {
      CAPTURE(f);
      CHECK(fs::exists(w.run / f));
    }
  }

  TEST_CASE("identity evaluation reports skipped subjects") {
    auto& w = workspace();
    REQUIRE(w.ready);
    const auto out = w.dir / "evid";
    REQUIRE(run_icam("eval --identity -d " + (w.data / "data").string() + " -o " + out.string(), w.dir.path()).status == 0);
    const auto subjects = slurp(out / "subjects.csv");
    CHECK(subjects.find(",skipped,") != std::string::npos);
    CHECK(subjects.find(",ok,") == std::string::npos);
    CHECK(fs::exists(out / "metrics.csv"));
  }

  TEST_CASE("checkpoint evaluation") {
    auto& w = workspace();
    REQUIRE(w.ready);
    const auto out = w.dir / "ev";
    REQUIRE(run_icam("eval -c " + w.config.string() + " -k " + (w.run / "best.ckpt").string() + " -d " +
                     (w.data / "data").string() + " -o " + out.string(),
                 w.dir.path())
                .status == 0);
    const auto metrics = slurp(out / "metrics.csv");
    CHECK(metrics.find("flip_translated") != std::string::npos);
    CHECK(metrics.find("ncc_pos,icam,") != std::string::npos);
  }

  TEST_CASE("interpolation, translation, attribution and embedding") {
    auto& w = workspace();
    REQUIRE(w.ready);
    const auto img = first_image(w.data / "data").string();
    const auto ckpt = (w.run / "best.ckpt").string();

    const auto ip = w.dir / "ip";
    REQUIRE(run_icam("interpolate -k " + ckpt + " -a " + img + " -b " + img + " --steps 11 -o " + ip.string(),
                 w.dir.path())
                .status == 0);
    std::ifstream csv(ip / "interpolation.csv");
    std::string line;
    std::getline(csv, line);
    std::vector<double> alphas;
    while (std::getline(csv, line)) alphas.push_back(std::stod(line.substr(line.find(',') + 1)));
    REQUIRE(alphas.size() == 11);
    CHECK(alphas.front() == 0.0);
    CHECK(alphas.back() == 1.0);
    CHECK(alphas[5] == doctest::Approx(0.5));

    const auto tr = w.dir / "tr";
    REQUIRE(run_icam("translate -k " + ckpt + " -a " + img + " -b " + img + " -o " + tr.string(), w.dir.path()).status ==
            0);
    CHECK(fs::exists(tr / "v.tns"));
    CHECK(fs::exists(tr / "m_x.png"));

    const auto at = w.dir / "at";
    REQUIRE(run_icam("attribute -k " + ckpt + " -i " + img + " -t 1 -n 3 --max-attempts 1000 -o " + at.string(),
                 w.dir.path())
                .status == 0);
    CHECK(fs::exists(at / "fa_mean.tns"));
    CHECK(fs::exists(at / "samples.csv"));

    const auto em = w.dir / "em";
    REQUIRE(run_icam("embed -k " + ckpt + " -d " + (w.data / "data").string() + " -m pca -o " + em.string(),
                 w.dir.path())
                .status == 0);
    CHECK(slurp(em / "embedding.csv").rfind("id,x,y,phenotype,class", 0) == 0);

    const auto replay = w.dir / "ip_replay";
    REQUIRE(run_icam("replay -m " + (ip / "run_manifest.json").string() + " -o " + replay.string(), w.dir.path()).status ==
            0);
    CHECK(slurp(replay / "interpolation.csv") == slurp(ip / "interpolation.csv"));
  }

  TEST_CASE("a mask file is not an image") {
    auto& w = workspace();
    REQUIRE(w.ready);
    const auto mask = w.data / "data" / "masks" / first_image(w.data / "data").filename();
    REQUIRE(fs::exists(mask));
    const auto o = run_icam("translate -k " + (w.run / "best.ckpt").string() + " -a " + mask.string() + " -b " +
                            mask.string() + " -o " + (w.dir / "trm").string(),
                        w.dir.path());
    CHECK(o.status == 2);
    CHECK(json::parse(o.err)["error"] == "contract_error");
  }
}
