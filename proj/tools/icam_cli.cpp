// icam: command-line front end.
//
// Every command writes into a fresh output directory (staged, then renamed)
// together with run_manifest.json. `icam replay` re-runs a command from such a
// manifest alone.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include <ATen/CPUGeneratorImpl.h>
#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "icam/attribution.hpp"
#include "icam/baselines.hpp"
#include "icam/checkpoint.hpp"
#include "icam/dataset.hpp"
#include "icam/errors.hpp"
#include "icam/pipeline.hpp"
#include "icam/synthdata.hpp"
#include "icam/tensor_io.hpp"
#include "icam/trainer.hpp"
#include "icam/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace icam;

namespace {

constexpr const char* kManifestName = "run_manifest.json";

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& message) : Error("usage_error", message) {}
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

std::string absolute(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

torch::Tensor load_image(const std::string& path) { return to_tensor(image_from_record(read_tensor_file(path))); }

void save_tensor(const fs::path& path, const torch::Tensor& t) { write_tensor_file(path, tensor_to_record(t)); }

std::unique_ptr<nets::IcamModel> load_translator(const std::string& path) {
  return std::move(load_model(path).model);
}

synth::Split split_of(const json& j) { return synth::split_from_string(j.value("split", std::string("test"))); }

// --------------------------------------------------------------------------
// Commands. Each takes the command config and its input paths, both exactly
// as they are recorded in the run manifest.

void gen_data(const json& config, const json&, const fs::path& out) {
  auto run = config.get<pipeline::RunConfig>();
  run.data.threads = threads_from_env(run.data.threads);
  const auto manifest = synth::generate_dataset(run.data, run.seed, out / "data");
  std::cout << "generated " << manifest.records.size() << " records (train " << manifest.count(synth::Split::train)
            << ", val " << manifest.count(synth::Split::val) << ", test " << manifest.count(synth::Split::test)
            << ")\n";
}

void train_cmd(const json& config, const json& inputs, const fs::path& out) {
  const auto run = config.get<pipeline::RunConfig>().resolved();
  const fs::path data = inputs.at("data").get<std::string>();
  const auto manifest = synth::read_manifest(data);
  const auto train = load_split(data, manifest, synth::Split::train);
  const auto val = load_split(data, manifest, synth::Split::val);
  write_json(out / "config.json", run);
  const auto fit = train::fit(train, val, run.model, run.train, out,
                              [](const std::string& phase, int epoch, const losses::LossReport& r,
                                 const train::ValidationMetrics& v) {
                                std::cout << phase << " epoch " << epoch << ": loss " << r.total << ", val acc "
                                          << v.accuracy << ", val mae " << v.mae << ", val ncc " << v.ncc_pos << "/"
                                          << v.ncc_neg << std::endl;
                              });
  std::cout << "selected " << fit.best_phase << " epoch " << fit.best_epoch << '\n';
  auto baseline = baselines::make_baseline(run.model, run.baseline.seed);
  const auto br = baselines::train_baseline(baseline, train, run.baseline);
  baselines::save_baseline(out / "baseline.ckpt", baseline, run.baseline);
  std::cout << "baseline train accuracy " << br.train_accuracy << '\n';
}

void eval_cmd(const json& config, const json& inputs, const fs::path& out) {
  const auto eval_config = config.at("eval").get<pipeline::EvalConfig>();
  const fs::path data = inputs.at("data").get<std::string>();
  const auto test = load_split(data, split_of(config));

  std::unique_ptr<nets::IcamModel> model;
  std::unique_ptr<pipeline::Translator> translator;
  if (config.value("identity", false)) {
    translator = std::make_unique<pipeline::IdentityTranslator>();
  } else {
    model = load_translator(inputs.at("checkpoint").get<std::string>());
    translator = std::make_unique<pipeline::IcamTranslator>(*model);
  }
  std::optional<baselines::BaselineCNN> baseline;
  if (const auto b = inputs.value("baseline", std::string{}); !b.empty()) baseline = baselines::load_baseline(b);

  const auto result = pipeline::evaluate(*translator, baseline ? &*baseline : nullptr, test, eval_config);
  result.report.write_csv(out / "metrics.csv");
  pipeline::write_subject_csv(out / "subjects.csv", result.subjects);
  result.report.print(std::cout);
}

void translate_cmd(const json&, const json& inputs, const fs::path& out) {
  const auto model = load_translator(inputs.at("checkpoint").get<std::string>());
  const auto x = load_image(inputs.at("image_a").get<std::string>());
  const auto y = load_image(inputs.at("image_b").get<std::string>());
  const auto b = attr::translate_pair(*model, x, y);
  const std::pair<const char*, const torch::Tensor*> images[] = {
      {"x", &b.x}, {"y", &b.y}, {"x_rec", &b.x_rec}, {"y_rec", &b.y_rec},
      {"v", &b.v}, {"mu", &b.mu}, {"x_cc", &b.x_cc}, {"y_cc", &b.y_cc}};
  for (const auto& [name, t] : images) {
    save_tensor(out / (std::string(name) + ".tns"), (*t)[0]);
    attr::write_image_png(out / (std::string(name) + ".png"), to_image((*t)[0]));
  }
  for (const auto& [name, t] : {std::pair{"m_x", &b.m_x}, std::pair{"m_y", &b.m_y}}) {
    save_tensor(out / (std::string(name) + ".tns"), (*t)[0]);
    attr::write_heatmap_png(out / (std::string(name) + ".png"), to_image((*t)[0]));
  }
}

void attribute_cmd(const json& config, const json& inputs, const fs::path& out) {
  const auto model = load_translator(inputs.at("checkpoint").get<std::string>());
  const auto x = load_image(inputs.at("image").get<std::string>());
  const int target = config.at("target_class").get<int>();
  if (target != 0 && target != 1) throw ConfigError("target class must be 0 or 1");
  auto rng = at::make_generator<at::CPUGeneratorImpl>(config.at("seed").get<std::uint64_t>());
  const auto stats = attr::attribute_single(*model, x, target, config.at("samples").get<int>(), rng,
                                            config.at("max_attempts").get<int>());
  save_tensor(out / "fa_mean.tns", stats.mean_map);
  save_tensor(out / "fa_var.tns", stats.var_map);
  attr::write_heatmap_png(out / "fa_mean.png", to_image(stats.mean_map));
  attr::write_heatmap_png(out / "fa_var.png", to_image(stats.var_map));
  std::ofstream csv(out / "samples.csv");
  csv << "sample,attempts,class_logit,regression_value\n" << std::setprecision(10);
  for (int i = 0; i < stats.n_samples; ++i) {
    csv << i << ',' << stats.attempts[i] << ',' << stats.class_logits[i] << ',' << stats.regression_values[i] << '\n';
  }
  std::cout << stats.n_samples << " samples, variance " << (stats.variance_defined ? "defined" : "undefined") << '\n';
}

void interpolate_cmd(const json& config, const json& inputs, const fs::path& out) {
  const auto model = load_translator(inputs.at("checkpoint").get<std::string>());
  const auto x = load_image(inputs.at("image_a").get<std::string>());
  const auto y = load_image(inputs.at("image_b").get<std::string>());
  const auto steps = attr::interpolate(*model, x, y, config.at("steps").get<int>());
  std::ofstream csv(out / "interpolation.csv");
  csv << "step,alpha,class_logit,regression_value,image,fa_map\n" << std::setprecision(10);
  for (std::size_t k = 0; k < steps.size(); ++k) {
    std::ostringstream stem;
    stem << "step_" << std::setw(3) << std::setfill('0') << k;
    const auto& s = steps[k];
    save_tensor(out / (stem.str() + ".tns"), s.image);
    save_tensor(out / (stem.str() + "_fa.tns"), s.fa_map);
    attr::write_image_png(out / (stem.str() + ".png"), to_image(s.image));
    attr::write_heatmap_png(out / (stem.str() + "_fa.png"), to_image(s.fa_map));
    csv << k << ',' << s.alpha << ',' << s.class_logit << ',' << s.regression_value << ',' << stem.str() << ".tns,"
        << stem.str() << "_fa.tns\n";
  }
}

void embed_cmd(const json& config, const json& inputs, const fs::path& out) {
  const auto model = load_translator(inputs.at("checkpoint").get<std::string>());
  const auto data = load_split(inputs.at("data").get<std::string>(), split_of(config));
  const auto method = attr::embed_method_from_string(config.at("method").get<std::string>());
  const auto points = attr::embed_latents(*model, data, method, config.at("seed").get<std::uint64_t>());
  attr::write_embedding_csv(out / "embedding.csv", points);
  std::cout << points.size() << " points embedded with " << attr::to_string(method) << '\n';
}

using Command = void (*)(const json&, const json&, const fs::path&);

Command command_by_name(const std::string& name) {
  if (name == "gen-data") return gen_data;
  if (name == "train") return train_cmd;
  if (name == "eval") return eval_cmd;
  if (name == "translate") return translate_cmd;
  if (name == "attribute") return attribute_cmd;
  if (name == "interpolate") return interpolate_cmd;
  if (name == "embed") return embed_cmd;
  throw UsageError("unknown command: " + name);
}

std::uint64_t seed_of(const json& config) {
  if (config.contains("seed") && config["seed"].is_number_unsigned()) return config["seed"].get<std::uint64_t>();
  return 0;
}

void run(const std::string& name, const json& config, const json& inputs, const std::string& out, bool force) {
  const auto command = command_by_name(name);
  pipeline::StagedDirectory dir(out, force);
  command(config, inputs, dir.path());
  write_json(dir.path() / kManifestName, pipeline::run_manifest(name, config, seed_of(config), inputs));
  dir.commit();
  std::cout << "wrote " << dir.target().string() << '\n';
}

json run_config_json(const std::string& path, std::optional<std::uint64_t> seed) {
  auto config = path.empty() ? pipeline::RunConfig{} : pipeline::load_run_config(path);
  if (seed) config.seed = *seed;
  return config;
}

void report_error(const std::string& command, const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}, {"command", command}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(threads_from_env(1));

  CLI::App app{"Synthetic phenotype translation: data generation, training, attribution and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string out, config_path, data, checkpoint, baseline, image_a, image_b, method = "tsne", split = "test";
  std::string manifest_path;
  bool force = false, identity = false;
  std::optional<std::uint64_t> seed;
  std::uint64_t sample_seed = 0;
  int target_class = 1, samples = attr::kDefaultAttributeSamples, max_attempts = 100, steps = 11;

  auto add_out = [&](CLI::App* c) {
    c->add_option("-o,--out", out, "Output directory (must not exist)")->required();
    c->add_flag("--force", force, "Replace an existing output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("-c,--config", config_path, "Run configuration JSON");
  gen->add_option("--seed", seed, "Master seed (overrides the config)");
  add_out(gen);

  auto* train = app.add_subcommand("train", "Train the translator and the baseline classifier");
  train->add_option("-c,--config", config_path, "Run configuration JSON");
  train->add_option("--seed", seed, "Master seed (overrides the config)");
  train->add_option("-d,--data", data, "Dataset directory")->required();
  add_out(train);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  ev->add_option("-k,--checkpoint", checkpoint, "Translator checkpoint");
  ev->add_option("-b,--baseline", baseline, "Baseline classifier checkpoint (default: next to --checkpoint)");
  ev->add_flag("--identity", identity, "Evaluate the identity translator instead of a checkpoint");
  ev->add_option("-c,--config", config_path, "Run configuration JSON (eval section used)");
  ev->add_option("-d,--data", data, "Dataset directory")->required();
  ev->add_option("--split", split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  add_out(ev);

  auto* tr = app.add_subcommand("translate", "Translate a pair of images into each other's class");
  tr->add_option("-k,--checkpoint", checkpoint, "Translator checkpoint")->required();
  tr->add_option("-a,--image-a", image_a, "Tensor file of the first image")->required();
  tr->add_option("-b,--image-b", image_b, "Tensor file of the second image")->required();
  add_out(tr);

  auto* at = app.add_subcommand("attribute", "Feature attribution towards a target class");
  at->add_option("-k,--checkpoint", checkpoint, "Translator checkpoint")->required();
  at->add_option("-i,--image", image_a, "Tensor file of the image")->required();
  at->add_option("-t,--target-class", target_class, "Target class")->check(CLI::Range(0, 1))->required();
  at->add_option("-n,--samples", samples, "Attribute samples")->check(CLI::PositiveNumber);
  at->add_option("--max-attempts", max_attempts, "Rejection sampling draws per sample")->check(CLI::PositiveNumber);
  at->add_option("--seed", sample_seed, "Sampling seed");
  add_out(at);

  auto* ip = app.add_subcommand("interpolate", "Walk the attribute space between two images");
  ip->add_option("-k,--checkpoint", checkpoint, "Translator checkpoint")->required();
  ip->add_option("-a,--image-a", image_a, "Tensor file of the source image")->required();
  ip->add_option("-b,--image-b", image_b, "Tensor file of the target image")->required();
  ip->add_option("-s,--steps", steps, "Number of steps including both ends")->check(CLI::Range(2, 10000));
  add_out(ip);

  auto* em = app.add_subcommand("embed", "2D embedding of the attribute means of a dataset split");
  em->add_option("-k,--checkpoint", checkpoint, "Translator checkpoint")->required();
  em->add_option("-d,--data", data, "Dataset directory")->required();
  em->add_option("--split", split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  em->add_option("-m,--method", method, "tsne or pca")->check(CLI::IsMember({"tsne", "pca"}));
  em->add_option("--seed", sample_seed, "Embedding seed");
  add_out(em);

  auto* rp = app.add_subcommand("replay", "Re-run a command from its run manifest");
  rp->add_option("-m,--manifest", manifest_path, "run_manifest.json of an earlier run")->required();
  add_out(rp);

  std::string command = "icam";
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      throw UsageError(e.what());
    }
    auto* sub = app.get_subcommands().front();
    command = sub->get_name();

    json config = json::object(), inputs = json::object();
    if (sub == gen) {
      config = run_config_json(config_path, seed);
    } else if (sub == train) {
      config = run_config_json(config_path, seed);
      inputs["data"] = absolute(data);
    } else if (sub == ev) {
      if (identity == !checkpoint.empty()) throw UsageError("eval needs exactly one of --checkpoint or --identity");
      const auto run_config = config_path.empty() ? pipeline::RunConfig{} : pipeline::load_run_config(config_path);
      config = {{"eval", run_config.eval}, {"identity", identity}, {"split", split}};
      inputs["data"] = absolute(data);
      if (!identity) {
        inputs["checkpoint"] = absolute(checkpoint);
        if (baseline.empty()) {
          const auto sibling = fs::path(checkpoint).parent_path() / "baseline.ckpt";
          if (fs::exists(sibling)) baseline = sibling.string();
        }
      }
      inputs["baseline"] = absolute(baseline);
    } else if (sub == tr) {
      inputs = {{"checkpoint", absolute(checkpoint)}, {"image_a", absolute(image_a)}, {"image_b", absolute(image_b)}};
    } else if (sub == at) {
      config = {{"target_class", target_class}, {"samples", samples}, {"max_attempts", max_attempts},
                {"seed", sample_seed}};
      inputs = {{"checkpoint", absolute(checkpoint)}, {"image", absolute(image_a)}};
    } else if (sub == ip) {
      config = {{"steps", steps}};
      inputs = {{"checkpoint", absolute(checkpoint)}, {"image_a", absolute(image_a)}, {"image_b", absolute(image_b)}};
    } else if (sub == em) {
      config = {{"method", method}, {"seed", sample_seed}, {"split", split}};
      inputs = {{"checkpoint", absolute(checkpoint)}, {"data", absolute(data)}};
    } else if (sub == rp) {
      const auto manifest = read_json(manifest_path);
      if (!manifest.contains("command") || !manifest.contains("config") || !manifest.contains("inputs")) {
        throw ConfigError("not a run manifest: " + manifest_path);
      }
      command = manifest["command"].get<std::string>();
      if (config_hash(manifest["config"]) != manifest.value("config_hash", std::string{})) {
        throw ConfigError("run manifest config hash does not match its config");
      }
      config = manifest["config"];
      inputs = manifest["inputs"];
    }
    try {
      run(command, config, inputs, out, force);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed configuration: ") + e.what());
    }
    return 0;
  } catch (const train::RejectionExhaustedError& e) {
    report_error(command, e.code(), std::string(e.what()) + " (best probability " +
                                        std::to_string(e.best_probability()) + ")");
  } catch (const Error& e) {
    report_error(command, e.code(), e.what());
  } catch (const c10::Error& e) {
    report_error(command, "contract_error", e.what_without_backtrace());
  } catch (const fs::filesystem_error& e) {
    report_error(command, "io_error", e.what());
  } catch (const std::exception& e) {
    report_error(command, "internal_error", e.what());
  }
  return 2;
}
