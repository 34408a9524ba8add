#pragma once

// Glue shared by the command-line tool and the acceptance suite: the merged
// run configuration, the evaluation protocol and output-directory handling.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "icam/attribution.hpp"
#include "icam/baselines.hpp"
#include "icam/dataset.hpp"
#include "icam/evalmetrics.hpp"
#include "icam/nets.hpp"
#include "icam/synthdata.hpp"
#include "icam/trainer.hpp"

namespace icam::pipeline {

struct EvalConfig {
  std::int64_t max_pairs = 100;          // class-0/class-1 test pairs for NCC and flip test
  std::int64_t baseline_pairs = 100;     // pairs scored with the reference attribution methods
  int interpolation_pairs = 20;
  int interpolation_steps = 11;
  std::int64_t occlusion_block = 10;
  std::int64_t occlusion_stride = 5;
  int ig_steps = 200;
  std::int64_t ig_check_images = 20;     // completeness check on the baseline
  bool fa_mean_absolute = true;          // FA-phenotype correlation uses mean |M| (else signed mean)

  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

/// Every module's configuration plus the master seed. Sub-configuration
/// seeds are derived from `seed` by `resolved()`.
struct RunConfig {
  std::uint64_t seed = 0;
  synth::DatasetConfig data;
  nets::ModelConfig model;
  train::TrainConfig train;
  baselines::BaselineConfig baseline;
  EvalConfig eval;

  void validate() const;
  RunConfig resolved() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

// --------------------------------------------------------------------------
// Evaluation

/// Anything that produces a translation bundle and, optionally, predictions.
class Translator {
 public:
  virtual ~Translator() = default;
  virtual attr::TranslationBundle translate(const torch::Tensor& x, const torch::Tensor& y) = 0;
  /// Predictions from the attribute means, if the translator has heads.
  virtual std::optional<nets::Prediction> predict(const torch::Tensor& images) = 0;
  /// Model for latent-space operations (interpolation), if any.
  virtual nets::IcamModel* model() { return nullptr; }
};

class IcamTranslator : public Translator {
 public:
  explicit IcamTranslator(nets::IcamModel& model) : model_(model) {}
  attr::TranslationBundle translate(const torch::Tensor& x, const torch::Tensor& y) override;
  std::optional<nets::Prediction> predict(const torch::Tensor& images) override;
  nets::IcamModel* model() override { return &model_; }

 private:
  nets::IcamModel& model_;
};

/// Returns every input unchanged; all FA maps are zero.
class IdentityTranslator : public Translator {
 public:
  attr::TranslationBundle translate(const torch::Tensor& x, const torch::Tensor& y) override;
  std::optional<nets::Prediction> predict(const torch::Tensor&) override { return std::nullopt; }
};

struct SubjectRecord {
  std::string id;
  std::string direction;  // pos (class 0 -> 1) or neg (class 1 -> 0)
  std::string method;
  double ncc = 0.0;
  bool skipped = false;
  std::string reason;
};

struct EvalResult {
  eval::MetricsReport report;
  std::vector<SubjectRecord> subjects;
  std::vector<double> interpolation_spearman;  // per pair
  std::vector<double> ig_completeness_error;   // relative, per image
};

/// `baseline` serves both as the independent flip-test classifier and as the
/// model explained by the reference attribution methods; it may be null.
EvalResult evaluate(Translator& translator, baselines::BaselineCNN* baseline, const TensorDataset& test,
                    const EvalConfig& config);

void write_subject_csv(const std::filesystem::path& path, const std::vector<SubjectRecord>& subjects);

/// Relative completeness error |sum IG - (f(x) - f(x0))| / |f(x) - f(x0)|.
double ig_completeness_error(const baselines::ScalarModel& f, const torch::Tensor& image,
                             const torch::Tensor& baseline_image, int steps);

// --------------------------------------------------------------------------
// Output directories

/// Stages writes in a sibling temporary directory and moves it into place on
/// commit(). An existing target is an error unless `force` is set. The
/// staging directory is removed if commit() never runs.
class StagedDirectory {
 public:
  StagedDirectory(std::filesystem::path target, bool force);
  ~StagedDirectory();
  StagedDirectory(const StagedDirectory&) = delete;
  StagedDirectory& operator=(const StagedDirectory&) = delete;

  const std::filesystem::path& path() const { return staging_; }
  const std::filesystem::path& target() const { return target_; }
  void commit();

 private:
  std::filesystem::path target_, staging_;
  bool force_;
  bool committed_ = false;
};

/// Run manifest: command, resolved config, its hash, seed and versions.
nlohmann::json run_manifest(const std::string& command, const nlohmann::json& config, std::uint64_t seed,
                            const nlohmann::json& inputs = nlohmann::json::object());

}  // namespace icam::pipeline
