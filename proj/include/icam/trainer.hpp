#pragma once

// Training procedure. One iteration consumes three class-balanced batches:
// the first two update the content discriminator, the third drives the
// domain discriminator update followed by the joint encoder/generator update.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "icam/checkpoint.hpp"
#include "icam/dataset.hpp"
#include "icam/errors.hpp"
#include "icam/losses.hpp"
#include "icam/nets.hpp"
#include "icam/optim.hpp"

namespace icam::train {

struct TrainConfig {
  double lr_content_disc = 4e-5;
  double lr_other = 1e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  std::int64_t batch_size = 16;  // total per batch, split evenly between the two classes
  int epochs = 50;               // classification phase
  int regression_epochs = 50;    // fine-tuning phase, used when regression_enabled
  losses::LossWeights weights;
  std::uint64_t seed = 0;
  bool regression_enabled = true;
  int rejection_max_attempts = 100;
  std::int64_t max_val_pairs = 64;  // class-0/class-1 pairs scored for validation NCC

  void validate() const;
  std::int64_t per_class() const { return batch_size / 2; }
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Maps a batch of attribute samples (N x C_a x h x w) to class logits [N].
using LatentClassifier = std::function<torch::Tensor(const torch::Tensor&)>;

class RejectionExhaustedError : public Error {
 public:
  RejectionExhaustedError(const std::string& message, torch::Tensor best_sample, double best_probability)
      : Error("rejection_exhausted", message),
        best_sample_(std::move(best_sample)),
        best_probability_(best_probability) {}

  /// Draw whose target-class probability was highest, shape C_a x h x w.
  const torch::Tensor& best_sample() const { return best_sample_; }
  double best_probability() const { return best_probability_; }

 private:
  torch::Tensor best_sample_;
  double best_probability_;
};

struct RejectionResult {
  torch::Tensor sample;  // C_a x h x w
  int attempts = 0;
};

/// First prior draw the classifier assigns to `target_class`.
/// Throws RejectionExhaustedError after `max_attempts` rejected draws.
RejectionResult rejection_sample_attr(const LatentClassifier& classifier, int target_class,
                                      const std::vector<std::int64_t>& prior_shape, int max_attempts,
                                      at::Generator& rng);

struct BatchRejection {
  torch::Tensor samples;  // N x C_a x h x w
  std::vector<int> attempts;
  int exhausted = 0;  // rows that fell back to their best-scoring draw
};

/// Row-wise rejection sampling for `targets` [N]. With `fallback_to_best`,
/// exhausted rows take their best-scoring draw instead of throwing.
BatchRejection rejection_sample_batch(const LatentClassifier& classifier, const torch::Tensor& targets,
                                      const std::vector<std::int64_t>& prior_shape, int max_attempts,
                                      at::Generator& rng, bool fallback_to_best);

/// Images N x 1 x H x W with their labels and phenotypes.
struct ClassBatch {
  torch::Tensor images;
  torch::Tensor labels;
  torch::Tensor phenotypes;
};

struct IterationBatches {
  // Content discriminator updates 1 and 2, then the main update.
  std::pair<ClassBatch, ClassBatch> content_disc_1, content_disc_2, main;
};

class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& message, losses::LossReport report)
      : Error("non_finite_loss", message), report_(std::move(report)) {}
  const losses::LossReport& report() const { return report_; }

 private:
  losses::LossReport report_;
};

class Trainer {
 public:
  Trainer(nets::IcamModel& model, TrainConfig config);

  /// Switches on the regression loss (phase 2).
  void set_regression(bool enabled) { regression_enabled_ = enabled; }
  bool regression_enabled() const { return regression_enabled_; }

  losses::LossReport training_iteration(const IterationBatches& batches);
  /// Single class pair reused for all three updates.
  losses::LossReport training_iteration(const ClassBatch& class0, const ClassBatch& class1);

  /// Runs one epoch over `train`; returns the mean of every term.
  losses::LossReport train_epoch(const TensorDataset& train);

  void save_state(const std::filesystem::path& path, nlohmann::json extra_header = {}) const;
  /// Restores parameters, optimiser moments, counters and the RNG.
  nlohmann::json load_state(const std::filesystem::path& path);

  nets::IcamModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  at::Generator& rng() { return rng_; }

  std::int64_t iteration() const { return iteration_; }
  int epoch() const { return epoch_; }
  void set_epoch(int epoch) { epoch_ = epoch; }
  std::optional<double> best_val_metric;

 private:
  double content_disc_update(const ClassBatch& x, const ClassBatch& y);

  nets::IcamModel& model_;
  TrainConfig config_;
  bool regression_enabled_ = false;
  at::Generator rng_;
  optim::Adam content_disc_opt_, domain_disc_opt_, main_opt_;
  std::int64_t iteration_ = 0;
  int epoch_ = 0;
};

/// Serialised generator state as lowercase hex and back.
std::string rng_state_hex(const at::Generator& rng);
void set_rng_state_hex(at::Generator& rng, const std::string& hex);

// --------------------------------------------------------------------------
// Full training run with validation-based model selection.

struct ValidationMetrics {
  double accuracy = 0.0;
  double mae = 0.0;
  double ncc_pos = 0.0;  // class 0 -> 1 maps against gt
  double ncc_neg = 0.0;  // class 1 -> 0
  std::int64_t ncc_pairs = 0;
  double ncc_mean() const { return 0.5 * (ncc_pos + ncc_neg); }
};

ValidationMetrics validate(nets::IcamModel& model, const TensorDataset& val, std::int64_t max_pairs);

struct FitResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path metrics_csv;
  int best_epoch = -1;
  std::string best_phase;
};

using EpochCallback = std::function<void(const std::string& phase, int epoch, const losses::LossReport&,
                                         const ValidationMetrics&)>;

/// Classification phase (selection: highest mean validation NCC), then the
/// optional regression phase started from the best classification weights
/// (selection: lowest validation MAE). Writes best.ckpt, last.ckpt and
/// metrics.csv into `out_dir`; the classification winner is kept as
/// classification_best.ckpt when regression follows.
FitResult fit(const TensorDataset& train, const TensorDataset& val, const nets::ModelConfig& model_config,
              const TrainConfig& config, const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

/// Column order of metrics.csv.
std::vector<std::string> metrics_columns();

}  // namespace icam::train
