#pragma once

// Reference attribution methods on a plain classifier with the attribute
// encoder's architecture. All map functions take a scalar-output model over
// image batches (N x 1 x H x W -> [N]) and return an H x W heatmap.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "icam/dataset.hpp"
#include "icam/nets.hpp"

namespace icam::baselines {

struct BaselineConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  int epochs = 50;
  std::int64_t batch_size = 16;
  std::uint64_t seed = 0;
  bool weighted_loss = true;  // positive-class weight n_neg / n_pos

  void validate() const;
  bool operator==(const BaselineConfig&) const = default;
};

void to_json(nlohmann::json& j, const BaselineConfig& c);
void from_json(const nlohmann::json& j, BaselineConfig& c);

/// Attribute encoder -> mean latent -> flatten -> linear logit.
struct BaselineCNNImpl : torch::nn::Module {
  explicit BaselineCNNImpl(const nets::ModelConfig& config);
  /// Class-1 logits [N].
  torch::Tensor forward(const torch::Tensor& images);
  torch::Tensor logits_from_features(const torch::Tensor& features);

  nets::ModelConfig config;
  nets::AttributeEncoder encoder{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(BaselineCNN);

BaselineCNN make_baseline(const nets::ModelConfig& config, std::uint64_t seed);

struct BaselineTrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

BaselineTrainReport train_baseline(BaselineCNN& model, const TensorDataset& train, const BaselineConfig& config);
double accuracy(BaselineCNN& model, const TensorDataset& data);

void save_baseline(const std::filesystem::path& path, BaselineCNN& model, const BaselineConfig& config);
BaselineCNN load_baseline(const std::filesystem::path& path);

using ScalarModel = std::function<torch::Tensor(const torch::Tensor&)>;

/// Logit toward `target_class`: the class-1 logit, negated for class 0.
ScalarModel class_score(BaselineCNN model, int target_class);

/// Placement offsets along one axis: 0, stride, 2 stride, ... plus a final
/// placement flush with the far edge when the strided ones leave it uncovered.
std::vector<std::int64_t> occlusion_offsets(std::int64_t extent, std::int64_t block, std::int64_t stride);

torch::Tensor occlusion_map(const ScalarModel& f, const torch::Tensor& image, std::int64_t block = 10,
                            std::int64_t stride = 5, double baseline_value = 0.0);

/// Right Riemann sum over k = 1..steps.
torch::Tensor integrated_gradients_map(const ScalarModel& f, const torch::Tensor& image,
                                       const torch::Tensor& baseline_image, int steps = 200);

torch::Tensor gradient_saliency_map(const ScalarModel& f, const torch::Tensor& image);

/// ReLU(sum_c mean(dA_c) A_c) for activations / gradients C x h x w,
/// bilinearly resized to height x width.
torch::Tensor gradcam_from_activations(const torch::Tensor& activations, const torch::Tensor& gradients,
                                       std::int64_t height, std::int64_t width);

/// Grad-CAM on the last encoder block of the baseline.
torch::Tensor gradcam_map(BaselineCNN& model, const torch::Tensor& image, int target_class);

}  // namespace icam::baselines
