#pragma once

// FA maps from the trained translator and analysis of the attribute space.
// Everything here runs the model in test mode: attribute means instead of
// samples and no content noise, so results are deterministic.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "icam/dataset.hpp"
#include "icam/grid.hpp"
#include "icam/nets.hpp"

namespace icam::attr {

/// All tensors N x 1 x H x W.
struct TranslationBundle {
  torch::Tensor x, y;
  torch::Tensor x_rec, y_rec;  // self-reconstructions
  torch::Tensor v, mu;         // v = G(c_x, a_y), mu = G(c_y, a_x)
  torch::Tensor x_cc, y_cc;    // translated back
  torch::Tensor m_x, m_y;      // v - x, mu - y
};

/// Accepts N x 1 x H x W or a single 1 x H x W / H x W image for either slot.
TranslationBundle translate_pair(nets::IcamModel& model, const torch::Tensor& x, const torch::Tensor& y);

struct FAStatistics {
  torch::Tensor mean_map;  // 1 x H x W
  torch::Tensor var_map;   // population variance, zeros when n_samples == 1
  int n_samples = 0;
  bool variance_defined = false;
  std::vector<double> class_logits;
  std::vector<double> regression_values;
  std::vector<int> attempts;      // rejection draws per accepted sample
  std::vector<torch::Tensor> maps;  // individual maps when requested
};

/// Elementwise mean and population variance of equally shaped maps.
FAStatistics map_statistics(const std::vector<torch::Tensor>& maps);

inline constexpr int kDefaultAttributeSamples = 32;

/// Translates a single image towards `target_class` with `n_samples`
/// rejection-sampled attribute codes. Rejection exhaustion propagates.
FAStatistics attribute_single(nets::IcamModel& model, const torch::Tensor& x, int target_class, int n_samples,
                              at::Generator& rng, int max_attempts = 100, bool keep_maps = false);

struct InterpolationStep {
  double alpha = 0.0;
  torch::Tensor image;   // 1 x H x W
  torch::Tensor fa_map;  // image - x
  double class_logit = 0.0;
  double regression_value = 0.0;
};

/// Linear path between the attribute means of `x` and `y`, rendered with the
/// content of `x`. alpha = k / (steps - 1).
std::vector<InterpolationStep> interpolate(nets::IcamModel& model, const torch::Tensor& x, const torch::Tensor& y,
                                           int steps);

enum class EmbedMethod { tsne, pca };
std::string to_string(EmbedMethod m);
EmbedMethod embed_method_from_string(const std::string& s);

struct TsneOptions {
  double perplexity = 30.0;
  int iterations = 1000;
  int exaggeration_iterations = 250;
  double exaggeration = 12.0;
  double learning_rate = 200.0;
  std::uint64_t seed = 0;
};

/// Rows are points. Output n x 2.
Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& data);
Eigen::MatrixXd tsne_2d(const Eigen::MatrixXd& data, const TsneOptions& options = {});

inline constexpr std::int64_t kMaxExactTsnePoints = 2000;

struct EmbeddingPoint {
  std::string id;
  double x = 0.0, y = 0.0;
  double phenotype = 0.0;
  int class_label = 0;
};

/// Flattened attribute means of `dataset`, embedded in 2D.
std::vector<EmbeddingPoint> embed_latents(nets::IcamModel& model, const TensorDataset& dataset, EmbedMethod method,
                                          std::uint64_t seed = 0);

// --------------------------------------------------------------------------
// Export

/// Diverging blue-white-red rendering of a signed map over the symmetric
/// range [-limit, limit]; limit = max |value| when <= 0. Writes `path` and a
/// sidecar "<path>.json" with the range and colormap. Returns the limit used.
double write_heatmap_png(const std::filesystem::path& path, const Image& map, double limit = 0.0);

/// Grey-scale 8-bit rendering of an image clipped to [0, 1].
void write_image_png(const std::filesystem::path& path, const Image& image);

void write_embedding_csv(const std::filesystem::path& path, const std::vector<EmbeddingPoint>& points);

/// RGB triple for a value in [-1, 1] on the diverging colormap.
std::array<std::uint8_t, 3> diverging_color(double value);

}  // namespace icam::attr
