#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "icam/synthdata.hpp"

namespace icam {

/// One split of a generated dataset, held in memory.
struct TensorDataset {
  std::vector<std::string> ids;
  torch::Tensor images;        // N x 1 x H x W, float32
  torch::Tensor labels;        // N, float32 (0/1)
  torch::Tensor phenotypes;    // N, float32
  torch::Tensor tissue_masks;  // N x H x W, float32 (0/1)
  torch::Tensor lesion_masks;  // N x H x W
  torch::Tensor gt_diffs;      // N x 1 x H x W

  std::int64_t size() const { return static_cast<std::int64_t>(ids.size()); }
  TensorDataset select(const torch::Tensor& indices) const;
  /// Indices of samples with the given class label, in order.
  torch::Tensor indices_of_class(int label) const;
};

TensorDataset load_split(const std::filesystem::path& dataset_dir, const synth::DatasetManifest& manifest,
                         synth::Split split);
TensorDataset load_split(const std::filesystem::path& dataset_dir, synth::Split split);

/// Builds a dataset directly from in-memory samples (tests, toy runs).
TensorDataset from_samples(const std::vector<synth::PhenotypeSample>& samples);

/// H x W or 1 x H x W tensor to a grid (values cast to float / nonzero).
Image to_image(const torch::Tensor& t);
Mask to_mask(const torch::Tensor& t);
/// Grid to a 1 x H x W float32 tensor.
torch::Tensor to_tensor(const Image& image);

/// Coerces H x W, 1 x H x W or N x 1 x H x W into N x 1 x H x W.
torch::Tensor as_batch(const torch::Tensor& images);

}  // namespace icam
