#pragma once

// Checkpoint archive:
//   magic         8 bytes "ICAMCKPT"
//   version       u32 (little-endian)
//   header_len    u32, followed by header_len bytes of UTF-8 JSON
//   record_count  u32
//   records       record_count x { name_len u32, name bytes, ICAMTNS1 tensor record }
//
// The JSON header carries "model_config" and "model_config_hash"; loading
// recomputes the hash and rejects a mismatch.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "icam/nets.hpp"
#include "icam/tensor_io.hpp"

namespace icam {

inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'A', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct CheckpointData {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const torch::Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

TensorRecord tensor_to_record(const torch::Tensor& t);
torch::Tensor record_to_tensor(const TensorRecord& r);

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Model parameters under their "<component>.<name>" keys plus `extra`
/// tensors; `header` gains the model config and its hash.
void save_model(const std::filesystem::path& path, const nets::IcamModel& model, nlohmann::json header = {},
                const std::vector<NamedTensor>& extra = {});

struct LoadedModel {
  std::unique_ptr<nets::IcamModel> model;
  CheckpointData data;
};
LoadedModel load_model(const std::filesystem::path& path);

/// Copies tensors named like `params` (prefix + name) from `data` into them.
void restore_parameters(const CheckpointData& data, const std::vector<std::pair<std::string, torch::Tensor>>& params);

}  // namespace icam
