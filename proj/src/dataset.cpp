#include "icam/dataset.hpp"

#include "icam/checkpoint.hpp"
#include "icam/errors.hpp"
#include "icam/tensor_io.hpp"

namespace icam {

TensorDataset TensorDataset::select(const torch::Tensor& indices) const {
  TensorDataset out;
  auto idx = indices.to(torch::kLong);
  auto acc = idx.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < idx.size(0); ++i) out.ids.push_back(ids[static_cast<std::size_t>(acc[i])]);
  out.images = images.index_select(0, idx);
  out.labels = labels.index_select(0, idx);
  out.phenotypes = phenotypes.index_select(0, idx);
  out.tissue_masks = tissue_masks.index_select(0, idx);
  out.lesion_masks = lesion_masks.index_select(0, idx);
  out.gt_diffs = gt_diffs.index_select(0, idx);
  return out;
}

torch::Tensor TensorDataset::indices_of_class(int label) const {
  return torch::nonzero(labels == static_cast<float>(label)).flatten();
}

TensorDataset load_split(const std::filesystem::path& dir, const synth::DatasetManifest& manifest,
                         synth::Split split) {
  std::vector<torch::Tensor> images, tissue, lesion, gt;
  std::vector<float> labels, phenotypes;
  TensorDataset out;
  for (const auto& r : manifest.records) {
    if (r.split != split) continue;
    out.ids.push_back(r.id);
    images.push_back(record_to_tensor(read_tensor_file(dir / r.image_path)));
    const auto masks = record_to_tensor(read_tensor_file(dir / r.mask_path));
    if (masks.dim() != 3 || masks.size(0) != 2) throw IoError("mask tensor must be 2 x H x W: " + r.mask_path);
    tissue.push_back(masks[0]);
    lesion.push_back(masks[1]);
    gt.push_back(record_to_tensor(read_tensor_file(dir / r.gt_diff_path)));
    labels.push_back(static_cast<float>(r.class_label));
    phenotypes.push_back(static_cast<float>(r.phenotype));
  }
  if (out.ids.empty()) throw InsufficientDataError("split '" + synth::to_string(split) + "' is empty");
  out.images = torch::stack(images);
  out.tissue_masks = torch::stack(tissue);
  out.lesion_masks = torch::stack(lesion);
  out.gt_diffs = torch::stack(gt);
  out.labels = torch::tensor(labels);
  out.phenotypes = torch::tensor(phenotypes);
  return out;
}

TensorDataset load_split(const std::filesystem::path& dir, synth::Split split) {
  return load_split(dir, synth::read_manifest(dir), split);
}

namespace {
torch::Tensor grid_tensor(const std::vector<float>& values, std::int64_t h, std::int64_t w) {
  return torch::from_blob(const_cast<float*>(values.data()), {h, w}, torch::kFloat32).clone();
}
}  // namespace

TensorDataset from_samples(const std::vector<synth::PhenotypeSample>& samples) {
  TensorDataset out;
  std::vector<torch::Tensor> images, tissue, lesion, gt;
  std::vector<float> labels, phenotypes;
  std::size_t k = 0;
  for (const auto& s : samples) {
    const auto h = s.image.height, w = s.image.width;
    out.ids.push_back("mem" + std::to_string(k++));
    images.push_back(grid_tensor(s.image.data, h, w).unsqueeze(0));
    gt.push_back(grid_tensor(s.gt_diff.data, h, w).unsqueeze(0));
    tissue.push_back(grid_tensor(std::vector<float>(s.tissue_mask.data.begin(), s.tissue_mask.data.end()), h, w));
    lesion.push_back(grid_tensor(std::vector<float>(s.lesion_mask.data.begin(), s.lesion_mask.data.end()), h, w));
    labels.push_back(static_cast<float>(s.class_label));
    phenotypes.push_back(static_cast<float>(s.phenotype));
  }
  out.images = torch::stack(images);
  out.tissue_masks = torch::stack(tissue);
  out.lesion_masks = torch::stack(lesion);
  out.gt_diffs = torch::stack(gt);
  out.labels = torch::tensor(labels);
  out.phenotypes = torch::tensor(phenotypes);
  return out;
}

namespace {
torch::Tensor as_plane(const torch::Tensor& t) {
  auto c = t.detach();
  if (c.dim() == 3 && c.size(0) == 1) c = c[0];
  if (c.dim() != 2) throw ContractError("expected an H x W or 1 x H x W tensor");
  return c.contiguous();
}
}  // namespace

Image to_image(const torch::Tensor& t) {
  const auto c = as_plane(t).to(torch::kFloat32).contiguous();
  Image out(c.size(0), c.size(1));
  std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), out.data.begin());
  return out;
}

Mask to_mask(const torch::Tensor& t) {
  const auto c = (as_plane(t) != 0).to(torch::kUInt8).contiguous();
  Mask out(c.size(0), c.size(1));
  std::copy(c.data_ptr<std::uint8_t>(), c.data_ptr<std::uint8_t>() + c.numel(), out.data.begin());
  return out;
}

torch::Tensor to_tensor(const Image& image) { return grid_tensor(image.data, image.height, image.width).unsqueeze(0); }

torch::Tensor as_batch(const torch::Tensor& images) {
  switch (images.dim()) {
    case 2: return images.unsqueeze(0).unsqueeze(0);
    case 3:
      if (images.size(0) != 1) throw ContractError("a 3-d image tensor must be 1 x H x W");
      return images.unsqueeze(0);
    case 4:
      if (images.size(1) != 1) throw ContractError("image batches must be N x 1 x H x W");
      return images;
    default: throw ContractError("image tensor must have 2 to 4 dimensions");
  }
}

}  // namespace icam
