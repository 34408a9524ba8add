#include "icam/baselines.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <nlohmann/json.hpp>

#include "icam/checkpoint.hpp"
#include "icam/errors.hpp"
#include "icam/losses.hpp"
#include "icam/optim.hpp"
#include "icam/util.hpp"

namespace icam::baselines {

void BaselineConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("baseline lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("baseline momentum must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("baseline epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("baseline batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const BaselineConfig& c) {
  j = {{"lr", c.lr},         {"momentum", c.momentum}, {"epochs", c.epochs},
       {"batch_size", c.batch_size}, {"seed", c.seed},         {"weighted_loss", c.weighted_loss}};
}

void from_json(const nlohmann::json& j, BaselineConfig& c) {
  if (!j.is_object()) throw ConfigError("baseline config must be a JSON object");
  BaselineConfig d;
  for (const auto& [key, value] : j.items()) {
    if (key == "lr") d.lr = value.get<double>();
    else if (key == "momentum") d.momentum = value.get<double>();
    else if (key == "epochs") d.epochs = value.get<int>();
    else if (key == "batch_size") d.batch_size = value.get<std::int64_t>();
    else if (key == "seed") d.seed = value.get<std::uint64_t>();
    else if (key == "weighted_loss") d.weighted_loss = value.get<bool>();
    else throw ConfigError("unknown baseline config key: " + key);
  }
  d.validate();
  c = d;
}

BaselineCNNImpl::BaselineCNNImpl(const nets::ModelConfig& c) : config(c) {
  config.validate();
  encoder = register_module("encoder", nets::AttributeEncoder(config));
  head = register_module("head", torch::nn::Linear(config.attr_numel(), 1));
}

torch::Tensor BaselineCNNImpl::logits_from_features(const torch::Tensor& features) {
  return head(encoder->latent_from_features(features).first.flatten(1)).squeeze(1);
}

torch::Tensor BaselineCNNImpl::forward(const torch::Tensor& images) {
  return logits_from_features(encoder->features(images));
}

BaselineCNN make_baseline(const nets::ModelConfig& config, std::uint64_t seed) {
  BaselineCNN model(config);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  nets::init_weights(*model, gen, config.weight_init);
  return model;
}

BaselineTrainReport train_baseline(BaselineCNN& model, const TensorDataset& train, const BaselineConfig& config) {
  config.validate();
  if (train.size() == 0) throw InsufficientDataError("baseline training set is empty");
  const double n_pos = train.labels.sum().item<double>();
  const double n_neg = static_cast<double>(train.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw InsufficientDataError("baseline training needs both classes");
  const double pos_weight = config.weighted_loss ? n_neg / n_pos : 1.0;

  auto rng = at::make_generator<at::CPUGeneratorImpl>(derive_seed(config.seed, 0x62617365ULL));
  optim::SgdMomentum opt(model->parameters(), config.lr, config.momentum);
  BaselineTrainReport report;
  for (int e = 0; e < config.epochs; ++e) {
    const auto perm = torch::randperm(train.size(), rng);
    double total = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t s = 0; s < train.size(); s += config.batch_size) {
      const auto sel = perm.narrow(0, s, std::min(config.batch_size, train.size() - s));
      const auto x = train.images.index_select(0, sel).to(model->head->weight.dtype());
      const auto t = train.labels.index_select(0, sel).to(x.dtype());
      const auto logits = model->forward(x);
      // Weighted BCE: positives scaled by pos_weight.
      const auto per = torch::binary_cross_entropy_with_logits(logits, t, {}, {}, at::Reduction::None);
      const auto w = 1.0 + (pos_weight - 1.0) * t;
      const auto loss = (w * per).mean();
      opt.zero_grad();
      loss.backward();
      opt.step();
      total += loss.item<double>();
      ++batches;
    }
    report.epoch_loss.push_back(total / static_cast<double>(std::max<std::int64_t>(batches, 1)));
  }
  report.train_accuracy = accuracy(model, train);
  return report;
}

double accuracy(BaselineCNN& model, const TensorDataset& data) {
  if (data.size() == 0) throw InsufficientDataError("accuracy on an empty set");
  torch::NoGradGuard no_grad;
  std::int64_t correct = 0;
  for (std::int64_t s = 0; s < data.size(); s += 64) {
    const auto len = std::min<std::int64_t>(64, data.size() - s);
    const auto logits = model->forward(data.images.narrow(0, s, len).to(model->head->weight.dtype()));
    correct += ((logits > 0).to(torch::kFloat32) == data.labels.narrow(0, s, len)).sum().item<std::int64_t>();
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void save_baseline(const std::filesystem::path& path, BaselineCNN& model, const BaselineConfig& config) {
  CheckpointData data;
  const nlohmann::json cfg = model->config;
  data.header = {{"kind", "baseline"},
                 {"model_config", cfg},
                 {"model_config_hash", config_hash(cfg)},
                 {"baseline_config", config},
                 {"version", kVersion}};
  for (const auto& p : model->named_parameters()) data.tensors.push_back({p.key(), p.value()});
  write_checkpoint(path, data);
}

BaselineCNN load_baseline(const std::filesystem::path& path) {
  const auto data = read_checkpoint(path);
  if (data.header.value("kind", std::string{}) != "baseline") throw IoError("not a baseline checkpoint: " + path.string());
  const auto& cfg = data.header.at("model_config");
  if (config_hash(cfg) != data.header.value("model_config_hash", std::string{})) {
    throw IoError("baseline checkpoint config hash mismatch: " + path.string());
  }
  BaselineCNN model(cfg.get<nets::ModelConfig>());
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& p : model->named_parameters()) params.emplace_back(p.key(), p.value());
  restore_parameters(data, params);
  return model;
}

ScalarModel class_score(BaselineCNN model, int target_class) {
  if (target_class != 0 && target_class != 1) throw ContractError("target_class must be 0 or 1");
  const double sign = target_class == 1 ? 1.0 : -1.0;
  return [model, sign](const torch::Tensor& x) mutable { return sign * model->forward(x); };
}

// --------------------------------------------------------------------------

namespace {

// Single image as 1 x 1 x H x W.
torch::Tensor single(const torch::Tensor& image, const char* op) {
  auto x = as_batch(image);
  if (x.size(0) != 1) throw ContractError(std::string(op) + ": expected a single image");
  return x;
}

}  // namespace

std::vector<std::int64_t> occlusion_offsets(std::int64_t extent, std::int64_t block, std::int64_t stride) {
  if (block < 1 || stride < 1) throw ContractError("occlusion block and stride must be >= 1");
  if (block > extent) throw ContractError("occlusion block is larger than the image");
  std::vector<std::int64_t> out;
  for (std::int64_t o = 0; o + block <= extent; o += stride) out.push_back(o);
  if (out.back() + block < extent) out.push_back(extent - block);
  return out;
}

torch::Tensor occlusion_map(const ScalarModel& f, const torch::Tensor& image, std::int64_t block, std::int64_t stride,
                            double baseline_value) {
  torch::NoGradGuard no_grad;
  const auto x = single(image, "occlusion_map");
  const auto h = x.size(2), w = x.size(3);
  const auto rows = occlusion_offsets(h, block, stride);
  const auto cols = occlusion_offsets(w, block, stride);
  const double reference = f(x).reshape({1}).to(torch::kFloat64).item<double>();

  std::vector<std::pair<std::int64_t, std::int64_t>> placements;
  for (auto r : rows) {
    for (auto c : cols) placements.emplace_back(r, c);
  }
  auto sum = torch::zeros({h, w}, torch::kFloat64);
  auto count = torch::zeros({h, w}, torch::kFloat64);
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < placements.size(); s += kChunk) {
    const auto len = std::min(kChunk, placements.size() - s);
    auto batch = x.repeat({static_cast<std::int64_t>(len), 1, 1, 1});
    for (std::size_t k = 0; k < len; ++k) {
      const auto [r, c] = placements[s + k];
      batch[static_cast<std::int64_t>(k)].narrow(1, r, block).narrow(2, c, block).fill_(baseline_value);
    }
    const auto out = f(batch).reshape({static_cast<std::int64_t>(len)}).to(torch::kFloat64);
    for (std::size_t k = 0; k < len; ++k) {
      const auto [r, c] = placements[s + k];
      const double diff = reference - out[static_cast<std::int64_t>(k)].item<double>();
      sum.narrow(0, r, block).narrow(1, c, block).add_(diff);
      count.narrow(0, r, block).narrow(1, c, block).add_(1.0);
    }
  }
  return (sum / count.clamp_min(1.0)).to(x.dtype());
}

torch::Tensor integrated_gradients_map(const ScalarModel& f, const torch::Tensor& image,
                                       const torch::Tensor& baseline_image, int steps) {
  if (steps < 1) throw ContractError("integrated gradients needs steps >= 1");
  const auto x = single(image, "integrated_gradients_map").detach();
  const auto x0 = single(baseline_image, "integrated_gradients_map").detach().to(x.dtype());
  if (x.sizes() != x0.sizes()) throw ContractError("integrated_gradients_map: image and baseline differ in shape");
  const auto delta = x - x0;
  auto grad_sum = torch::zeros_like(x[0]);
  constexpr int kChunk = 25;
  for (int s = 1; s <= steps; s += kChunk) {
    const int len = std::min(kChunk, steps - s + 1);
    auto alphas = torch::arange(s, s + len, x.options()).div_(static_cast<double>(steps)).view({len, 1, 1, 1});
    auto path = (x0 + alphas * delta).requires_grad_(true);
    const auto out = f(path).reshape({len});
    const auto g = torch::autograd::grad({out.sum()}, {path})[0];
    grad_sum += g.sum(0);
  }
  return (delta[0] * grad_sum / static_cast<double>(steps))[0];
}

torch::Tensor gradient_saliency_map(const ScalarModel& f, const torch::Tensor& image) {
  auto x = single(image, "gradient_saliency_map").detach().clone().requires_grad_(true);
  const auto out = f(x).reshape({1});
  const auto g = torch::autograd::grad({out.sum()}, {x})[0];
  return g.abs()[0][0];
}

torch::Tensor gradcam_from_activations(const torch::Tensor& activations, const torch::Tensor& gradients,
                                       std::int64_t height, std::int64_t width) {
  if (activations.dim() != 3 || activations.sizes() != gradients.sizes()) {
    throw ContractError("gradcam: activations and gradients must both be C x h x w");
  }
  const auto alpha = gradients.mean({1, 2}, true);
  const auto cam = torch::relu((alpha * activations).sum(0));
  namespace F = torch::nn::functional;
  return F::interpolate(cam.unsqueeze(0).unsqueeze(0),
                        F::InterpolateFuncOptions()
                            .size(std::vector<std::int64_t>{height, width})
                            .mode(torch::kBilinear)
                            .align_corners(false))[0][0];
}

torch::Tensor gradcam_map(BaselineCNN& model, const torch::Tensor& image, int target_class) {
  if (target_class != 0 && target_class != 1) throw ContractError("target_class must be 0 or 1");
  const auto x = single(image, "gradcam_map").to(model->head->weight.dtype());
  const auto features = model->encoder->features(x).detach().requires_grad_(true);
  const auto logit = model->logits_from_features(features).reshape({1});
  const auto score = target_class == 1 ? logit : -logit;
  const auto g = torch::autograd::grad({score.sum()}, {features})[0];
  return gradcam_from_activations(features.detach()[0], g[0], x.size(2), x.size(3));
}

}  // namespace icam::baselines
