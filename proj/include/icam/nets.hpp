#pragma once

// The five learnable components of the translation network, 2D variant:
//   E^a  attribute encoder (+ classification / regression heads)
//   E^c  content encoder
//   G    generator
//   D    domain discriminator (realness + class)
//   D^c  content discriminator
//
// Spatial layout for an H x W input: attribute latent H/16 x W/16, content
// latent H/4 x W/4.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

namespace icam::nets {

struct ModelConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t attr_channels = 16;
  std::int64_t content_channels = 64;
  std::vector<std::int64_t> attr_encoder_widths{16, 32, 64, 64};  // one per down block (4 blocks = /16)
  std::vector<std::int64_t> content_encoder_widths{16, 32};        // stem, first down conv
  std::int64_t content_res_blocks = 4;
  std::int64_t generator_res_blocks = 2;
  std::vector<std::int64_t> generator_widths{32, 16};  // one per x2 up block
  std::vector<std::int64_t> domain_disc_widths{16, 32, 64, 64};
  std::int64_t content_disc_width = 64;
  double content_noise_sigma = 0.1;
  // "fan_in": N(0, gain^2 / fan_in) per layer; "normal": N(0, 0.02^2) everywhere.
  std::string weight_init = "fan_in";
  std::uint64_t seed = 0;

  void validate() const;
  std::int64_t attr_height() const { return height / 16; }
  std::int64_t attr_width() const { return width / 16; }
  std::int64_t content_height() const { return height / 4; }
  std::int64_t content_width() const { return width / 4; }
  std::int64_t attr_numel() const { return attr_channels * attr_height() * attr_width(); }

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class SamplingMode { deterministic, stochastic };

/// Batched attribute latent, each tensor N x C_a x h x w.
struct AttrLatent {
  torch::Tensor mean;
  torch::Tensor log_var;
  torch::Tensor sample;
};

/// N x C_c x H/4 x W/4.
struct ContentLatent {
  torch::Tensor features;
};

/// Both tensors have shape [N].
struct Prediction {
  torch::Tensor class_logit;
  torch::Tensor regression_value;
};

struct DomainJudgement {
  torch::Tensor realness_logit;
  torch::Tensor class_logit;
};

/// Reparameterised draw: mean + exp(0.5 log_var) * eps.
torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& log_var,
                             std::optional<at::Generator> generator);

/// Nearest-neighbour upsampling by an integer factor.
torch::Tensor upsample_nearest(const torch::Tensor& x, std::int64_t factor);

/// Convolution and linear weights per `scheme` (see ModelConfig::weight_init), zero biases.
void init_weights(torch::nn::Module& module, at::Generator& generator, const std::string& scheme = "fan_in");

// --------------------------------------------------------------------------
// Building blocks

struct DownResBlockImpl : torch::nn::Module {
  DownResBlockImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
};
TORCH_MODULE(DownResBlock);

struct BasicResBlockImpl : torch::nn::Module {
  explicit BasicResBlockImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(BasicResBlock);

struct UpBlockImpl : torch::nn::Module {
  UpBlockImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::ConvTranspose2d deconv{nullptr};
};
TORCH_MODULE(UpBlock);

// --------------------------------------------------------------------------
// Components

struct AttributeEncoderImpl : torch::nn::Module {
  explicit AttributeEncoderImpl(const ModelConfig& config);
  /// Activations of the last down block (N x widths.back() x H/16 x W/16).
  torch::Tensor features(const torch::Tensor& x);
  /// (mean, log_var) from last-block features.
  std::pair<torch::Tensor, torch::Tensor> latent_from_features(const torch::Tensor& features);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);

  torch::nn::Conv2d stem{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Conv2d to_mean{nullptr}, to_log_var{nullptr};
};
TORCH_MODULE(AttributeEncoder);

/// f_C1 (class logit) and f_C2 (regression value), both linear in the
/// flattened attribute sample.
struct PredictionHeadsImpl : torch::nn::Module {
  explicit PredictionHeadsImpl(std::int64_t attr_numel);
  Prediction forward(const torch::Tensor& attr_sample);
  torch::Tensor class_logit(const torch::Tensor& attr_sample);

  torch::nn::Linear classifier{nullptr}, regressor{nullptr};
};
TORCH_MODULE(PredictionHeads);

struct ContentEncoderImpl : torch::nn::Module {
  explicit ContentEncoderImpl(const ModelConfig& config);
  /// Noise-free features; the model adds the Gaussian noise layer.
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d stem{nullptr}, down1{nullptr}, down2{nullptr};
  torch::nn::ModuleList res{nullptr};
};
TORCH_MODULE(ContentEncoder);

struct GeneratorImpl : torch::nn::Module {
  explicit GeneratorImpl(const ModelConfig& config);
  torch::Tensor forward(const torch::Tensor& content, const torch::Tensor& attr);

  std::int64_t upsample_factor;
  torch::nn::ModuleList res{nullptr}, up{nullptr};
  torch::nn::Conv2d to_image{nullptr};
};
TORCH_MODULE(Generator);

struct DomainDiscriminatorImpl : torch::nn::Module {
  explicit DomainDiscriminatorImpl(const ModelConfig& config);
  DomainJudgement forward(const torch::Tensor& x);

  torch::nn::ModuleList convs{nullptr};
  torch::nn::Conv2d realness{nullptr}, classes{nullptr};
};
TORCH_MODULE(DomainDiscriminator);

struct ContentDiscriminatorImpl : torch::nn::Module {
  explicit ContentDiscriminatorImpl(const ModelConfig& config);
  torch::Tensor forward(const torch::Tensor& content);

  torch::nn::ModuleList convs{nullptr};
  torch::nn::Conv2d last{nullptr};
  torch::nn::Linear fc{nullptr};
};
TORCH_MODULE(ContentDiscriminator);

// --------------------------------------------------------------------------

enum class Component { attribute_encoder, heads, content_encoder, generator, domain_disc, content_disc };
std::string to_string(Component c);

class IcamModel {
 public:
  explicit IcamModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  AttrLatent encode_attribute(const torch::Tensor& images, SamplingMode mode,
                              std::optional<at::Generator> generator = std::nullopt);
  ContentLatent encode_content(const torch::Tensor& images, bool training,
                               std::optional<at::Generator> generator = std::nullopt);
  Prediction predict(const AttrLatent& attr);
  Prediction predict_sample(const torch::Tensor& attr_sample);
  torch::Tensor generate(const ContentLatent& content, const torch::Tensor& attr_sample);
  torch::Tensor generate(const ContentLatent& content, const AttrLatent& attr) {
    return generate(content, attr.sample);
  }
  DomainJudgement discriminate_domain(const torch::Tensor& images);
  torch::Tensor discriminate_content(const ContentLatent& content);

  std::vector<torch::Tensor> parameters(Component c) const;
  std::vector<torch::Tensor> parameters(std::initializer_list<Component> cs) const;
  std::int64_t parameter_count(Component c) const;
  /// "<component>.<param name>" -> tensor, for checkpointing.
  std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const;

  void to(torch::Dtype dtype);
  torch::Dtype dtype() const;

  AttributeEncoder attribute_encoder{nullptr};
  PredictionHeads heads{nullptr};
  ContentEncoder content_encoder{nullptr};
  Generator generator{nullptr};
  DomainDiscriminator domain_disc{nullptr};
  ContentDiscriminator content_disc{nullptr};

 private:
  torch::nn::Module& module(Component c) const;
  void check_images(const torch::Tensor& images, const char* op) const;

  ModelConfig config_;
};

}  // namespace icam::nets
