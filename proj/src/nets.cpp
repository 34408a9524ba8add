#include "icam/nets.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "icam/errors.hpp"

namespace icam::nets {
namespace F = torch::nn::functional;
namespace {

constexpr double kLeakySlope = 0.2;

torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, kLeakySlope); }

torch::Tensor inorm(const torch::Tensor& x) { return F::instance_norm(x, F::InstanceNormFuncOptions()); }

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t s, std::int64_t p) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(s).padding(p));
}

}  // namespace

void ModelConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError("model: image height and width must be positive multiples of 16");
  }
  if (attr_channels < 1 || content_channels < 1) throw ConfigError("model: latent channels must be >= 1");
  if (attr_encoder_widths.size() != 4) throw ConfigError("model: attr_encoder_widths needs 4 entries");
  if (content_encoder_widths.size() != 2) throw ConfigError("model: content_encoder_widths needs 2 entries");
  if (generator_widths.size() != 2) throw ConfigError("model: generator_widths needs 2 entries");
  if (domain_disc_widths.empty()) throw ConfigError("model: domain_disc_widths must not be empty");
  if ((height >> domain_disc_widths.size()) < 1 || (width >> domain_disc_widths.size()) < 1) {
    throw ConfigError("model: too many domain discriminator layers for the image size");
  }
  if (content_res_blocks < 0 || generator_res_blocks < 0) throw ConfigError("model: negative block count");
  if (content_disc_width < 1) throw ConfigError("model: content_disc_width must be >= 1");
  if (!(content_noise_sigma >= 0.0)) throw ConfigError("model: content_noise_sigma must be >= 0");
  if (weight_init != "fan_in" && weight_init != "normal") {
    throw ConfigError("model: weight_init must be fan_in or normal");
  }
  auto positive = [](const auto& v) { return std::all_of(v.begin(), v.end(), [](auto w) { return w > 0; }); };
  if (!positive(attr_encoder_widths) || !positive(content_encoder_widths) || !positive(generator_widths) ||
      !positive(domain_disc_widths)) {
    throw ConfigError("model: channel widths must be positive");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"height", c.height},
                     {"width", c.width},
                     {"attr_channels", c.attr_channels},
                     {"content_channels", c.content_channels},
                     {"attr_encoder_widths", c.attr_encoder_widths},
                     {"content_encoder_widths", c.content_encoder_widths},
                     {"content_res_blocks", c.content_res_blocks},
                     {"generator_res_blocks", c.generator_res_blocks},
                     {"generator_widths", c.generator_widths},
                     {"domain_disc_widths", c.domain_disc_widths},
                     {"content_disc_width", c.content_disc_width},
                     {"content_noise_sigma", c.content_noise_sigma},
                     {"weight_init", c.weight_init},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const nlohmann::json known = c;
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model key: " + key);
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("height", c.height);
  get("width", c.width);
  get("attr_channels", c.attr_channels);
  get("content_channels", c.content_channels);
  get("attr_encoder_widths", c.attr_encoder_widths);
  get("content_encoder_widths", c.content_encoder_widths);
  get("content_res_blocks", c.content_res_blocks);
  get("generator_res_blocks", c.generator_res_blocks);
  get("generator_widths", c.generator_widths);
  get("domain_disc_widths", c.domain_disc_widths);
  get("content_disc_width", c.content_disc_width);
  get("content_noise_sigma", c.content_noise_sigma);
  get("weight_init", c.weight_init);
  get("seed", c.seed);
}

torch::Tensor reparameterize(const torch::Tensor& mean, const torch::Tensor& log_var,
                             std::optional<at::Generator> generator) {
  auto eps = torch::randn(mean.sizes(), generator, mean.options());
  return mean + torch::exp(0.5 * log_var) * eps;
}

torch::Tensor upsample_nearest(const torch::Tensor& x, std::int64_t factor) {
  return x.repeat_interleave(factor, 2).repeat_interleave(factor, 3);
}

void init_weights(torch::nn::Module& module, at::Generator& gen, const std::string& scheme) {
  torch::NoGradGuard no_grad;
  const bool fan_in = scheme == "fan_in";
  if (!fan_in && scheme != "normal") throw ConfigError("unknown weight init scheme: " + scheme);
  // Leaky ReLU (slope 0.2) gain for convolutions, unit gain for linear heads.
  const double conv_gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
  auto fill = [&](torch::Tensor& w, double gain, double fan) {
    w.normal_(0.0, fan_in ? gain / std::sqrt(fan) : 0.02, gen);
  };
  for (const auto& m : module.modules()) {
    if (auto* c = m->as<torch::nn::Conv2d>()) {
      fill(c->weight, conv_gain, static_cast<double>(c->weight[0].numel()));
      if (c->bias.defined()) c->bias.zero_();
    } else if (auto* t = m->as<torch::nn::ConvTranspose2d>()) {
      // weight is in x out x k x k; each output sees in * k * k / stride^2 inputs.
      const auto& o = t->options;
      const double fan = static_cast<double>(t->weight.size(0) * t->weight[0][0].numel()) /
                         static_cast<double>(o.stride()->at(0) * o.stride()->at(1));
      fill(t->weight, conv_gain, fan);
      if (t->bias.defined()) t->bias.zero_();
    } else if (auto* l = m->as<torch::nn::Linear>()) {
      fill(l->weight, 1.0, static_cast<double>(l->weight.size(1)));
      if (l->bias.defined()) l->bias.zero_();
    }
  }
}

// --------------------------------------------------------------------------

DownResBlockImpl::DownResBlockImpl(std::int64_t in, std::int64_t out) {
  conv1 = register_module("conv1", conv(in, in, 3, 1, 1));
  conv2 = register_module("conv2", conv(in, out, 3, 1, 1));
  shortcut = register_module("shortcut", conv(in, out, 1, 1, 0));
}

torch::Tensor DownResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv2(lrelu(conv1(lrelu(x))));
  return torch::avg_pool2d(h, 2) + shortcut(torch::avg_pool2d(x, 2));
}

BasicResBlockImpl::BasicResBlockImpl(std::int64_t channels) {
  conv1 = register_module("conv1", conv(channels, channels, 3, 1, 1));
  conv2 = register_module("conv2", conv(channels, channels, 3, 1, 1));
}

torch::Tensor BasicResBlockImpl::forward(const torch::Tensor& x) {
  return x + inorm(conv2(torch::relu(inorm(conv1(x)))));
}

UpBlockImpl::UpBlockImpl(std::int64_t in, std::int64_t out) {
  deconv = register_module(
      "deconv", torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1)));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x) {
  auto h = deconv(x);
  h = torch::avg_pool2d(h, 3, 1, 1, /*ceil_mode=*/false, /*count_include_pad=*/false);
  h = torch::layer_norm(h, h.sizes().slice(1));
  return torch::relu(h);
}

// --------------------------------------------------------------------------

AttributeEncoderImpl::AttributeEncoderImpl(const ModelConfig& c) {
  const auto& w = c.attr_encoder_widths;
  stem = register_module("stem", conv(1, w[0], 3, 1, 1));
  blocks = register_module("blocks", torch::nn::ModuleList());
  std::int64_t in = w[0];
  for (auto out : w) {
    blocks->push_back(DownResBlock(in, out));
    in = out;
  }
  to_mean = register_module("to_mean", conv(in, c.attr_channels, 1, 1, 0));
  to_log_var = register_module("to_log_var", conv(in, c.attr_channels, 1, 1, 0));
}

torch::Tensor AttributeEncoderImpl::features(const torch::Tensor& x) {
  auto h = stem(x);
  for (const auto& block : *blocks) h = block->as<DownResBlock>()->forward(h);
  return lrelu(h);
}

std::pair<torch::Tensor, torch::Tensor> AttributeEncoderImpl::latent_from_features(const torch::Tensor& f) {
  return {to_mean(f), to_log_var(f)};
}

std::pair<torch::Tensor, torch::Tensor> AttributeEncoderImpl::forward(const torch::Tensor& x) {
  return latent_from_features(features(x));
}

PredictionHeadsImpl::PredictionHeadsImpl(std::int64_t attr_numel) {
  classifier = register_module("classifier", torch::nn::Linear(attr_numel, 1));
  regressor = register_module("regressor", torch::nn::Linear(attr_numel, 1));
}

Prediction PredictionHeadsImpl::forward(const torch::Tensor& attr_sample) {
  auto flat = attr_sample.flatten(1);
  return {classifier(flat).squeeze(1), regressor(flat).squeeze(1)};
}

torch::Tensor PredictionHeadsImpl::class_logit(const torch::Tensor& attr_sample) {
  return classifier(attr_sample.flatten(1)).squeeze(1);
}

ContentEncoderImpl::ContentEncoderImpl(const ModelConfig& c) {
  const auto& w = c.content_encoder_widths;
  stem = register_module("stem", conv(1, w[0], 7, 1, 3));
  down1 = register_module("down1", conv(w[0], w[1], 4, 2, 1));
  down2 = register_module("down2", conv(w[1], c.content_channels, 4, 2, 1));
  res = register_module("res", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < c.content_res_blocks; ++i) res->push_back(BasicResBlock(c.content_channels));
}

torch::Tensor ContentEncoderImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(inorm(stem(x)));
  h = torch::relu(inorm(down1(h)));
  h = torch::relu(inorm(down2(h)));
  for (const auto& block : *res) h = block->as<BasicResBlock>()->forward(h);
  return h;
}

GeneratorImpl::GeneratorImpl(const ModelConfig& c) : upsample_factor(c.content_height() / c.attr_height()) {
  const std::int64_t joint = c.content_channels + c.attr_channels;
  res = register_module("res", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < c.generator_res_blocks; ++i) res->push_back(BasicResBlock(joint));
  up = register_module("up", torch::nn::ModuleList());
  std::int64_t in = joint;
  for (auto out : c.generator_widths) {
    up->push_back(UpBlock(in, out));
    in = out;
  }
  to_image = register_module("to_image", conv(in, 1, 3, 1, 1));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& content, const torch::Tensor& attr) {
  auto h = torch::cat({content, upsample_nearest(attr, upsample_factor)}, 1);
  for (const auto& block : *res) h = block->as<BasicResBlock>()->forward(h);
  for (const auto& block : *up) h = block->as<UpBlock>()->forward(h);
  return torch::sigmoid(to_image(h));
}

DomainDiscriminatorImpl::DomainDiscriminatorImpl(const ModelConfig& c) {
  convs = register_module("convs", torch::nn::ModuleList());
  std::int64_t in = 1;
  for (auto out : c.domain_disc_widths) {
    convs->push_back(conv(in, out, 3, 2, 1));
    in = out;
  }
  realness = register_module("realness", conv(in, 1, 1, 1, 0));
  classes = register_module("classes", conv(in, 1, 1, 1, 0));
}

DomainJudgement DomainDiscriminatorImpl::forward(const torch::Tensor& x) {
  auto h = x;
  for (const auto& layer : *convs) h = lrelu(layer->as<torch::nn::Conv2d>()->forward(h));
  return {realness(h).mean({1, 2, 3}), classes(h).mean({1, 2, 3})};
}

ContentDiscriminatorImpl::ContentDiscriminatorImpl(const ModelConfig& c) {
  const std::int64_t w = c.content_disc_width;
  convs = register_module("convs", torch::nn::ModuleList());
  convs->push_back(conv(c.content_channels, w, 3, 2, 1));
  convs->push_back(conv(w, w, 3, 2, 1));
  convs->push_back(conv(w, w, 3, 2, 1));
  last = register_module("last", conv(w, w, 4, 1, 2));
  fc = register_module("fc", torch::nn::Linear(w, 1));
}

torch::Tensor ContentDiscriminatorImpl::forward(const torch::Tensor& content) {
  auto h = content;
  for (const auto& layer : *convs) h = lrelu(layer->as<torch::nn::Conv2d>()->forward(h));
  h = lrelu(last(h)).mean({2, 3});
  return fc(h).squeeze(1);
}

// --------------------------------------------------------------------------

std::string to_string(Component c) {
  switch (c) {
    case Component::attribute_encoder: return "attribute_encoder";
    case Component::heads: return "heads";
    case Component::content_encoder: return "content_encoder";
    case Component::generator: return "generator";
    case Component::domain_disc: return "domain_disc";
    case Component::content_disc: return "content_disc";
  }
  return "unknown";
}

namespace {
constexpr Component kAllComponents[] = {Component::attribute_encoder, Component::heads,
                                        Component::content_encoder,   Component::generator,
                                        Component::domain_disc,       Component::content_disc};
}

IcamModel::IcamModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  attribute_encoder = AttributeEncoder(config_);
  heads = PredictionHeads(config_.attr_numel());
  content_encoder = ContentEncoder(config_);
  generator = Generator(config_);
  domain_disc = DomainDiscriminator(config_);
  content_disc = ContentDiscriminator(config_);

  // Local generator so model construction never touches global RNG state.
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.seed);
  for (auto c : kAllComponents) init_weights(module(c), gen, config_.weight_init);
}

void IcamModel::check_images(const torch::Tensor& images, const char* op) const {
  if (images.dim() != 4 || images.size(1) != 1 || images.size(2) != config_.height ||
      images.size(3) != config_.width) {
    throw ContractError(std::string(op) + ": expected N x 1 x " + std::to_string(config_.height) + " x " +
                        std::to_string(config_.width) + " images");
  }
}

AttrLatent IcamModel::encode_attribute(const torch::Tensor& images, SamplingMode mode,
                                       std::optional<at::Generator> generator) {
  check_images(images, "encode_attribute");
  auto [mean, log_var] = attribute_encoder->forward(images);
  auto sample = mode == SamplingMode::stochastic ? reparameterize(mean, log_var, std::move(generator)) : mean;
  return {mean, log_var, sample};
}

ContentLatent IcamModel::encode_content(const torch::Tensor& images, bool training,
                                        std::optional<at::Generator> generator) {
  check_images(images, "encode_content");
  auto features = content_encoder->forward(images);
  if (training && config_.content_noise_sigma > 0.0) {
    features = features +
               config_.content_noise_sigma * torch::randn(features.sizes(), std::move(generator), features.options());
  }
  return {features};
}

Prediction IcamModel::predict(const AttrLatent& attr) { return predict_sample(attr.sample); }

Prediction IcamModel::predict_sample(const torch::Tensor& attr_sample) {
  if (attr_sample.dim() != 4 || attr_sample.size(1) != config_.attr_channels ||
      attr_sample.size(2) != config_.attr_height() || attr_sample.size(3) != config_.attr_width()) {
    throw ContractError("predict: attribute sample has the wrong shape");
  }
  return heads->forward(attr_sample);
}

torch::Tensor IcamModel::generate(const ContentLatent& content, const torch::Tensor& attr_sample) {
  const auto& f = content.features;
  if (f.dim() != 4 || f.size(1) != config_.content_channels || f.size(2) != config_.content_height() ||
      f.size(3) != config_.content_width()) {
    throw ContractError("generate: content latent has the wrong shape");
  }
  if (attr_sample.dim() != 4 || attr_sample.size(1) != config_.attr_channels ||
      attr_sample.size(2) != config_.attr_height() || attr_sample.size(3) != config_.attr_width()) {
    throw ContractError("generate: attribute latent has the wrong shape");
  }
  if (attr_sample.size(0) != f.size(0)) throw ContractError("generate: batch sizes differ");
  return generator->forward(f, attr_sample);
}

DomainJudgement IcamModel::discriminate_domain(const torch::Tensor& images) {
  check_images(images, "discriminate_domain");
  return domain_disc->forward(images);
}

torch::Tensor IcamModel::discriminate_content(const ContentLatent& content) {
  const auto& f = content.features;
  if (f.dim() != 4 || f.size(1) != config_.content_channels || f.size(2) != config_.content_height() ||
      f.size(3) != config_.content_width()) {
    throw ContractError("discriminate_content: content latent has the wrong shape");
  }
  return content_disc->forward(f);
}

torch::nn::Module& IcamModel::module(Component c) const {
  switch (c) {
    case Component::attribute_encoder: return *attribute_encoder.ptr();
    case Component::heads: return *heads.ptr();
    case Component::content_encoder: return *content_encoder.ptr();
    case Component::generator: return *generator.ptr();
    case Component::domain_disc: return *domain_disc.ptr();
    case Component::content_disc: return *content_disc.ptr();
  }
  throw ContractError("unknown component");
}

std::vector<torch::Tensor> IcamModel::parameters(Component c) const { return module(c).parameters(); }

std::vector<torch::Tensor> IcamModel::parameters(std::initializer_list<Component> cs) const {
  std::vector<torch::Tensor> out;
  for (auto c : cs) {
    auto p = parameters(c);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::int64_t IcamModel::parameter_count(Component c) const {
  std::int64_t n = 0;
  for (const auto& p : parameters(c)) n += p.numel();
  return n;
}

std::vector<std::pair<std::string, torch::Tensor>> IcamModel::named_parameters() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (auto c : kAllComponents) {
    for (const auto& p : module(c).named_parameters()) out.emplace_back(to_string(c) + "." + p.key(), p.value());
  }
  return out;
}

void IcamModel::to(torch::Dtype dtype) {
  for (auto c : kAllComponents) module(c).to(dtype);
}

torch::Dtype IcamModel::dtype() const {
  return attribute_encoder->stem->weight.scalar_type();
}

}  // namespace icam::nets
