#include <doctest.h>

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "icam/errors.hpp"
#include "icam/nets.hpp"

using namespace icam;
using namespace icam::nets;

namespace {

torch::Tensor images(std::int64_t n, const ModelConfig& c, std::uint64_t seed = 0) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({n, 1, c.height, c.width}, gen);
}

}  // namespace

TEST_SUITE("nets") {
  TEST_CASE("shape contracts at the default 64 x 64 size") {
    ModelConfig cfg;
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    const auto x = images(2, cfg);
    const auto a = m.encode_attribute(x, SamplingMode::deterministic);
    CHECK(a.mean.sizes() == torch::IntArrayRef({2, 16, 4, 4}));
    CHECK(a.log_var.sizes() == a.mean.sizes());
    const auto c = m.encode_content(x, false);
    CHECK(c.features.sizes() == torch::IntArrayRef({2, 64, 16, 16}));
    const auto g = m.generate(c, a);
    CHECK(g.sizes() == torch::IntArrayRef({2, 1, 64, 64}));
    const auto d = m.discriminate_domain(x);
    CHECK(d.realness_logit.sizes() == torch::IntArrayRef({2}));
    CHECK(d.class_logit.sizes() == torch::IntArrayRef({2}));
    CHECK(m.discriminate_content(c).sizes() == torch::IntArrayRef({2}));
    const auto p = m.predict(a);
    CHECK(p.class_logit.sizes() == torch::IntArrayRef({2}));
    CHECK(p.regression_value.sizes() == torch::IntArrayRef({2}));
  }

  TEST_CASE("shape contracts hold for other sizes divisible by 16") {
    for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{32, 48}, {16, 16}, {48, 32}}) {
      auto cfg = testing::tiny_model(h, w);
      IcamModel m(cfg);
      torch::NoGradGuard no_grad;
      const auto x = images(3, cfg);
      const auto a = m.encode_attribute(x, SamplingMode::stochastic);
      CHECK(a.sample.sizes() == torch::IntArrayRef({3, cfg.attr_channels, h / 16, w / 16}));
      const auto c = m.encode_content(x, true);
      CHECK(c.features.sizes() == torch::IntArrayRef({3, cfg.content_channels, h / 4, w / 4}));
      CHECK(m.generate(c, a).sizes() == x.sizes());
    }
  }

  TEST_CASE("wrong input shapes are contract errors") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    CHECK_THROWS_AS(m.encode_attribute(torch::rand({1, 1, 32, 16}), SamplingMode::deterministic), ContractError);
    CHECK_THROWS_AS(m.encode_content(torch::rand({1, 2, 16, 16}), false), ContractError);
    const auto c = m.encode_content(images(1, cfg), false);
    CHECK_THROWS_AS(m.generate(c, torch::zeros({1, cfg.attr_channels, 2, 2})), ContractError);
    ModelConfig bad = cfg;
    bad.height = 40;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("deterministic and stochastic attribute encoding") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    const auto x = images(2, cfg);
    const auto d1 = m.encode_attribute(x, SamplingMode::deterministic);
    const auto d2 = m.encode_attribute(x, SamplingMode::deterministic);
    CHECK(torch::equal(d1.sample, d2.sample));
    CHECK(torch::equal(d1.sample, d1.mean));
    const auto s1 = m.encode_attribute(x, SamplingMode::stochastic);
    const auto s2 = m.encode_attribute(x, SamplingMode::stochastic);
    CHECK_FALSE(torch::equal(s1.sample, s2.sample));
    CHECK(torch::equal(s1.mean, s2.mean));
  }

  TEST_CASE("content noise: zero-mean with the configured sigma") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    const auto x = images(1, cfg);
    const auto clean = m.encode_content(x, false).features;
    CHECK(torch::equal(clean, m.encode_content(x, false).features));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    const int draws = 1000;
    std::vector<torch::Tensor> outs;
    for (int i = 0; i < draws; ++i) outs.push_back(m.encode_content(x, true, gen).features.to(torch::kFloat64));
    const auto stacked = torch::stack(outs);
    const auto mean = stacked.mean(0);
    const auto sd = stacked.std(0, /*unbiased=*/true);
    const double sigma = cfg.content_noise_sigma;
    CHECK((mean - clean.to(torch::kFloat64)).abs().max().item<double>() < 5.0 * sigma / std::sqrt(draws));
    CHECK(((sd - sigma).abs() / sigma).max().item<double>() < 0.10);
  }

  TEST_CASE("reparameterised samples converge to the mean") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(9);
    const auto mean = torch::randn({1, 3, 2, 2}, gen, torch::kFloat64);
    const auto log_var = torch::randn({1, 3, 2, 2}, gen, torch::kFloat64);
    const int draws = 10000;
    const auto samples = reparameterize(mean.expand({draws, 3, 2, 2}), log_var.expand({draws, 3, 2, 2}), gen);
    const auto err = (samples.mean(0, true) - mean).abs();
    const auto bound = 3.0 * torch::exp(0.5 * log_var) / 100.0;
    CHECK((err <= bound).all().item<bool>());
  }

  TEST_CASE("zero heads return the bias") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    m.heads->classifier->weight.zero_();
    m.heads->classifier->bias.fill_(0.375);
    AttrLatent a;
    a.mean = a.log_var = a.sample = torch::zeros({2, cfg.attr_channels, 1, 1});
    const auto p = m.predict(a);
    CHECK(p.class_logit[0].item<double>() == 0.375);
    CHECK(p.class_logit[1].item<double>() == 0.375);
  }

  TEST_CASE("prediction depends on the sample only and batches like single items") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
    AttrLatent a;
    a.sample = torch::randn({5, cfg.attr_channels, 1, 1}, gen);
    a.mean = torch::randn_like(a.sample);
    a.log_var = torch::randn_like(a.sample);
    const auto batched = m.predict(a);
    AttrLatent other = a;
    other.mean = torch::zeros_like(a.mean);
    other.log_var = torch::zeros_like(a.log_var);
    CHECK(torch::equal(m.predict(other).class_logit, batched.class_logit));
    for (int i = 0; i < 5; ++i) {
      const auto single = m.predict_sample(a.sample.narrow(0, i, 1));
      CHECK(std::abs(single.class_logit.item<double>() - batched.class_logit[i].item<double>()) < 1e-6);
      CHECK(std::abs(single.regression_value.item<double>() - batched.regression_value[i].item<double>()) < 1e-6);
    }
  }

  TEST_CASE("nearest upsampling repeats each value in a block") {
    const auto g = torch::arange(16, torch::kFloat32).view({1, 1, 4, 4});
    const auto up = upsample_nearest(g, 4);
    REQUIRE(up.sizes() == torch::IntArrayRef({1, 1, 16, 16}));
    for (int r = 0; r < 16; ++r) {
      for (int c = 0; c < 16; ++c) CHECK(up[0][0][r][c].item<float>() == g[0][0][r / 4][c / 4].item<float>());
    }
  }

  TEST_CASE("generator output lies in [0, 1] for random inputs") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
    for (double scale : {1.0, 10.0, 100.0}) {
      const ContentLatent c{scale * torch::randn({4, cfg.content_channels, 4, 4}, gen)};
      const auto out = m.generate(c, scale * torch::randn({4, cfg.attr_channels, 1, 1}, gen));
      CHECK(out.min().item<float>() >= 0.0f);
      CHECK(out.max().item<float>() <= 1.0f);
    }
  }

  TEST_CASE("every forward pass is finite on inputs in [0, 1]") {
    ModelConfig cfg;
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    for (const auto& x : {images(2, cfg, 1), torch::zeros({2, 1, 64, 64}), torch::ones({2, 1, 64, 64})}) {
      const auto a = m.encode_attribute(x, SamplingMode::stochastic);
      const auto c = m.encode_content(x, true);
      const auto d = m.discriminate_domain(x);
      const auto p = m.predict(a);
      for (const auto& t : {a.mean, a.log_var, a.sample, c.features, m.generate(c, a), d.realness_logit,
                            d.class_logit, m.discriminate_content(c), p.class_logit, p.regression_value}) {
        CHECK(torch::isfinite(t).all().item<bool>());
      }
    }
  }

  TEST_CASE("constant images give identical domain judgements") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    torch::NoGradGuard no_grad;
    const auto a = m.discriminate_domain(torch::full({1, 1, 16, 16}, 0.3));
    const auto b = m.discriminate_domain(torch::full({1, 1, 16, 16}, 0.3).roll({3}, {3}));
    CHECK(torch::equal(a.realness_logit, b.realness_logit));
    CHECK(torch::equal(a.class_logit, b.class_logit));
  }

  TEST_CASE("discriminator gradients match central differences at float64") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    m.to(torch::kFloat64);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(6);
    for (int k = 0; k < 5; ++k) {
      const auto x = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);
      const double e = testing::directional_gradient_error(
          [&](const torch::Tensor& in) { return m.discriminate_domain(in).realness_logit.sum(); }, x, 3, 100 + k);
      CHECK(e < 1e-3);
      const auto z = torch::randn({1, cfg.content_channels, 4, 4}, gen, torch::kFloat64);
      const double ec = testing::directional_gradient_error(
          [&](const torch::Tensor& in) { return m.discriminate_content({in}).sum(); }, z, 3, 200 + k);
      CHECK(ec < 1e-3);
    }
    CHECK(torch::equal(m.discriminate_content({torch::ones({1, cfg.content_channels, 4, 4}, torch::kFloat64)}),
                       m.discriminate_content({torch::ones({1, cfg.content_channels, 4, 4}, torch::kFloat64)})));
  }

  TEST_CASE("parameter counts and named parameters agree") {
    auto cfg = testing::tiny_model();
    IcamModel m(cfg);
    std::int64_t total = 0;
    for (auto c : {Component::attribute_encoder, Component::heads, Component::content_encoder, Component::generator,
                   Component::domain_disc, Component::content_disc}) {
      const auto n = m.parameter_count(c);
      CHECK(n > 0);
      total += n;
    }
    std::int64_t named = 0;
    for (const auto& [name, t] : m.named_parameters()) named += t.numel();
    CHECK(named == total);
  }

  TEST_CASE("model config round-trips through JSON and rejects unknown keys") {
    auto cfg = testing::tiny_model(32, 48);
    cfg.content_noise_sigma = 0.123456789012345;
    cfg.weight_init = "normal";
    const nlohmann::json j = cfg;
    CHECK(j.get<ModelConfig>() == cfg);
    CHECK(nlohmann::json(j.get<ModelConfig>()).dump() == j.dump());
    auto bad = j;
    bad["depth"] = 3;
    CHECK_THROWS_AS(bad.get<ModelConfig>(), ConfigError);
  }

  TEST_CASE("weight init schemes") {
    auto cfg = testing::tiny_model();
    cfg.weight_init = "normal";
    IcamModel a(cfg), b(cfg);
    const auto pa = a.named_parameters(), pb = b.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(torch::equal(pa[i].second, pb[i].second));
      if (pa[i].first.ends_with("bias")) CHECK(pa[i].second.abs().max().item<double>() == 0.0);
    }
    const auto w = a.attribute_encoder->stem->weight;
    CHECK(std::abs(w.std().item<double>() - 0.02) < 0.01);
    cfg.weight_init = "fan_in";
    IcamModel c(cfg);
    const auto wc = c.attribute_encoder->stem->weight;
    // Stem: 1 input channel, 3 x 3 kernel.
    CHECK(std::abs(wc.std().item<double>() - std::sqrt(2.0 / 1.04) / 3.0) < 0.2);
    cfg.weight_init = "xavier";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
