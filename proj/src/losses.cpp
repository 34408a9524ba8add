#include "icam/losses.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "icam/errors.hpp"

namespace icam::losses {

void LossWeights::validate() const {
  for (double w : {content_adv, domain_adv, domain_bce_disc, domain_bce_gen, prediction, kl, fa_map,
                   latent_cycle, reconstruction}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

LossWeights LossWeights::zeros() { return {0, 0, 0, 0, 0, 0, 0, 0, 0}; }

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"content_adv", w.content_adv},   {"domain_adv", w.domain_adv},
                     {"domain_bce_disc", w.domain_bce_disc}, {"domain_bce_gen", w.domain_bce_gen},
                     {"prediction", w.prediction},     {"kl", w.kl},
                     {"fa_map", w.fa_map},             {"latent_cycle", w.latent_cycle},
                     {"reconstruction", w.reconstruction}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const nlohmann::json known = w;
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown loss weight: " + key);
  }
  auto get = [&](const char* key, double& field) {
    if (j.contains(key)) field = j.at(key).get<double>();
  };
  get("content_adv", w.content_adv);
  get("domain_adv", w.domain_adv);
  get("domain_bce_disc", w.domain_bce_disc);
  get("domain_bce_gen", w.domain_bce_gen);
  get("prediction", w.prediction);
  get("kl", w.kl);
  get("fa_map", w.fa_map);
  get("latent_cycle", w.latent_cycle);
  get("reconstruction", w.reconstruction);
}

torch::Tensor bce_with_logits(const torch::Tensor& logits, const torch::Tensor& targets) {
  // max(l,0) - l*t + log(1 + exp(-|l|)), the overflow-safe form.
  return (torch::clamp_min(logits, 0) - logits * targets + torch::log1p(torch::exp(-torch::abs(logits)))).mean();
}

torch::Tensor smooth_l1(const torch::Tensor& prediction, const torch::Tensor& target) {
  auto d = torch::abs(prediction - target);
  return torch::where(d < 1.0, 0.5 * d * d, d - 0.5).mean();
}

torch::Tensor content_adversarial_loss(const torch::Tensor& dc_logits_x, const torch::Tensor& dc_logits_y,
                                       Side side) {
  if (side == Side::discriminator) {
    return bce_with_logits(dc_logits_x, torch::zeros_like(dc_logits_x)) +
           bce_with_logits(dc_logits_y, torch::ones_like(dc_logits_y));
  }
  auto half_x = torch::full_like(dc_logits_x, 0.5);
  auto half_y = torch::full_like(dc_logits_y, 0.5);
  return 0.5 * (bce_with_logits(dc_logits_x, half_x) + bce_with_logits(dc_logits_y, half_y));
}

torch::Tensor kl_loss(const torch::Tensor& mean, const torch::Tensor& log_var) {
  const auto batch = static_cast<double>(std::max<std::int64_t>(mean.size(0), 1));
  return -0.5 * (1.0 + log_var - mean * mean - torch::exp(log_var)).sum() / batch;
}

torch::Tensor latent_cycle_loss(const torch::Tensor& z_a_r, const torch::Tensor& recovered) {
  if (z_a_r.sizes() != recovered.sizes()) throw ContractError("latent_cycle_loss: shapes differ");
  return torch::abs(recovered - z_a_r).mean();
}

torch::Tensor fa_map_loss(const torch::Tensor& fa_map) { return torch::abs(fa_map).mean(); }

namespace {
torch::Tensor l1_l2(const torch::Tensor& target, const torch::Tensor& estimate) {
  if (target.sizes() != estimate.sizes()) throw ContractError("image loss: shapes differ");
  auto d = estimate - target;
  return torch::abs(d).mean() + (d * d).mean();
}
}  // namespace

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& y,
                                  const torch::Tensor& y_hat) {
  return l1_l2(x, x_hat) + l1_l2(y, y_hat);
}

torch::Tensor cycle_consistency_loss(const torch::Tensor& x, const torch::Tensor& x_cc, const torch::Tensor& y,
                                     const torch::Tensor& y_cc) {
  return l1_l2(x, x_cc) + l1_l2(y, y_cc);
}

PredictionLoss prediction_loss(const nets::Prediction& prediction, const torch::Tensor& class_labels,
                               const torch::Tensor& phenotypes, bool regression_enabled) {
  PredictionLoss out;
  out.bce = bce_with_logits(prediction.class_logit, class_labels.to(prediction.class_logit.dtype()));
  out.smooth_l1 = regression_enabled
                      ? smooth_l1(prediction.regression_value, phenotypes.to(prediction.regression_value.dtype()))
                      : torch::zeros({}, prediction.class_logit.options());
  return out;
}

DomainLosses domain_adversarial_losses(const nets::DomainJudgement& real, const torch::Tensor& real_labels,
                                       const nets::DomainJudgement& fake,
                                       const torch::Tensor& fake_target_labels, Side side) {
  const auto& fr = fake.realness_logit;
  if (side == Side::discriminator) {
    const auto& rr = real.realness_logit;
    return {bce_with_logits(rr, torch::ones_like(rr)) + bce_with_logits(fr, torch::zeros_like(fr)),
            bce_with_logits(real.class_logit, real_labels.to(real.class_logit.dtype()))};
  }
  return {bce_with_logits(fr, torch::ones_like(fr)),
          bce_with_logits(fake.class_logit, fake_target_labels.to(fake.class_logit.dtype()))};
}

template <class T>
T weighted_total(const std::map<std::string, T>& terms, const LossWeights& w, Role role) {
  T total{};
  bool first = true;
  auto add = [&](const char* name, double weight) {
    auto it = terms.find(name);
    if (it == terms.end()) return;
    if (first) {
      total = weight * it->second;
      first = false;
    } else {
      total = total + weight * it->second;
    }
  };
  switch (role) {
    case Role::generator_side:
      add(term::content_adv_encoder, w.content_adv);
      add(term::domain_adv_gen, w.domain_adv);
      add(term::domain_bce_gen, w.domain_bce_gen);
      add(term::prediction_bce, w.prediction);
      add(term::prediction_smooth_l1, w.prediction);
      add(term::kl, w.kl);
      add(term::fa_map, w.fa_map);
      add(term::latent_cycle, w.latent_cycle);
      add(term::reconstruction, w.reconstruction);
      add(term::cycle_consistency, w.reconstruction);
      break;
    case Role::discriminator_side:
      add(term::domain_adv_disc, w.domain_adv);
      add(term::domain_bce_disc, w.domain_bce_disc);
      break;
    case Role::content_discriminator_side:
      add(term::content_adv_disc, w.content_adv);
      break;
  }
  if (first) {
    if constexpr (std::is_same_v<T, torch::Tensor>) return torch::zeros({});
    return T{};
  }
  return total;
}

template torch::Tensor weighted_total(const std::map<std::string, torch::Tensor>&, const LossWeights&, Role);
template double weighted_total(const std::map<std::string, double>&, const LossWeights&, Role);

double total_objective(const std::map<std::string, double>& terms, const LossWeights& w, Role role) {
  return weighted_total(terms, w, role);
}

bool LossReport::all_finite() const {
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) return false;
  }
  return std::isfinite(total) && std::isfinite(discriminator_total) && std::isfinite(content_discriminator_total);
}

}  // namespace icam::losses
