#pragma once

// Terms of the full min-max objective. Every function is pure and
// differentiable through libtorch autograd; reductions are means over batch
// and elements unless stated.

#include <map>
#include <string>

#include <nlohmann/json_fwd.hpp>
#include <torch/torch.h>

#include "icam/nets.hpp"

namespace icam::losses {

struct LossWeights {
  double content_adv = 1.0;        // lambda_{D^c}
  double domain_adv = 1.0;         // lambda_D
  double domain_bce_disc = 1.0;    // lambda_{D_BCE}, discriminator optimisation
  double domain_bce_gen = 5.0;     // lambda_{D_BCE}, generator optimisation
  double prediction = 10.0;        // lambda_BCE, multiplies BCE + smooth-L1 jointly
  double kl = 0.01;                // lambda_KL
  double fa_map = 10.0;            // lambda_M
  double latent_cycle = 1.0;       // lambda_{z^a}
  double reconstruction = 100.0;   // lambda_rec, multiplies rec + cc (L1 and L2)

  void validate() const;
  static LossWeights zeros();
  bool operator==(const LossWeights&) const = default;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

enum class Side { discriminator, encoder };
enum class Role { generator_side, discriminator_side, content_discriminator_side };

// Term names used in LossReport and in the weighted totals.
namespace term {
inline constexpr const char* content_adv_encoder = "content_adv_enc";
inline constexpr const char* content_adv_disc = "content_adv_disc";
inline constexpr const char* domain_adv_gen = "domain_adv_gen";
inline constexpr const char* domain_bce_gen = "domain_bce_gen";
inline constexpr const char* domain_adv_disc = "domain_adv_disc";
inline constexpr const char* domain_bce_disc = "domain_bce_disc";
inline constexpr const char* prediction_bce = "pred_bce";
inline constexpr const char* prediction_smooth_l1 = "pred_smooth_l1";
inline constexpr const char* kl = "kl";
inline constexpr const char* fa_map = "fa_map";
inline constexpr const char* latent_cycle = "latent_cycle";
inline constexpr const char* reconstruction = "rec";
inline constexpr const char* cycle_consistency = "cc";
}  // namespace term

/// Mean binary cross-entropy of logits against a target tensor (same shape).
torch::Tensor bce_with_logits(const torch::Tensor& logits, const torch::Tensor& targets);

/// Smooth-L1 with threshold 1: 0.5 d^2 for |d| < 1 else |d| - 0.5, mean-reduced.
torch::Tensor smooth_l1(const torch::Tensor& prediction, const torch::Tensor& target);

/// Discriminator side: BCE against the true domains (x -> 0, y -> 1).
/// Encoder side: cross-entropy against the uniform target 0.5 for both.
torch::Tensor content_adversarial_loss(const torch::Tensor& dc_logits_x, const torch::Tensor& dc_logits_y,
                                       Side side);

/// -0.5 * sum(1 + log_var - mean^2 - exp(log_var)) / batch.
torch::Tensor kl_loss(const torch::Tensor& mean, const torch::Tensor& log_var);
inline torch::Tensor kl_loss(const nets::AttrLatent& attr) { return kl_loss(attr.mean, attr.log_var); }

/// Mean |recovered - z_a_r|.
torch::Tensor latent_cycle_loss(const torch::Tensor& z_a_r, const torch::Tensor& recovered);

/// Mean |M|.
torch::Tensor fa_map_loss(const torch::Tensor& fa_map);

/// mean|x_hat - x| + mean (x_hat - x)^2, summed over both domains.
torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& y,
                                  const torch::Tensor& y_hat);
torch::Tensor cycle_consistency_loss(const torch::Tensor& x, const torch::Tensor& x_cc, const torch::Tensor& y,
                                     const torch::Tensor& y_cc);

struct PredictionLoss {
  torch::Tensor bce;
  torch::Tensor smooth_l1;  // zero scalar when regression is disabled
  torch::Tensor total() const { return bce + smooth_l1; }
};

PredictionLoss prediction_loss(const nets::Prediction& prediction, const torch::Tensor& class_labels,
                               const torch::Tensor& phenotypes, bool regression_enabled);

struct DomainLosses {
  torch::Tensor adv;
  torch::Tensor class_bce;
};

/// Non-saturating GAN form.
/// Discriminator side: adv = BCE(real -> 1) + BCE(fake -> 0); class_bce on
/// the real images against `real_labels`.
/// Generator side: adv = BCE(fake -> 1); class_bce on the translated images
/// against `fake_target_labels`. Real judgements are ignored.
DomainLosses domain_adversarial_losses(const nets::DomainJudgement& real, const torch::Tensor& real_labels,
                                       const nets::DomainJudgement& fake,
                                       const torch::Tensor& fake_target_labels, Side side);

/// Weighted sum of the named terms belonging to `role`. Missing terms count
/// as zero. Works for tensors (backprop) and doubles (reporting).
template <class T>
T weighted_total(const std::map<std::string, T>& terms, const LossWeights& w, Role role);

/// Scalar loss values keyed by term name plus the weighted totals.
struct LossReport {
  std::map<std::string, double> terms;
  double total = 0.0;                        // generator-side objective
  double discriminator_total = 0.0;          // domain discriminator objective
  double content_discriminator_total = 0.0;  // content discriminator objective (mean of its updates)
  std::map<std::string, double> diagnostics; // non-loss counters (rejection attempts, ...)

  bool all_finite() const;
};

double total_objective(const std::map<std::string, double>& terms, const LossWeights& w, Role role);

}  // namespace icam::losses
