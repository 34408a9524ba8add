#include "icam/optim.hpp"

#include <cmath>

#include "icam/errors.hpp"

namespace icam::optim {

Adam::Adam(std::vector<torch::Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  for (const auto& p : params_) {
    m_.push_back(torch::zeros_like(p));
    v_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
}

void Adam::step() {
  torch::NoGradGuard no_grad;
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  const double step_size = lr_ / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.grad().defined()) continue;
    const auto& g = p.grad();
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i].sqrt() / sqrt_bc2).add_(eps_);
    p.addcdiv_(m_[i], denom, -step_size);
  }
}

std::vector<NamedState> Adam::state() const {
  std::vector<NamedState> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"m." + std::to_string(i), m_[i]});
    out.push_back({"v." + std::to_string(i), v_[i]});
  }
  return out;
}

void Adam::load_state(const std::vector<NamedState>& state, std::int64_t steps) {
  if (state.size() != 2 * params_.size()) throw IoError("optimizer state does not match parameter count");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& m = state[2 * i].value;
    const auto& v = state[2 * i + 1].value;
    if (m.sizes() != m_[i].sizes() || v.sizes() != v_[i].sizes()) {
      throw IoError("optimizer state tensor shape mismatch at index " + std::to_string(i));
    }
    m_[i].copy_(m);
    v_[i].copy_(v);
  }
  steps_ = steps;
}

SgdMomentum::SgdMomentum(std::vector<torch::Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  for (const auto& p : params_) velocity_.push_back(torch::zeros_like(p));
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
}

void SgdMomentum::step() {
  torch::NoGradGuard no_grad;
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.grad().defined()) continue;
    velocity_[i].mul_(momentum_).add_(p.grad());
    p.add_(velocity_[i], -lr_);
  }
}

}  // namespace icam::optim
