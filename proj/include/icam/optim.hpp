#pragma once

// Minimal first-order optimisers whose complete state is a list of named
// tensors, so checkpoints restore them bit-exactly.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace icam::optim {

struct NamedState {
  std::string name;
  torch::Tensor value;
};

class Adam {
 public:
  Adam(std::vector<torch::Tensor> params, double lr, double beta1 = 0.5, double beta2 = 0.999,
       double eps = 1e-8);

  void zero_grad();
  void step();

  std::int64_t step_count() const { return steps_; }
  double learning_rate() const { return lr_; }

  /// "m.<i>", "v.<i>" moment tensors; the step count lives in the checkpoint header.
  std::vector<NamedState> state() const;
  void load_state(const std::vector<NamedState>& state, std::int64_t steps);

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t steps_ = 0;
};

class SgdMomentum {
 public:
  SgdMomentum(std::vector<torch::Tensor> params, double lr, double momentum);

  void zero_grad();
  void step();
  std::int64_t step_count() const { return steps_; }

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> velocity_;
  double lr_, momentum_;
  std::int64_t steps_ = 0;
};

}  // namespace icam::optim
