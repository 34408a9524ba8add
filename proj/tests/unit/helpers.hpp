#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <torch/torch.h>

#include "icam/dataset.hpp"
#include "icam/nets.hpp"
#include "icam/synthdata.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "icam_test") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Narrow network for fast tests; 16 x 16 unless given.
inline icam::nets::ModelConfig tiny_model(std::int64_t h = 16, std::int64_t w = 16) {
  icam::nets::ModelConfig c;
  c.height = h;
  c.width = w;
  c.attr_channels = 3;
  c.content_channels = 4;
  c.attr_encoder_widths = {4, 4, 6, 6};
  c.content_encoder_widths = {4, 4};
  c.content_res_blocks = 1;
  c.generator_res_blocks = 1;
  c.generator_widths = {4, 4};
  c.domain_disc_widths = {4, 6};
  c.content_disc_width = 6;
  c.seed = 11;
  return c;
}

/// Phantom settings that fit a 32 x 32 image.
inline icam::synth::DatasetConfig small_dataset(std::int64_t n, std::int64_t size = 32) {
  icam::synth::DatasetConfig d;
  d.n_samples = n;
  d.phantom.height = size;
  d.phantom.width = size;
  d.phantom.band_thickness_young = 3.0;
  d.phantom.band_thickness_old = 1.0;
  // Lesion placement needs room; very small phantoms go without.
  if (size < 32) d.lesion_probability = 0.0;
  return d;
}

/// In-memory split of `n` generated samples.
inline icam::TensorDataset toy_split(std::int64_t n, std::int64_t size = 32, std::uint64_t seed = 5) {
  const auto cfg = small_dataset(n, size);
  std::vector<icam::synth::PhenotypeSample> samples;
  for (std::int64_t i = 0; i < n; ++i) samples.push_back(icam::synth::generate_sample(cfg, seed, i));
  return icam::from_samples(samples);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

/// Worst relative error between autograd directional derivatives of the
/// scalar `f` at `x` and central differences with step h, over `dirs`
/// random unit directions. `x` must be float64.
inline double directional_gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                         const torch::Tensor& x, int dirs, std::uint64_t seed, double h = 1e-4) {
  auto gen = at::detail::createCPUGenerator(seed);
  auto xg = x.detach().clone().requires_grad_(true);
  const auto grad = torch::autograd::grad({f(xg)}, {xg})[0];
  double worst = 0.0;
  torch::NoGradGuard no_grad;
  for (int k = 0; k < dirs; ++k) {
    auto d = torch::randn(x.sizes(), gen, x.options());
    d /= d.norm();
    const double analytic = (grad * d).sum().item<double>();
    const double numeric = (f(x + h * d).item<double>() - f(x - h * d).item<double>()) / (2.0 * h);
    worst = std::max(worst, rel_err(analytic, numeric));
  }
  return worst;
}

}  // namespace testing
