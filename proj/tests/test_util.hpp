#pragma once


#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "subjtok/backbone.hpp"

namespace subjtok::testing {

/// Small, fast model used by unit tests: 32 px images, 8×8 feature grid.
inline ModelConfig tiny_model() {
  ModelConfig m;
  m.image_size = 32;
  m.patch_size = 4;
  m.feature_dim = 32;
  m.text_dim = 32;
  m.joint_dim = 32;
  m.text_layers = 1;
  m.unet_channels = {16, 32};
  m.attn_dim = 16;
  m.schedule_steps = 100;
  return m;
}

/// The denoiser's zero-initialized output layer is filled with seeded noise so
/// untrained predictions are not identically zero.
inline std::shared_ptr<backbone::Backbone> tiny_backbone(uint64_t seed = 1) {
  auto bb = backbone::Backbone::create(tiny_model(), seed);
  {
    torch::NoGradGuard no_grad;
    auto gen = at::detail::createCPUGenerator(seed);
    for (auto& p : bb->denoiser->named_parameters()) {
      if (p.key().rfind("conv_out.", 0) == 0) p.value().copy_(at::normal(0.0, 0.05, p.value().sizes(), gen));
    }
  }
  bb->freeze();
  return bb;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("subjtok_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

/// Relative error ‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)
/// for the scalar f(inputs), all gradients stacked. Central differences with
/// step h in double precision.
inline double gradient_relative_error(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                      std::vector<Tensor> inputs, double h = 1e-6) {
  for (auto& x : inputs) x = x.detach().to(torch::kFloat64).clone().set_requires_grad(true);
  auto y = f(inputs);
  auto grads = torch::autograd::grad({y}, inputs, {}, false, false, true);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto flat = inputs[i].view({-1});
    auto analytic = grads[i].defined() ? grads[i].reshape({-1}) : torch::zeros_like(flat);
    for (int64_t k = 0; k < flat.numel(); ++k) {
      const double orig = flat[k].item<double>();
      flat[k] = orig + h;
      const double up = f(inputs).item<double>();
      flat[k] = orig - h;
      const double down = f(inputs).item<double>();
      flat[k] = orig;
      const double num = (up - down) / (2.0 * h);
      const double an = analytic[k].item<double>();
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
  }
  const double scale = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
  return std::sqrt(diff2) / scale;
}

}  // namespace subjtok::testing
