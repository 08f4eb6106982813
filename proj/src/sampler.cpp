#include "subjtok/sampler.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace subjtok::sampler {

using backbone::Backbone;

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (!std::isfinite(guidance_scale) || guidance_scale < 0.0) throw ConfigError("guidance scale must be >= 0");
  if (eta != 0.0) throw ConfigError("only deterministic sampling (eta = 0) is supported");
  lambda.validate();
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  if (scale == 1.0) return eps_cond;
  if (scale == 0.0) return eps_uncond;
  return eps_uncond + scale * (eps_cond - eps_uncond);
}

namespace {

Tensor cat_or_undefined(const Tensor& a, const Tensor& b) {
  if (!a.defined()) return a;
  return torch::cat({a, b}, 0);
}

}  // namespace

Tensor cfg_noise(const Backbone& bb, const Tensor& z_t, int64_t t, const Conditioning& cond,
                 const Conditioning& uncond, double scale) {
  auto denoiser = bb.denoiser.ptr();
  auto z = torch::cat({z_t, z_t}, 0);
  auto tt = torch::full({2 * z_t.size(0)}, t, torch::kInt64);
  auto ctx = torch::cat({cond.context, uncond.context}, 0);
  Tensor eps;
  if (cond.use_branches) {
    attention::BranchTokens br = cond.branches;
    br.subject = cat_or_undefined(cond.branches.subject, uncond.branches.subject);
    br.irrelevant = cat_or_undefined(cond.branches.irrelevant, uncond.branches.irrelevant);
    eps = denoiser->forward(z, tt, ctx, &br);
  } else {
    eps = denoiser->forward(z, tt, ctx);
  }
  auto parts = eps.chunk(2, 0);
  return cfg_combine(parts[0], parts[1], scale);
}

std::pair<Conditioning, Conditioning> make_conditioning(const Backbone& bb, const std::string& prompt,
                                                        const enrich::EnrichedTokens* tokens,
                                                        const enrich::LambdaPolicy& lambda) {
  lambda.validate();
  auto text = bb.encode_prompts({prompt, ""}).sequence;
  Conditioning cond;
  Conditioning uncond;
  cond.context = text.slice(0, 0, 1);
  uncond.context = text.slice(0, 1, 2);
  const bool any = lambda.subject != 0.0 || lambda.irrelevant != 0.0;
  if (tokens != nullptr && any) {
    cond.use_branches = uncond.use_branches = true;
    cond.branches.lambda_subject = uncond.branches.lambda_subject = lambda.subject;
    cond.branches.lambda_irrelevant = uncond.branches.lambda_irrelevant = lambda.irrelevant;
    if (lambda.subject != 0.0) {
      if (!tokens->subject.defined()) throw ConfigError("no subject tokens to condition on");
      cond.branches.subject = tokens->subject.unsqueeze(0);
      uncond.branches.subject = torch::zeros_like(cond.branches.subject);
    }
    if (lambda.irrelevant != 0.0) {
      if (!tokens->irrelevant.defined()) throw ConfigError("this model has no irrelevant branch");
      cond.branches.irrelevant = tokens->irrelevant.unsqueeze(0);
      uncond.branches.irrelevant = torch::zeros_like(cond.branches.irrelevant);
    }
  }
  return {cond, uncond};
}

ImageTensor sample(const Backbone& bb, const Conditioning& cond, const Conditioning& uncond,
                   const SamplerConfig& config) {
  config.validate();
  torch::NoGradGuard no_grad;
  const auto c = bb.config.latent_channels();
  const auto s = bb.config.latent_size();
  auto gen = at::detail::createCPUGenerator(config.seed);
  auto z = torch::randn({1, c, s, s}, gen, torch::kFloat32);
  const auto ts = bb.schedule.ddim_timesteps(config.steps);
  for (size_t i = 0; i < ts.size(); ++i) {
    const auto t = ts[i];
    const auto t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    auto eps = cfg_noise(bb, z, t, cond, uncond, config.guidance_scale);
    if (config.clip_x0) {
      const double ab = bb.schedule.alpha_bar(t);
      auto x0 = ((z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).clamp(-1.0, 1.0);
      eps = (z - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    }
    z = bb.schedule.ddim_step(z, eps, t, t_prev);
  }
  return ImageTensor::from_chw(bb.autoencoder.decode(z).squeeze(0));
}

ImageTensor generate_text_only(const Backbone& bb, const std::string& prompt, const SamplerConfig& config) {
  torch::NoGradGuard no_grad;
  auto [cond, uncond] = make_conditioning(bb, prompt, nullptr, config.lambda);
  return sample(bb, cond, uncond, config);
}

ImageTensor generate_with_tokens(const Backbone& bb, const enrich::EnrichedTokens& tokens, const std::string& prompt,
                                 const SamplerConfig& config) {
  if (data::count_placeholders(prompt) != 0) {
    throw PromptError("generation prompt must not contain S*; the subject is supplied by the reference image");
  }
  torch::NoGradGuard no_grad;
  auto [cond, uncond] = make_conditioning(bb, prompt, &tokens, config.lambda);
  return sample(bb, cond, uncond, config);
}

ImageTensor generate(const Backbone& bb, const disentangle::Stage1Model& stage1, const enrich::Stage2Model& stage2,
                     const ImageTensor& reference, const std::string& class_name, const std::string& prompt,
                     const SamplerConfig& config) {
  if (data::count_placeholders(prompt) != 0) {
    throw PromptError("generation prompt must not contain S*; the subject is supplied by the reference image");
  }
  config.validate();
  auto tokens = enrich::condition(bb, stage1, stage2, reference, class_name);
  return generate_with_tokens(bb, tokens, prompt, config);
}

}  // namespace subjtok::sampler
