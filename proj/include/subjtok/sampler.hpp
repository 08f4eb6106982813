#pragma once

#include <string>

#include "subjtok/backbone.hpp"
#include "subjtok/disentangle.hpp"
#include "subjtok/enrich.hpp"

namespace subjtok::sampler {

struct SamplerConfig {
  int64_t steps = 50;
  double guidance_scale = 5.0;
  uint64_t seed = 0;
  enrich::LambdaPolicy lambda;
  double eta = 0.0;
  /// Clamp the predicted clean latent to [-1, 1] at every step.
  bool clip_x0 = true;

  void validate() const;
};

/// ε̂ = ε_uncond + scale·(ε_cond − ε_uncond).
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

/// Text context plus optional branch tokens for one denoiser call.
struct Conditioning {
  Tensor context;                     // [1, ctx, d]
  attention::BranchTokens branches;   // λ = 0 and undefined tokens when unused
  bool use_branches = false;
};

/// Guided noise estimate; conditional and unconditional passes share one batch.
Tensor cfg_noise(const backbone::Backbone& bb, const Tensor& z_t, int64_t t, const Conditioning& cond,
                 const Conditioning& uncond, double scale);

/// Conditional and unconditional inputs for a plain prompt plus optional
/// enriched tokens. The unconditional side is the empty prompt with zeroed tokens.
std::pair<Conditioning, Conditioning> make_conditioning(const backbone::Backbone& bb, const std::string& prompt,
                                                        const enrich::EnrichedTokens* tokens,
                                                        const enrich::LambdaPolicy& lambda);

/// Deterministic DDIM loop from seeded Gaussian noise, decoded to an image.
ImageTensor sample(const backbone::Backbone& bb, const Conditioning& cond, const Conditioning& uncond,
                   const SamplerConfig& config);

/// Generation from a plain prompt only (no branches involved).
ImageTensor generate_text_only(const backbone::Backbone& bb, const std::string& prompt, const SamplerConfig& config);

/// Customized generation: tokenize the reference, enrich, then sample with the
/// decoupled branches. The prompt must not contain S*; subject identity
/// travels through the branches.
ImageTensor generate(const backbone::Backbone& bb, const disentangle::Stage1Model& stage1,
                     const enrich::Stage2Model& stage2, const ImageTensor& reference, const std::string& class_name,
                     const std::string& prompt, const SamplerConfig& config);

/// Same as generate with precomputed enriched tokens.
ImageTensor generate_with_tokens(const backbone::Backbone& bb, const enrich::EnrichedTokens& tokens,
                                 const std::string& prompt, const SamplerConfig& config);

}  // namespace subjtok::sampler
