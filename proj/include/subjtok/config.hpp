#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "subjtok/data.hpp"

namespace subjtok {

/// Dimensions and schedule of the frozen backbone. The toy profile is the
/// default; the pretrained profile reads the same fields from a weight archive.
struct ModelConfig {
  std::string profile = "toy";
  std::string pretrained_weights;
  int64_t image_size = 64;
  int64_t patch_size = 4;
  int64_t feature_dim = 64;  // image features, d_k
  int64_t text_dim = 64;     // text embeddings, d
  int64_t joint_dim = 64;    // pooled image/text space
  int64_t text_layers = 2;
  int64_t text_heads = 1;
  int64_t context_length = 24;
  /// "final" or "penultimate" encoder layer feeds the tokenizer.
  std::string image_feature_layer = "final";
  int64_t latent_factor = 4;
  std::vector<int64_t> unet_channels = {64, 128};
  int64_t attn_dim = 64;
  int64_t attn_heads = 1;
  int64_t schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  int64_t latent_channels() const { return 3 * latent_factor * latent_factor; }
  int64_t latent_size() const { return image_size / latent_factor; }
  int64_t feature_grid() const { return image_size / patch_size; }
  void validate() const;
};

struct BackboneTrainConfig {
  int64_t encoder_steps = 600;
  int64_t encoder_batch = 48;
  double encoder_lr = 2e-3;
  /// Weight of the region term: mask-pooled subject and background features
  /// are contrasted with the subject description and the scene phrase.
  double region_weight = 1.0;
  int64_t denoiser_steps = 3000;
  int64_t denoiser_batch = 24;
  double denoiser_lr = 1e-3;
  double caption_drop = 0.1;
  uint64_t seed = 1;
  int64_t log_every = 100;
};

struct Stage1Config {
  int64_t n_subject = 1;
  int64_t n_irrelevant = 1;
  int64_t refine_blocks = 2;
  double query_sigma = 1.0;
  /// Initial class-prior projection: "negated" (−scale·I, the irrelevant
  /// query starts out avoiding features that resemble the class name),
  /// "identity" (+scale·I) or "random".
  std::string class_prior_init = "negated";
  double class_prior_scale = 1.0;
  int64_t resolution = 64;
  int64_t batch = 16;
  int64_t steps = 600;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double cond_drop = 0.05;
  uint64_t seed = 2;
  int64_t log_every = 100;
  data::AugmentConfig augment;

  /// Values used at full scale: 256 px, batch 160, lr 5e-7.
  static Stage1Config full_scale();
};

struct Stage2Config {
  int64_t n_enriched_subject = 4;
  int64_t n_enriched_irrelevant = 4;
  int64_t projector_hidden_mult = 4;
  bool projector_bias = true;
  /// "disentangled" (subject/irrelevant tokens) or "global" (pooled image
  /// embedding through the subject branch only; comparison baseline).
  std::string conditioning = "disentangled";
  int64_t resolution = 64;
  int64_t batch = 16;
  int64_t steps = 1500;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double cond_drop = 0.05;
  uint64_t seed = 3;
  int64_t log_every = 100;
  data::AugmentConfig augment;

  /// Values used at full scale: 512 px, batch 40, lr 1e-4.
  static Stage2Config full_scale();
};

/// Top-level run configuration read by the CLI.
struct RunConfig {
  ModelConfig model;
  BackboneTrainConfig backbone;
  Stage1Config stage1;
  Stage2Config stage2;
  std::string work_dir = "runs/toy";
  std::string backbone_checkpoint;  // defaults to <work_dir>/backbone
  std::string stage1_checkpoint;    // defaults to <work_dir>/stage1
  std::string stage2_checkpoint;    // defaults to <work_dir>/stage2

  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Hex SHA-256 over the canonical JSON dump.
  std::string hash() const;
};

std::string sha256_hex(const std::string& bytes);

}  // namespace subjtok

namespace subjtok::data {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, flip_prob, min_crop_scale, max_crop_scale,
                                                max_rotation_deg, brightness, contrast, enabled)
}  // namespace subjtok::data

namespace subjtok {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, profile, pretrained_weights, image_size, patch_size,
                                                feature_dim, text_dim, joint_dim, text_layers, text_heads,
                                                context_length, image_feature_layer, latent_factor, unet_channels,
                                                attn_dim, attn_heads, schedule_steps, beta_start, beta_end)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneTrainConfig, encoder_steps, encoder_batch, encoder_lr, region_weight,
                                                denoiser_steps, denoiser_batch, denoiser_lr, caption_drop, seed,
                                                log_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Stage1Config, n_subject, n_irrelevant, refine_blocks, query_sigma,
                                                class_prior_init, class_prior_scale,
                                                resolution, batch, steps, lr, weight_decay, cond_drop, seed,
                                                log_every, augment)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Stage2Config, n_enriched_subject, n_enriched_irrelevant,
                                                projector_hidden_mult, projector_bias, conditioning, resolution,
                                                batch, steps, lr, weight_decay, cond_drop, seed, log_every, augment)
}  // namespace subjtok
