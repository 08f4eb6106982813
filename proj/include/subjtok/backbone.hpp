#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "subjtok/attention.hpp"
#include "subjtok/checkpoint.hpp"
#include "subjtok/config.hpp"
#include "subjtok/image.hpp"
#include "subjtok/vocab.hpp"

namespace subjtok::backbone {

// ---------------------------------------------------------------------------
// Noise schedule

/// Discrete diffusion schedule over steps 1..T. Index 0 of the cumulative
/// product is the clean signal (ᾱ_0 = 1).
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int64_t steps, double beta_start, double beta_end);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int64_t steps() const { return static_cast<int64_t>(betas_.size()); }
  /// ᾱ_t for t in [0, T].
  double alpha_bar(int64_t t) const;
  const std::vector<double>& betas() const { return betas_; }
  /// ᾱ as a float tensor of length T+1.
  Tensor alpha_bar_table() const;

  /// z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε for 1 <= t <= T.
  Tensor forward_noise(const Tensor& z0, int64_t t, const Tensor& noise) const;
  /// Per-sample steps, t: [B] int64.
  Tensor forward_noise(const Tensor& z0, const Tensor& t, const Tensor& noise) const;

  /// Deterministic DDIM update (η = 0) from step t to t_prev (t_prev may be 0).
  Tensor ddim_step(const Tensor& z_t, const Tensor& eps, int64_t t, int64_t t_prev) const;

  /// Evenly spaced descending steps for an n-step sampler, ending at 1.
  std::vector<int64_t> ddim_timesteps(int64_t n) const;

 private:
  explicit NoiseSchedule(std::vector<double> betas);
  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
};

// ---------------------------------------------------------------------------
// Frozen encoders

struct ImageFeatures {
  Tensor local;   // [B, L, d_k]
  Tensor global;  // [B, joint]
};

class ImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ImageEncoderImpl(const ModelConfig& config);
  /// images: [B, 3, H, W] in [0,1].
  ImageFeatures forward(const Tensor& images);

 private:
  ModelConfig config_;
  torch::nn::Conv2d patch{nullptr}, conv1{nullptr}, conv2{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(ImageEncoder);

/// Padded input embeddings plus the position of each end-of-text token.
struct TextBatch {
  Tensor embeddings;  // [B, context, d]
  Tensor eos_index;   // [B] int64
};

struct TextOutput {
  Tensor sequence;  // [B, context, d]
  Tensor pooled;    // [B, joint]
};

class TextEncoderImpl : public torch::nn::Module {
 public:
  TextEncoderImpl(const ModelConfig& config, int64_t vocab_size);

  /// Word embeddings (no positions) for a token id sequence: [n, d].
  Tensor embed(const std::vector<int64_t>& ids);
  /// Pads per-sample embedding sequences ([n_b, d] each) to the context
  /// length. eos positions are given by `eos_index`.
  TextBatch pad(const std::vector<Tensor>& sequences, const std::vector<int64_t>& eos_index);
  TextOutput forward(const TextBatch& batch);

  int64_t context_length() const { return config_.context_length; }

 private:
  struct Layer {
    torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
    torch::nn::Linear qkv{nullptr}, out{nullptr}, fc1{nullptr}, fc2{nullptr};
  };
  ModelConfig config_;
  torch::nn::Embedding token{nullptr};
  Tensor position;
  std::vector<Layer> layers_;
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(TextEncoder);

/// Lossless space-to-depth latent: image in [0,1] -> [B, 3f², H/f, W/f] in [-1,1].
class LatentAutoencoder {
 public:
  explicit LatentAutoencoder(int64_t factor) : factor_(factor) {}
  Tensor encode(const Tensor& images) const;
  Tensor decode(const Tensor& latents) const;
  int64_t factor() const { return factor_; }
  /// Mean absolute reconstruction error bound recorded in the manifest.
  static constexpr double kReconstructionTolerance = 1e-6;

 private:
  int64_t factor_;
};

// ---------------------------------------------------------------------------
// Denoiser

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in, int64_t out, int64_t time_dim);
  Tensor forward(const Tensor& x, const Tensor& temb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time{nullptr};
};
TORCH_MODULE(ResBlock);

/// U-shaped noise predictor with one cross-attention block per resolution on
/// the way down and up.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const ModelConfig& config);

  Tensor forward(const Tensor& z_t, const Tensor& t, const Tensor& context,
                 const attention::BranchTokens* branches = nullptr);

  /// Cross-attention blocks with their registered names ("down0.attn", ...).
  std::vector<std::pair<std::string, attention::CrossAttentionBlock>> attention_blocks() const;
  /// Installs decoupled branches in every block; returns how many were added.
  int install_branches();
  bool has_branches() const;

  /// Number of forward calls made while autograd was recording.
  int64_t grad_enabled_calls() const { return grad_enabled_calls_; }

 private:
  ModelConfig config_;
  int64_t time_dim_;
  torch::nn::Linear time1{nullptr}, time2{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::ModuleList down_res, down_attn, downsample, up_conv, up_res, up_attn;
  std::vector<std::string> down_names_, up_names_;
  int64_t grad_enabled_calls_ = 0;
};
TORCH_MODULE(Denoiser);

Tensor timestep_embedding(const Tensor& t, int64_t dim);

// ---------------------------------------------------------------------------

/// The frozen bundle every stage builds on.
struct Backbone {
  ModelConfig config;
  Vocabulary vocab = Vocabulary::toy();
  ImageEncoder image_encoder{nullptr};
  TextEncoder text_encoder{nullptr};
  Denoiser denoiser{nullptr};
  LatentAutoencoder autoencoder{4};
  NoiseSchedule schedule = NoiseSchedule::linear(1000, 1e-4, 0.02);

  static std::shared_ptr<Backbone> create(const ModelConfig& config, uint64_t seed);
  static std::shared_ptr<Backbone> load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;

  void freeze();
  /// Checksums of image encoder, text encoder and denoiser.
  std::map<std::string, std::string> checksums() const;

  /// Local features and pooled vector for one image. Throws ConfigError when
  /// the image size does not match the encoder.
  ImageFeatures encode_image(const ImageTensor& image) const;
  ImageFeatures encode_images(const Tensor& images) const;

  /// Token ids of a prompt; the prompt may contain S*.
  std::vector<int64_t> token_ids(std::string_view prompt) const;
  /// Encodes plain prompts (no S* substitution).
  TextOutput encode_prompts(const std::vector<std::string>& prompts) const;
  /// Pooled embedding of a class name; unknown names raise VocabularyError.
  Tensor class_embedding(const std::string& class_name) const;

  Tensor to_chw_batch(const std::vector<ImageTensor>& images) const;
};

// ---------------------------------------------------------------------------
// Toy backbone training

struct BackboneTrainReport {
  std::vector<double> encoder_loss;
  std::vector<double> denoiser_loss;
};

/// Trains the toy image/text encoders contrastively on captioned toy renders,
/// freezes them, then trains the text-conditioned denoiser.
std::shared_ptr<Backbone> train_toy_backbone(const ModelConfig& model, const BackboneTrainConfig& config,
                                             BackboneTrainReport* report = nullptr);

/// Epsilon-prediction objective ‖ε − ε̂‖².
Tensor diffusion_loss(const Tensor& eps_pred, const Tensor& eps);

}  // namespace subjtok::backbone
