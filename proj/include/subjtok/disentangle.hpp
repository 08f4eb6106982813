#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "subjtok/backbone.hpp"
#include "subjtok/config.hpp"
#include "subjtok/data.hpp"

namespace subjtok::disentangle {

/// Tokenizer queries: n_subject learnable rows followed by n_irrelevant rows
/// projected from the class-name embedding (all irrelevant rows share the
/// projection and are therefore identical).
struct QuerySet {
  Tensor queries;  // [n_s + n_i, d_q]
  int64_t n_subject = 1;
  int64_t n_irrelevant = 1;

  Tensor subject() const { return queries.slice(0, 0, n_subject); }
  Tensor irrelevant() const { return queries.slice(0, n_subject); }
};

/// Tokenizer output for one image. Subject tokens come first.
struct DisentangledTokens {
  Tensor tokens;      // [n, d]      injected into the prompt
  Tensor aggregated;  // [n, d_k]    spatial-wise aggregates in feature space
  Tensor assignment;  // [L, n]      per-location share of each token
  int64_t n_subject = 1;

  int64_t rows() const { return tokens.size(0); }
  Tensor subject() const { return tokens.slice(0, 0, n_subject); }
  Tensor irrelevant() const { return tokens.slice(0, n_subject); }
};

struct TokenizerOutput {
  Tensor tokens;      // [B, n, d]
  Tensor aggregated;  // [B, n, d_k]
  Tensor assignment;  // [B, L, n]
};

class RefineBlockImpl : public torch::nn::Module {
 public:
  explicit RefineBlockImpl(int64_t dim);
  Tensor forward(const Tensor& x);

 private:
  torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(RefineBlock);

/// Image tokenizer: spatial-wise attention of the queries over the local
/// image features, followed by transformer refinement of the resulting
/// tokens and a projection into the text-embedding space.
class TokenizerImpl : public torch::nn::Module {
 public:
  TokenizerImpl(const ModelConfig& model, const Stage1Config& config);

  /// class_embeddings: [B, joint] -> queries [B, n, d_q].
  Tensor queries_for(const Tensor& class_embeddings);
  /// queries: [B, n, d_q], features: [B, L, d_k].
  TokenizerOutput forward(const Tensor& queries, const Tensor& features);

  int64_t n_subject() const { return n_subject_; }
  int64_t n_irrelevant() const { return n_irrelevant_; }

  Tensor subject_queries;
  torch::nn::Linear class_prior{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr};
  torch::nn::ModuleList refine;
  torch::nn::LayerNorm out_norm{nullptr};
  torch::nn::Linear out{nullptr};

 private:
  int64_t n_subject_;
  int64_t n_irrelevant_;
};
TORCH_MODULE(Tokenizer);

/// A trained (or freshly initialized) stage-1 model.
struct Stage1Model {
  Stage1Config config;
  Tokenizer tokenizer{nullptr};
  /// Tuned denoiser key/value weights by block name ("down0.attn.to_k.weight", ...).
  std::map<std::string, Tensor> tuned_kv;
  std::string mode = "two_stage";

  static Stage1Model create(const backbone::Backbone& bb, const Stage1Config& config);
  static Stage1Model load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const backbone::Backbone& bb, const nlohmann::json& extra = {}) const;
  void freeze();
};

// ---------------------------------------------------------------------------
// Operations

/// Subject rows from the learned queries; irrelevant rows from the pooled
/// class-name embedding. Unknown class names raise VocabularyError.
QuerySet init_queries(const backbone::Backbone& bb, const Stage1Model& model, const std::string& class_name);

/// Disentangled tokens for one (unaugmented) image.
DisentangledTokens tokenize(const backbone::Backbone& bb, const Stage1Model& model, const ImageTensor& image,
                            const QuerySet& queries);

/// Min-max normalized ⟨token_k, feature_ℓ⟩ maps, [n, L]. A map with no
/// spread is returned as zeros.
Tensor dot_product_maps(const Tensor& tokens, const Tensor& features);

/// Per-token heatmaps on the feature grid, [n, g, g].
Tensor attention_maps(const backbone::Backbone& bb, const ImageTensor& image, const DisentangledTokens& tokens);

/// Writes one PNG per token map (upsampled to the image size) plus the image.
std::vector<std::filesystem::path> write_attention_maps(const std::filesystem::path& dir, const ImageTensor& image,
                                                        const Tensor& maps, int64_t n_subject);

enum class InjectionMode { both, subject_only };

struct InjectedPrompt {
  Tensor embeddings;  // [n_y − 1 + rows, d], word embeddings before positions
  int64_t eos_index = 0;
};

/// Replaces the single S* word embedding with token rows. Prompts with zero
/// or several placeholders raise PromptError.
InjectedPrompt inject_tokens(const backbone::Backbone& bb, std::string_view prompt, const Tensor& token_rows);
InjectedPrompt inject_tokens(const backbone::Backbone& bb, std::string_view prompt, const DisentangledTokens& tokens,
                             InjectionMode mode);
/// Word embeddings of a prompt without a placeholder.
InjectedPrompt plain_prompt(const backbone::Backbone& bb, std::string_view prompt);
/// Runs the text encoder over a batch of prepared prompts.
backbone::TextOutput encode_injected(const backbone::Backbone& bb, const std::vector<InjectedPrompt>& prompts);

// ---------------------------------------------------------------------------
// Training

/// Conditioning input and denoising target for a stage-1 batch: the tokenizer
/// sees the augmented image while the loss reconstructs the original.
struct ReconstructionBatch {
  Tensor condition_images;
  Tensor target_latents;
};
ReconstructionBatch make_reconstruction_batch(const backbone::Backbone& bb, const Tensor& images,
                                              const data::AugmentConfig& augment, std::mt19937_64& rng);

struct TrainOptions {
  std::filesystem::path dump_dir = "nan_dumps";
  std::filesystem::path checkpoint_dir;  // empty: do not persist
  /// Stop after this wall-clock budget (seconds, 0 = unlimited).
  double time_budget = 0.0;
};

struct Stage1Result {
  Stage1Model model;
  std::vector<double> losses;
  std::string frozen_checksum_before;
  std::string frozen_checksum_after;
};

/// Checksum over every backbone parameter except the denoiser's base to_k/to_v.
std::string frozen_checksum_stage1(const backbone::Backbone& bb);

/// Optimizes tokenizer, subject queries, class-prior projection and the
/// denoiser's to_k/to_v. The backbone's own to_k/to_v are restored afterwards;
/// the tuned copies live in the returned model.
Stage1Result train_stage1(backbone::Backbone& bb, data::PairSource& source, const Stage1Config& config,
                          const TrainOptions& options = {});

/// Writes the offending batch and throws TrainingError.
[[noreturn]] void dump_nan_batch(const std::filesystem::path& dir, int64_t step, const Tensor& images,
                                 const std::vector<std::string>& prompts, double loss);

// ---------------------------------------------------------------------------
// Disentanglement scoring against ground-truth masks

struct MaskScore {
  std::vector<double> token_iou;  // per token
  double subject_iou = 0.0;       // mean over subject tokens
  double irrelevant_iou = 0.0;    // mean over irrelevant tokens
  double margin() const { return subject_iou - irrelevant_iou; }
};

/// Per-token maps in [0,1] ([n, g, g] or [n, L]) are thresholded at one half
/// and each region is compared with the mask pooled onto the feature grid.
MaskScore score_maps(const Tensor& maps, const Tensor& mask, int64_t n_subject);

/// Intersection over union of two boolean maps; 0 when both are empty.
double iou(const Tensor& a, const Tensor& b);

Tensor mask_to_grid(const Tensor& mask, int64_t grid);

}  // namespace subjtok::disentangle
