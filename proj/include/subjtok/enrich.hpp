#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "subjtok/backbone.hpp"
#include "subjtok/config.hpp"
#include "subjtok/disentangle.hpp"

namespace subjtok::enrich {

/// Enriched token rows routed through the decoupled attention branches.
/// Unbatched tensors are [n', d]; batched ones carry a leading B.
struct EnrichedTokens {
  Tensor subject;
  Tensor irrelevant;  // undefined for the global-feature baseline
};

/// Branch weights at inference. Training fixes both at 1.
struct LambdaPolicy {
  double subject = 1.0;
  double irrelevant = 0.0;

  static LambdaPolicy training() { return {1.0, 1.0}; }
  /// Throws ConfigError on negative or non-finite weights.
  void validate() const;
};

/// Two-layer perceptron from `in_rows` token rows of width `in_dim` to
/// `out_rows` rows of width `out_dim`.
class ProjectorImpl : public torch::nn::Module {
 public:
  ProjectorImpl(int64_t in_rows, int64_t in_dim, int64_t out_rows, int64_t out_dim, int64_t hidden_mult, bool bias);
  /// x: [B, in_rows, in_dim] -> [B, out_rows, out_dim].
  Tensor forward(const Tensor& x);

  int64_t in_rows() const { return in_rows_; }
  int64_t in_dim() const { return in_dim_; }
  int64_t out_rows() const { return out_rows_; }

 private:
  int64_t in_rows_, in_dim_, out_rows_, out_dim_;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Projector);

/// Separate subject and irrelevant projectors; no parameters are shared.
class EnrichmentImpl : public torch::nn::Module {
 public:
  EnrichmentImpl(const ModelConfig& model, const Stage2Config& config, int64_t n_subject, int64_t n_irrelevant);
  /// Batched: subject [B, n_s, d], irrelevant [B, n_i, d] (may be undefined
  /// for the global baseline).
  EnrichedTokens forward(const Tensor& subject, const Tensor& irrelevant);

  bool global_baseline() const { return global_; }

  Projector subject{nullptr};
  Projector irrelevant{nullptr};

 private:
  bool global_ = false;
};
TORCH_MODULE(Enrichment);

/// Unbatched enrichment of one image's tokens. Row-count mismatches raise ShapeError.
EnrichedTokens enrich(const Enrichment& enrichment, const disentangle::DisentangledTokens& tokens);

/// Adds subject/irrelevant key/value maps to every cross-attention block.
/// Already-installed denoisers are left untouched (a warning is logged).
int install_decoupled_branches(backbone::Denoiser& denoiser);

/// Names and values of all branch key/value weights.
std::map<std::string, Tensor> branch_weights(const backbone::Denoiser& denoiser);

/// Checksum over every backbone parameter except the branch maps.
std::string frozen_checksum_stage2(const backbone::Backbone& bb);

struct Stage2Model {
  Stage2Config config;
  Enrichment enrichment{nullptr};
  std::map<std::string, Tensor> branches;
  std::string mode = "two_stage";
  /// Jointly trained tokenizer (single-stage ablation only).
  std::optional<disentangle::Stage1Model> joint_stage1;

  static Stage2Model create(const backbone::Backbone& bb, const Stage2Config& config, int64_t n_subject,
                            int64_t n_irrelevant);
  static Stage2Model load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const backbone::Backbone& bb, const nlohmann::json& extra = {}) const;
  /// Installs the branches in the backbone's denoiser and loads the trained weights.
  void apply(backbone::Backbone& bb) const;
  void freeze();
};

/// Subject rows for the generator: enriched disentangled tokens or, for the
/// global baseline, the projected pooled image embedding.
EnrichedTokens condition(const backbone::Backbone& bb, const disentangle::Stage1Model& stage1, const Stage2Model& stage2,
                         const ImageTensor& image, const std::string& class_name);

struct Stage2Result {
  Stage2Model model;
  std::vector<double> losses;
  std::string frozen_checksum_before;
  std::string frozen_checksum_after;
  std::string stage1_checksum_before;
  std::string stage1_checksum_after;
};

/// Trains the projectors and branch maps with λ_s = λ_i = 1; the backbone
/// (with its original to_k/to_v) and the stage-1 model stay frozen. The text
/// branch sees the template with the class name in place of S*.
Stage2Result train_stage2(backbone::Backbone& bb, const disentangle::Stage1Model& stage1, data::PairSource& source,
                          const Stage2Config& config, const disentangle::TrainOptions& options = {});

/// Trains tokenizer, projectors and branches jointly from scratch with the
/// stage-2 objective. The result carries its own tokenizer.
Stage2Result single_stage_ablation_train(backbone::Backbone& bb, data::PairSource& source, const Stage1Config& stage1,
                                         const Stage2Config& config, const disentangle::TrainOptions& options = {});

}  // namespace subjtok::enrich
