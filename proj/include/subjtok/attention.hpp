#pragma once

#include "subjtok/common.hpp"

namespace subjtok::attention {

/// SoftMax(Q·Kᵀ/√d)·V over the trailing two dimensions.
/// q: [..., m, d], k: [..., n, d], v: [..., n, dv] -> [..., m, dv].
/// Backward is hand-derived rather than traced.
Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v);

struct SpatialAssignment {
  Tensor tokens;      // [..., n, dv]
  Tensor assignment;  // [..., L, n]; rows sum to one
};

/// Spatial-wise attention of the image tokenizer. Logits Kᵀ·Q/√d are
/// normalized across the token axis independently at every location, so each
/// location is shared out between the queries. Each token then aggregates the
/// values with its assignment column renormalized over locations.
/// queries: [..., n, d], keys: [..., L, d], values: [..., L, dv].
SpatialAssignment spatial_wise_attention(const Tensor& queries, const Tensor& keys, const Tensor& values);

inline constexpr double kAssignmentEps = 1e-8;

/// Three-branch attention on already projected inputs:
///   Attn(Q,K,V) + λs·Attn(Q,Ks,Vs) + λi·Attn(Q,Ki,Vi)
/// Branch tensors may be undefined when their λ is zero.
Tensor decoupled_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& subject_k,
                           const Tensor& subject_v, const Tensor& irrelevant_k, const Tensor& irrelevant_v,
                           double lambda_subject, double lambda_irrelevant);

/// Splits [B, n, h·dh] into [B, h, n, dh].
Tensor split_heads(const Tensor& x, int64_t heads);
/// Inverse of split_heads.
Tensor merge_heads(const Tensor& x);

/// Enriched tokens routed through the decoupled branches of every
/// cross-attention block.
struct BranchTokens {
  Tensor subject;     // [B, n's, d]
  Tensor irrelevant;  // [B, n'i, d]; may be undefined
  double lambda_subject = 1.0;
  double lambda_irrelevant = 0.0;
};

/// Cross-attention block of the denoiser. Projection layers are registered
/// under stable names (to_q, to_k, to_v, to_out, and once installed
/// to_k_subject, to_v_subject, to_k_irrelevant, to_v_irrelevant) so they can
/// be frozen, swapped or checkpointed individually.
class CrossAttentionBlockImpl : public torch::nn::Module {
 public:
  CrossAttentionBlockImpl(int64_t channels, int64_t context_dim, int64_t attn_dim, int64_t heads);

  /// x: [B, C, H, W] feature map, context: [B, n, d]. Returns x plus the attention output.
  Tensor forward(const Tensor& x, const Tensor& context, const BranchTokens* branches = nullptr);

  /// Adds the subject and irrelevant key/value maps, copied from the current
  /// base to_k/to_v. Returns false (and leaves everything untouched) when the
  /// branches already exist.
  bool install_branches();
  bool has_branches() const { return !to_k_subject.is_empty(); }

  /// Swaps in base key/value weights, e.g. tuned copies from a checkpoint.
  void load_base_kv(const Tensor& k_weight, const Tensor& v_weight);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
  torch::nn::Linear to_k_subject{nullptr}, to_v_subject{nullptr};
  torch::nn::Linear to_k_irrelevant{nullptr}, to_v_irrelevant{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(CrossAttentionBlock);

}  // namespace subjtok::attention
