#include "subjtok/attention.hpp"

#include <cmath>

#include "subjtok/log.hpp"

namespace subjtok::attention {

using torch::autograd::AutogradContext;
using torch::autograd::variable_list;

namespace {

Tensor t_(const Tensor& x) { return x.transpose(-1, -2); }

struct CrossAttentionFn : torch::autograd::Function<CrossAttentionFn> {
  static Tensor forward(AutogradContext* ctx, const Tensor& q, const Tensor& k, const Tensor& v) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
    auto p = torch::softmax(torch::matmul(q, t_(k)) * scale, -1);
    ctx->save_for_backward({q, k, v, p});
    ctx->saved_data["scale"] = scale;
    return torch::matmul(p, v);
  }

  static variable_list backward(AutogradContext* ctx, variable_list grads) {
    const auto saved = ctx->get_saved_variables();
    const auto& q = saved[0];
    const auto& k = saved[1];
    const auto& v = saved[2];
    const auto& p = saved[3];
    const double scale = ctx->saved_data["scale"].toDouble();
    const auto& d_out = grads[0];
    auto d_v = torch::matmul(t_(p), d_out);
    auto d_p = torch::matmul(d_out, t_(v));
    // softmax Jacobian: dS = P ⊙ (dP − Σ_j dP·P)
    auto d_s = p * (d_p - (d_p * p).sum(-1, true));
    auto d_q = torch::matmul(d_s, k) * scale;
    auto d_k = torch::matmul(t_(d_s), q) * scale;
    return {d_q, d_k, d_v};
  }
};

struct SpatialWiseFn : torch::autograd::Function<SpatialWiseFn> {
  static variable_list forward(AutogradContext* ctx, const Tensor& q, const Tensor& k, const Tensor& v) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
    // [..., L, n]: every location distributes unit mass over the queries
    auto a = torch::softmax(torch::matmul(k, t_(q)) * scale, -1);
    auto mass = a.sum(-2, true) + kAssignmentEps;
    auto w = a / mass;
    auto tokens = torch::matmul(t_(w), v);
    ctx->save_for_backward({q, k, v, a, w, mass});
    ctx->saved_data["scale"] = scale;
    return {tokens, a};
  }

  static variable_list backward(AutogradContext* ctx, variable_list grads) {
    const auto saved = ctx->get_saved_variables();
    const auto& q = saved[0];
    const auto& k = saved[1];
    const auto& v = saved[2];
    const auto& a = saved[3];
    const auto& w = saved[4];
    const auto& mass = saved[5];
    const double scale = ctx->saved_data["scale"].toDouble();

    Tensor d_a = torch::zeros_like(a);
    Tensor d_v = torch::zeros_like(v);
    if (grads[0].defined()) {
      const auto& d_tok = grads[0];
      d_v = torch::matmul(w, d_tok);
      auto d_w = torch::matmul(v, t_(d_tok));
      // W = A / colsum(A): dA = (dW − Σ_ℓ dW·W) / colsum(A)
      d_a = (d_w - (d_w * w).sum(-2, true)) / mass;
    }
    if (grads[1].defined()) d_a = d_a + grads[1];
    auto d_s = a * (d_a - (d_a * a).sum(-1, true));
    auto d_k = torch::matmul(d_s, q) * scale;
    auto d_q = torch::matmul(t_(d_s), k) * scale;
    return {d_q, d_k, d_v};
  }
};

void check_attention_shapes(const Tensor& q, const Tensor& k, const Tensor& v, const char* what) {
  detail::expect_shape(q.dim() >= 2 && k.dim() == q.dim() && v.dim() == q.dim(),
                       std::string(what) + ": inputs must share rank >= 2");
  detail::expect_shape(q.size(-1) == k.size(-1), std::string(what) + ": query/key width mismatch");
  detail::expect_shape(k.size(-2) == v.size(-2), std::string(what) + ": key/value length mismatch");
  detail::expect_shape(k.size(-2) >= 1, std::string(what) + ": need at least one key");
}

}  // namespace

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_attention_shapes(q, k, v, "cross_attention");
  return CrossAttentionFn::apply(q, k, v);
}

SpatialAssignment spatial_wise_attention(const Tensor& queries, const Tensor& keys, const Tensor& values) {
  check_attention_shapes(queries, keys, values, "spatial_wise_attention");
  detail::expect_shape(queries.size(-2) >= 1, "spatial_wise_attention: need at least one query");
  auto out = SpatialWiseFn::apply(queries, keys, values);
  return {out[0], out[1]};
}

Tensor decoupled_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& subject_k,
                           const Tensor& subject_v, const Tensor& irrelevant_k, const Tensor& irrelevant_v,
                           double lambda_subject, double lambda_irrelevant) {
  auto out = cross_attention(q, k, v);
  if (lambda_subject != 0.0) {
    if (!subject_k.defined() || !subject_v.defined()) throw ConfigError("subject branch inputs missing");
    out = out + lambda_subject * cross_attention(q, subject_k, subject_v);
  }
  if (lambda_irrelevant != 0.0) {
    if (!irrelevant_k.defined() || !irrelevant_v.defined()) throw ConfigError("irrelevant branch inputs missing");
    out = out + lambda_irrelevant * cross_attention(q, irrelevant_k, irrelevant_v);
  }
  return out;
}

Tensor split_heads(const Tensor& x, int64_t heads) {
  const auto b = x.size(0);
  const auto n = x.size(1);
  return x.view({b, n, heads, x.size(2) / heads}).transpose(1, 2);
}

Tensor merge_heads(const Tensor& x) {
  const auto b = x.size(0);
  const auto n = x.size(2);
  return x.transpose(1, 2).reshape({b, n, x.size(1) * x.size(3)});
}

CrossAttentionBlockImpl::CrossAttentionBlockImpl(int64_t channels, int64_t context_dim, int64_t attn_dim,
                                                 int64_t heads)
    : heads_(heads) {
  namespace nn = torch::nn;
  norm = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(std::min<int64_t>(8, channels), channels)));
  to_q = register_module("to_q", nn::Linear(nn::LinearOptions(channels, attn_dim).bias(false)));
  to_k = register_module("to_k", nn::Linear(nn::LinearOptions(context_dim, attn_dim).bias(false)));
  to_v = register_module("to_v", nn::Linear(nn::LinearOptions(context_dim, attn_dim).bias(false)));
  to_out = register_module("to_out", nn::Linear(attn_dim, channels));
}

bool CrossAttentionBlockImpl::install_branches() {
  if (has_branches()) return false;
  namespace nn = torch::nn;
  auto clone_linear = [](const nn::Linear& src) {
    nn::Linear dst(nn::LinearOptions(src->options.in_features(), src->options.out_features()).bias(false));
    torch::NoGradGuard no_grad;
    dst->weight.copy_(src->weight);
    return dst;
  };
  to_k_subject = register_module("to_k_subject", clone_linear(to_k));
  to_v_subject = register_module("to_v_subject", clone_linear(to_v));
  to_k_irrelevant = register_module("to_k_irrelevant", clone_linear(to_k));
  to_v_irrelevant = register_module("to_v_irrelevant", clone_linear(to_v));
  return true;
}

void CrossAttentionBlockImpl::load_base_kv(const Tensor& k_weight, const Tensor& v_weight) {
  detail::expect_shape(k_weight.sizes() == to_k->weight.sizes() && v_weight.sizes() == to_v->weight.sizes(),
                       "replacement to_k/to_v weights have the wrong shape");
  torch::NoGradGuard no_grad;
  to_k->weight.copy_(k_weight);
  to_v->weight.copy_(v_weight);
}

Tensor CrossAttentionBlockImpl::forward(const Tensor& x, const Tensor& context, const BranchTokens* branches) {
  const auto b = x.size(0);
  const auto c = x.size(1);
  const auto h = x.size(2);
  const auto w = x.size(3);
  auto f = norm(x).view({b, c, h * w}).transpose(1, 2);
  auto q = split_heads(to_q(f), heads_);
  auto k = split_heads(to_k(context), heads_);
  auto v = split_heads(to_v(context), heads_);

  Tensor ks, vs, ki, vi;
  double ls = 0.0;
  double li = 0.0;
  if (branches != nullptr && (branches->lambda_subject != 0.0 || branches->lambda_irrelevant != 0.0)) {
    if (!has_branches()) throw ConfigError("decoupled attention requested but branch weights are not installed");
    ls = branches->lambda_subject;
    li = branches->lambda_irrelevant;
    if (ls != 0.0) {
      if (!branches->subject.defined()) throw ConfigError("subject tokens missing for nonzero lambda_s");
      ks = split_heads(to_k_subject(branches->subject), heads_);
      vs = split_heads(to_v_subject(branches->subject), heads_);
    }
    if (li != 0.0) {
      if (!branches->irrelevant.defined()) throw ConfigError("irrelevant tokens missing for nonzero lambda_i");
      ki = split_heads(to_k_irrelevant(branches->irrelevant), heads_);
      vi = split_heads(to_v_irrelevant(branches->irrelevant), heads_);
    }
  }
  auto out = merge_heads(decoupled_attention(q, k, v, ks, vs, ki, vi, ls, li));
  out = to_out(out).transpose(1, 2).reshape({b, c, h, w});
  return x + out;
}

}  // namespace subjtok::attention
