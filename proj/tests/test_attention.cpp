#include <gtest/gtest.h>

#include "subjtok/attention.hpp"
#include "test_util.hpp"

using namespace subjtok;
using namespace subjtok::attention;
using subjtok::testing::gradient_relative_error;

namespace {

Tensor naive_softmax_rows(const Tensor& s) {
  auto e = (s - std::get<0>(s.max(-1, true))).exp();
  return e / e.sum(-1, true);
}

}  // namespace

TEST(CrossAttention, MatchesNaiveFormula) {
  torch::manual_seed(0);
  auto q = torch::randn({2, 3, 4}, torch::kFloat64);
  auto k = torch::randn({2, 5, 4}, torch::kFloat64);
  auto v = torch::randn({2, 5, 6}, torch::kFloat64);
  auto expect = torch::matmul(naive_softmax_rows(torch::matmul(q, k.transpose(1, 2)) / 2.0), v);
  EXPECT_TRUE(torch::allclose(cross_attention(q, k, v), expect, 1e-12, 1e-12));
}

TEST(CrossAttention, SingleKeyReturnsItsValue) {
  auto q = torch::randn({1, 3, 4});
  auto k = torch::randn({1, 1, 4});
  auto v = torch::randn({1, 1, 2});
  auto out = cross_attention(q, k, v);
  EXPECT_TRUE(torch::allclose(out, v.expand({1, 3, 2})));
}

TEST(CrossAttention, RejectsMismatchedShapes) {
  EXPECT_THROW(cross_attention(torch::randn({1, 3, 4}), torch::randn({1, 5, 3}), torch::randn({1, 5, 2})), ShapeError);
  EXPECT_THROW(cross_attention(torch::randn({1, 3, 4}), torch::randn({1, 5, 4}), torch::randn({1, 4, 2})), ShapeError);
}

TEST(CrossAttention, GradientMatchesFiniteDifferences) {
  torch::manual_seed(1);
  auto w = torch::randn({2, 3, 5}, torch::kFloat64);
  auto f = [&](const std::vector<Tensor>& x) { return (cross_attention(x[0], x[1], x[2]) * w).sum(); };
  const double err = gradient_relative_error(
      f, {torch::randn({2, 3, 4}), torch::randn({2, 6, 4}), torch::randn({2, 6, 5})});
  EXPECT_LT(err, 1e-4);
}

TEST(SpatialWise, AssignmentPartitionsEveryLocation) {
  torch::manual_seed(2);
  for (int i = 0; i < 50; ++i) {
    const auto n = 1 + i % 4;
    auto out = spatial_wise_attention(torch::randn({2, n, 8}) * 3, torch::randn({2, 16, 8}) * 3, torch::randn({2, 16, 5}));
    EXPECT_LT((out.assignment.sum(-1) - 1).abs().max().item<double>(), 1e-6);
    EXPECT_EQ(out.tokens.sizes(), (std::vector<int64_t>{2, n, 5}));
  }
}

TEST(SpatialWise, MatchesNaiveDefinition) {
  torch::manual_seed(3);
  auto q = torch::randn({3, 4}, torch::kFloat64);
  auto k = torch::randn({7, 4}, torch::kFloat64);
  auto v = torch::randn({7, 2}, torch::kFloat64);
  auto out = spatial_wise_attention(q, k, v);
  for (int64_t l = 0; l < 7; ++l) {
    std::vector<double> logits;
    double z = 0.0;
    for (int64_t j = 0; j < 3; ++j) {
      logits.push_back(std::exp(q[j].dot(k[l]).item<double>() / 2.0));
      z += logits.back();
    }
    for (int64_t j = 0; j < 3; ++j) EXPECT_NEAR(out.assignment[l][j].item<double>(), logits[j] / z, 1e-12);
  }
  for (int64_t j = 0; j < 3; ++j) {
    auto col = out.assignment.select(1, j);
    auto expect = (col.unsqueeze(1) * v).sum(0) / (col.sum() + kAssignmentEps);
    EXPECT_TRUE(torch::allclose(out.tokens[j], expect, 1e-10, 1e-12));
  }
}

TEST(SpatialWise, SingleQueryAveragesAllValues) {
  auto v = torch::randn({9, 3}, torch::kFloat64);
  auto out = spatial_wise_attention(torch::randn({1, 4}, torch::kFloat64), torch::randn({9, 4}, torch::kFloat64), v);
  EXPECT_TRUE(torch::allclose(out.tokens[0], v.mean(0), 1e-6, 1e-7));
}

TEST(SpatialWise, GradientMatchesFiniteDifferences) {
  torch::manual_seed(4);
  auto wt = torch::randn({2, 3, 5}, torch::kFloat64);
  auto wa = torch::randn({2, 6, 3}, torch::kFloat64);
  auto f = [&](const std::vector<Tensor>& x) {
    auto out = spatial_wise_attention(x[0], x[1], x[2]);
    return (out.tokens * wt).sum() + (out.assignment * wa).sum();
  };
  const double err = gradient_relative_error(
      f, {torch::randn({2, 3, 4}), torch::randn({2, 6, 4}), torch::randn({2, 6, 5})});
  EXPECT_LT(err, 1e-4);
}

TEST(Decoupled, ZeroWeightsReduceToTextAttention) {
  auto q = torch::randn({1, 4, 8});
  auto k = torch::randn({1, 5, 8});
  auto v = torch::randn({1, 5, 8});
  auto base = cross_attention(q, k, v);
  EXPECT_TRUE(torch::equal(decoupled_attention(q, k, v, {}, {}, {}, {}, 0.0, 0.0), base));
  EXPECT_THROW(decoupled_attention(q, k, v, {}, {}, {}, {}, 1.0, 0.0), ConfigError);
}

TEST(Decoupled, SumsBranchesWithWeights) {
  auto q = torch::randn({1, 4, 8}, torch::kFloat64);
  std::vector<Tensor> kv;
  for (int i = 0; i < 6; ++i) kv.push_back(torch::randn({1, 3, 8}, torch::kFloat64));
  auto out = decoupled_attention(q, kv[0], kv[1], kv[2], kv[3], kv[4], kv[5], 0.5, 2.0);
  auto expect = cross_attention(q, kv[0], kv[1]) + 0.5 * cross_attention(q, kv[2], kv[3]) +
                2.0 * cross_attention(q, kv[4], kv[5]);
  EXPECT_TRUE(torch::allclose(out, expect, 1e-12, 1e-12));
}

TEST(Heads, SplitMergeRoundTrip) {
  auto x = torch::randn({2, 5, 12});
  auto h = split_heads(x, 3);
  EXPECT_EQ(h.sizes(), (std::vector<int64_t>{2, 3, 5, 4}));
  EXPECT_TRUE(torch::equal(merge_heads(h), x));
}

TEST(CrossAttentionBlock, InstallIsIdempotentAndCopiesBase) {
  CrossAttentionBlock block(16, 8, 12, 1);
  const auto before = block->parameters().size();
  int64_t count_before = 0;
  for (auto& p : block->parameters()) count_before += p.numel();
  EXPECT_TRUE(block->install_branches());
  EXPECT_FALSE(block->install_branches());
  int64_t count_after = 0;
  for (auto& p : block->parameters()) count_after += p.numel();
  EXPECT_EQ(block->parameters().size(), before + 4);
  EXPECT_EQ(count_after - count_before, 2 * 2 * 12 * 8);
  EXPECT_TRUE(torch::equal(block->to_k_subject->weight, block->to_k->weight));
  EXPECT_TRUE(torch::equal(block->to_v_irrelevant->weight, block->to_v->weight));
}

TEST(CrossAttentionBlock, ZeroLambdaMatchesUninstalledOutput) {
  torch::manual_seed(5);
  CrossAttentionBlock block(16, 8, 12, 1);
  auto x = torch::randn({1, 16, 4, 4});
  auto ctx = torch::randn({1, 6, 8});
  auto before = block->forward(x, ctx);
  block->install_branches();
  BranchTokens br{torch::randn({1, 4, 8}), torch::randn({1, 4, 8}), 0.0, 0.0};
  EXPECT_TRUE(torch::equal(block->forward(x, ctx, &br), before));
}

TEST(CrossAttentionBlock, ZeroTokensContributeNothing) {
  torch::manual_seed(6);
  CrossAttentionBlock block(16, 8, 12, 1);
  block->install_branches();
  auto x = torch::randn({1, 16, 4, 4});
  auto ctx = torch::randn({1, 6, 8});
  BranchTokens br{torch::zeros({1, 4, 8}), torch::zeros({1, 4, 8}), 1.0, 1.0};
  EXPECT_TRUE(torch::allclose(block->forward(x, ctx, &br), block->forward(x, ctx), 1e-6, 1e-6));
}

TEST(CrossAttentionBlock, NonzeroLambdaWithoutBranchesIsAnError) {
  CrossAttentionBlock block(16, 8, 12, 1);
  BranchTokens br{torch::randn({1, 4, 8}), {}, 1.0, 0.0};
  EXPECT_THROW(block->forward(torch::randn({1, 16, 4, 4}), torch::randn({1, 6, 8}), &br), ConfigError);
}
