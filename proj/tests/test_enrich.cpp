#include <gtest/gtest.h>

#include "subjtok/enrich.hpp"
#include "test_util.hpp"

using namespace subjtok;
using namespace subjtok::enrich;
using subjtok::testing::gradient_relative_error;
using subjtok::testing::TempDir;
using subjtok::testing::tiny_backbone;

namespace {

Stage1Config tiny_stage1() {
  Stage1Config c;
  c.refine_blocks = 1;
  c.resolution = 32;
  c.batch = 2;
  c.steps = 2;
  c.log_every = 0;
  return c;
}

Stage2Config tiny_stage2(bool bias = true) {
  Stage2Config c;
  c.n_enriched_subject = 2;
  c.n_enriched_irrelevant = 3;
  c.projector_hidden_mult = 2;
  c.projector_bias = bias;
  c.resolution = 32;
  c.batch = 2;
  c.steps = 2;
  c.log_every = 0;
  return c;
}

disentangle::DisentangledTokens random_tokens(int64_t n_s, int64_t n_i, int64_t d) {
  disentangle::DisentangledTokens t;
  t.tokens = torch::randn({n_s + n_i, d});
  t.n_subject = n_s;
  return t;
}

}  // namespace

TEST(Projector, ShapesAndGradient) {
  torch::manual_seed(0);
  Projector p(2, 5, 3, 4, 2, true);
  p->to(torch::kFloat64);
  EXPECT_EQ(p->forward(torch::randn({6, 2, 5}, torch::kFloat64)).sizes(), (std::vector<int64_t>{6, 3, 4}));
  auto w = torch::randn({1, 3, 4}, torch::kFloat64);
  auto f = [&](const std::vector<Tensor>& x) { return (p->forward(x[0]) * w).sum(); };
  EXPECT_LT(gradient_relative_error(f, {torch::randn({1, 2, 5})}), 1e-4);
}

TEST(Enrichment, BranchesAreIsolated) {
  auto bb = tiny_backbone();
  Enrichment e(bb->config, tiny_stage2(), 1, 2);
  auto t = random_tokens(1, 2, bb->config.text_dim);
  auto a = enrich::enrich(e, t);
  EXPECT_EQ(a.subject.sizes(), (std::vector<int64_t>{2, bb->config.text_dim}));
  EXPECT_EQ(a.irrelevant.sizes(), (std::vector<int64_t>{3, bb->config.text_dim}));
  auto perturbed = t;
  perturbed.tokens = t.tokens.clone();
  perturbed.tokens.slice(0, 1) += 5.0;
  auto b = enrich::enrich(e, perturbed);
  EXPECT_TRUE(torch::equal(a.subject, b.subject));
  EXPECT_FALSE(torch::equal(a.irrelevant, b.irrelevant));
}

TEST(Enrichment, SubjectOutputHasNoGradientFromIrrelevantInput) {
  auto bb = tiny_backbone();
  Enrichment e(bb->config, tiny_stage2(), 1, 1);
  auto s = torch::randn({1, 1, bb->config.text_dim}, torch::requires_grad());
  auto i = torch::randn({1, 1, bb->config.text_dim}, torch::requires_grad());
  auto out = e->forward(s, i);
  out.subject.sum().backward();
  EXPECT_FALSE(i.grad().defined() && i.grad().abs().sum().item<double>() != 0.0);
  for (const auto& p : e->irrelevant->parameters()) {
    EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() != 0.0);
  }
}

TEST(Enrichment, ZeroInputWithoutBiasGivesZeroTokens) {
  auto bb = tiny_backbone();
  Enrichment e(bb->config, tiny_stage2(false), 1, 1);
  disentangle::DisentangledTokens t;
  t.tokens = torch::zeros({2, bb->config.text_dim});
  t.n_subject = 1;
  auto out = enrich::enrich(e, t);
  EXPECT_EQ(out.subject.abs().max().item<float>(), 0.0F);
  EXPECT_EQ(out.irrelevant.abs().max().item<float>(), 0.0F);
}

TEST(Enrichment, RowMismatchIsAShapeError) {
  auto bb = tiny_backbone();
  Enrichment e(bb->config, tiny_stage2(), 1, 1);
  EXPECT_THROW(enrich::enrich(e, random_tokens(2, 1, bb->config.text_dim)), ShapeError);
}

TEST(Enrichment, GlobalBaselineHasNoIrrelevantProjector) {
  auto bb = tiny_backbone();
  auto cfg = tiny_stage2();
  cfg.conditioning = "global";
  Enrichment e(bb->config, cfg, 1, 1);
  EXPECT_TRUE(e->global_baseline());
  EXPECT_FALSE(e->irrelevant);
}

TEST(Lambda, Validation) {
  EXPECT_NO_THROW((LambdaPolicy{0.0, 0.0}.validate()));
  EXPECT_THROW((LambdaPolicy{-0.1, 0.0}.validate()), ConfigError);
  EXPECT_THROW((LambdaPolicy{1.0, std::nan("")}.validate()), ConfigError);
  EXPECT_EQ(LambdaPolicy::training().irrelevant, 1.0);
}

TEST(Branches, InstallAddsTwoMapsPerKindPerBlock) {
  auto bb = tiny_backbone();
  int64_t before = 0;
  for (const auto& p : bb->denoiser->parameters()) before += p.numel();
  const int blocks = install_decoupled_branches(bb->denoiser);
  EXPECT_EQ(blocks, static_cast<int>(bb->denoiser->attention_blocks().size()));
  EXPECT_EQ(install_decoupled_branches(bb->denoiser), 0);
  int64_t after = 0, expect = 0;
  for (const auto& p : bb->denoiser->parameters()) after += p.numel();
  for (const auto& [name, block] : bb->denoiser->attention_blocks()) expect += 2 * 2 * block->to_k->weight.numel();
  EXPECT_EQ(after - before, expect);
  EXPECT_EQ(branch_weights(bb->denoiser).size(), 4 * bb->denoiser->attention_blocks().size());
}

TEST(Stage2, TrainingTouchesOnlyProjectorsAndBranches) {
  auto bb = tiny_backbone();
  auto s1 = disentangle::Stage1Model::create(*bb, tiny_stage1());
  s1.freeze();
  data::ToyStream stream(32);
  TempDir dir("s2");
  disentangle::TrainOptions opt;
  opt.dump_dir = dir.path / "dumps";
  auto result = train_stage2(*bb, s1, stream, tiny_stage2(), opt);
  EXPECT_EQ(result.frozen_checksum_before, result.frozen_checksum_after);
  EXPECT_EQ(result.stage1_checksum_before, result.stage1_checksum_after);
  EXPECT_EQ(result.losses.size(), 2U);
  bool moved = false;
  for (const auto& [name, block] : bb->denoiser->attention_blocks()) {
    moved |= !torch::equal(block->to_k_subject->weight, block->to_k->weight);
  }
  EXPECT_TRUE(moved);
}

TEST(Stage2, CheckpointRoundTrip) {
  auto bb = tiny_backbone();
  auto s1 = disentangle::Stage1Model::create(*bb, tiny_stage1());
  auto s2 = Stage2Model::create(*bb, tiny_stage2(), 1, 1);
  TempDir dir("s2ckpt");
  s2.save(dir.path, *bb);
  auto back = Stage2Model::load(dir.path);
  auto img = data::synth_toy_corpus(1, 1, 2, 32).samples.front().image;
  auto a = condition(*bb, s1, s2, img, "circle");
  auto b = condition(*bb, s1, back, img, "circle");
  EXPECT_TRUE(torch::equal(a.subject, b.subject));
  EXPECT_TRUE(torch::equal(a.irrelevant, b.irrelevant));
  auto fresh = tiny_backbone();
  back.apply(*fresh);
  EXPECT_TRUE(fresh->denoiser->has_branches());
}

TEST(Stage2, SingleStageAblationCarriesItsOwnTokenizer) {
  auto bb = tiny_backbone();
  data::ToyStream stream(32);
  TempDir dir("single");
  disentangle::TrainOptions opt;
  opt.dump_dir = dir.path / "dumps";
  auto result = single_stage_ablation_train(*bb, stream, tiny_stage1(), tiny_stage2(), opt);
  ASSERT_TRUE(result.model.joint_stage1.has_value());
  EXPECT_EQ(result.model.mode, "single_stage");
  EXPECT_EQ(result.frozen_checksum_before, result.frozen_checksum_after);
}
