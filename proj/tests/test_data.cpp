#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "prompt_oracle.hpp"
#include "subjtok/data.hpp"
#include "test_util.hpp"

using namespace subjtok;
using namespace subjtok::data;
using subjtok::testing::TempDir;
using namespace subjtok::testing::oracle;

namespace {

std::vector<std::string> as_strings(std::span<const std::string_view> xs) {
  return {xs.begin(), xs.end()};
}

}  // namespace

TEST(Prompts, TrainingTemplatesMatchVerbatim) {
  EXPECT_EQ(as_strings(training_templates()), kTemplateOracle);
  for (auto t : training_templates()) EXPECT_EQ(count_placeholders(t), 1);
}

TEST(Prompts, EditingListsMatchVerbatim) {
  EXPECT_EQ(as_strings(editing_prompts(SubjectCategory::live)), concat(kSharedScenes, kLiveTail, kAttributes));
  EXPECT_EQ(as_strings(editing_prompts(SubjectCategory::nonlive)),
            concat(kSharedScenes, kNonliveTail, kAttributes));
  EXPECT_EQ(editing_prompts("live").size(), 25U);
  EXPECT_THROW(editing_prompts("plant"), DataError);
}

TEST(Prompts, PlaceholderSubstitution) {
  EXPECT_EQ(substitute_placeholder("a photo of a S*", "dog"), "a photo of a dog");
  EXPECT_THROW(substitute_placeholder("a photo of a dog", "dog"), PromptError);
  EXPECT_THROW(substitute_placeholder("a S* and a S*", "dog"), PromptError);
}

TEST(Prompts, SampledTemplateComesFromTheList) {
  std::mt19937_64 rng(3);
  std::set<std::string> seen;
  for (int i = 0; i < 500; ++i) seen.emplace(sample_template(rng));
  EXPECT_EQ(seen.size(), kTemplateOracle.size());
}

TEST(Filter, AreaBoundsAreInclusive) {
  EXPECT_FALSE(keep_crop(0.81));
  EXPECT_FALSE(keep_crop(0.015));
  EXPECT_TRUE(keep_crop(0.80));
  EXPECT_TRUE(keep_crop(0.02));
  EXPECT_TRUE(keep_crop(0.50));
}

TEST(Manifest, ParsesWellFormedRow) {
  auto a = parse_manifest_line(R"({"image": "a.png", "bbox": [1, 2, 3, 4], "class": " dog "})");
  EXPECT_EQ(a.image, "a.png");
  EXPECT_DOUBLE_EQ(a.w, 3.0);
  EXPECT_EQ(a.class_name, "dog");
}

TEST(Manifest, RejectsMalformedRows) {
  EXPECT_THROW(parse_manifest_line("{not json"), DataError);
  EXPECT_THROW(parse_manifest_line(R"({"image": "a.png", "class": "dog"})"), DataError);
  EXPECT_THROW(parse_manifest_line(R"({"image": "a.png", "bbox": [1, 2, 3], "class": "dog"})"), DataError);
  EXPECT_THROW(parse_manifest_line(R"({"image": "a.png", "bbox": [1, 2, 0, 4], "class": "dog"})"), DataError);
  EXPECT_THROW(parse_manifest_line(R"({"image": "a.png", "bbox": [1, 2, 3, 4], "class": ""})"), DataError);
}

TEST(Manifest, BuildPairsFiltersAndCrops) {
  TempDir dir("pairs");
  write_png(dir.path / "img.png", ImageTensor::filled(100, 100, 0.5F));
  std::ofstream m(dir.path / "manifest.jsonl");
  m << R"({"image": "img.png", "bbox": [10, 10, 50, 50], "class": "dog"})" << "\n";  // 0.25 kept
  m << R"({"image": "img.png", "bbox": [0, 0, 95, 95], "class": "dog"})" << "\n";    // 0.9025 dropped
  m << R"({"image": "img.png", "bbox": [0, 0, 10, 10], "class": "dog"})" << "\n";    // 0.01 dropped
  m << R"({"image": "img.png", "bbox": [0, 0, 80, 100], "class": "cat"})" << "\n";   // 0.80 kept
  m << R"({"image": "missing.png", "bbox": [0, 0, 5, 5], "class": "cat"})" << "\n";
  m.close();
  BuildOptions opt;
  opt.resolution = 32;
  BuildStats stats;
  auto pairs = build_pairs(dir.path / "manifest.jsonl", opt, &stats);
  EXPECT_EQ(stats.rows, 5U);
  EXPECT_EQ(stats.kept, 2U);
  EXPECT_EQ(stats.filtered, 2U);
  EXPECT_EQ(stats.unreadable, 1U);
  ASSERT_EQ(pairs.size(), 2U);
  EXPECT_EQ(pairs[0].image.height(), 32);
  EXPECT_EQ(pairs[1].class_name, "cat");
  EXPECT_EQ(substitute_placeholder(pairs[1].prompt_template, "cat"), pairs[1].prompt_text);
}

TEST(Manifest, BuildPairsIsDeterministicAcrossWorkers) {
  TempDir dir("pairs_det");
  write_png(dir.path / "img.png", ImageTensor::filled(64, 64, 0.25F));
  std::ofstream m(dir.path / "manifest.jsonl");
  for (int i = 0; i < 12; ++i) {
    m << R"({"image": "img.png", "bbox": [)" << i << R"(, 0, 30, 30], "class": "dog"})" << "\n";
  }
  m.close();
  BuildOptions one;
  one.resolution = 16;
  BuildOptions four = one;
  four.workers = 4;
  auto a = build_pairs(dir.path / "manifest.jsonl", one);
  auto b = build_pairs(dir.path / "manifest.jsonl", four);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt_template, b[i].prompt_template);
    EXPECT_TRUE(torch::equal(a[i].image.hwc(), b[i].image.hwc()));
  }
}

TEST(ToyWorld, LexiconSizes) {
  EXPECT_EQ(Subject::count(), 192);
  EXPECT_EQ(ToyLexicon::scenes().size(), 10U);
  for (int id : {0, 57, 191}) EXPECT_EQ(Subject::from_id(id).id(), id);
}

TEST(ToyWorld, CorpusIsDeterministicPerSeed) {
  auto a = synth_toy_corpus(3, 2, 5, 32);
  auto b = synth_toy_corpus(3, 2, 5, 32);
  auto c = synth_toy_corpus(3, 2, 6, 32);
  ASSERT_EQ(a.samples.size(), 6U);
  bool differs = false;
  for (size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_TRUE(torch::equal(a.samples[i].image.hwc(), b.samples[i].image.hwc()));
    EXPECT_EQ(a.samples[i].caption, b.samples[i].caption);
    differs |= !torch::equal(a.samples[i].image.hwc(), c.samples[i].image.hwc());
  }
  EXPECT_TRUE(differs);
}

TEST(ToyWorld, MasksCoverTheSubjectWithinFilterBounds) {
  auto corpus = synth_toy_corpus(8, 3, 9, 64);
  for (const auto& s : corpus.samples) {
    EXPECT_TRUE(keep_crop(s.mask_area_ratio())) << s.mask_area_ratio();
    EXPECT_EQ(s.mask.size(0), 64);
    EXPECT_NE(s.caption.find(s.subject.class_name()), std::string::npos);
  }
}

TEST(ToyWorld, CanonicalRenderIsFixed) {
  ToyWorld world(32);
  auto s = Subject::from_id(17);
  EXPECT_TRUE(torch::equal(world.render_canonical(s).image.hwc(), world.render_canonical(s).image.hwc()));
}

TEST(Augment, PreservesShapeAndRange) {
  std::mt19937_64 rng(1);
  auto x = torch::rand({4, 3, 32, 32});
  auto y = augment(x, AugmentConfig{}, rng);
  EXPECT_EQ(y.sizes(), x.sizes());
  EXPECT_GE(y.min().item<float>(), 0.0F);
  EXPECT_LE(y.max().item<float>(), 1.0F);
  AugmentConfig off;
  off.enabled = false;
  EXPECT_TRUE(torch::equal(augment(x, off, rng), x));
}
