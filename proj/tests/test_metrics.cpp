#include <gtest/gtest.h>

#include "subjtok/metrics.hpp"
#include "test_util.hpp"

using namespace subjtok;
using namespace subjtok::metrics;

namespace {

std::vector<MethodRow> published_table() {
  auto row = [](std::string name, double ct, double ci, double di, double iv, double t) {
    return MethodRow{std::move(name), {{"C-T", ct}, {"C-I", ci}, {"D-I", di}, {"IV", iv}, {"T", t}}};
  };
  return {row("DisenBooth", 0.303, 0.760, 0.781, 0.041, 2420),
          row("DreamBooth", 0.286, 0.842, 0.849, 0.039, 1120),
          row("ELITE", 0.287, 0.792, 0.770, 0.036, 4.12),
          row("IP-Adapter", 0.275, 0.883, 0.912, 0.033, 1.98),
          row("BLIP-Diffusion", 0.295, 0.785, 0.765, 0.029, 1.10),
          row("Proposed", 0.315, 0.828, 0.802, 0.026, 1.96)};
}

double mrank_of(const std::vector<RankedRow>& rows, const std::string& name) {
  for (const auto& r : rows) {
    if (r.method == name) return r.mrank;
  }
  return -1.0;
}

}  // namespace

TEST(Cosine, BasicValues) {
  EXPECT_NEAR(cosine(torch::tensor({1.0, 0.0}), torch::tensor({0.0, 2.0})), 0.0, 1e-12);
  EXPECT_NEAR(cosine(torch::tensor({1.0, 1.0}), torch::tensor({2.0, 2.0})), 1.0, 1e-12);
  EXPECT_NEAR(cosine(torch::tensor({1.0, 0.0}), torch::tensor({-3.0, 0.0})), -1.0, 1e-12);
}

TEST(Variance, PopulationVarianceOracle) {
  EXPECT_NEAR(population_variance({0.8, 0.9}), 0.0025, 1e-12);
  EXPECT_DOUBLE_EQ(population_variance({0.5, 0.5, 0.5}), 0.0);
}

TEST(Variance, InternalVarianceAveragesCells) {
  EXPECT_NEAR(internal_variance({{0.8, 0.9}, {0.5, 0.5}}), 0.00125, 1e-12);
  EXPECT_NEAR(internal_variance({{0.8, 0.9}, {0.3}}), 0.0025, 1e-12);
  EXPECT_DOUBLE_EQ(internal_variance({{0.3}}), 0.0);
}

TEST(Rank, TiesShareTheAverageRank) {
  EXPECT_EQ(rank_column({0.5, 0.9, 0.5, 0.1}, true), (std::vector<double>{2.5, 1.0, 2.5, 4.0}));
  EXPECT_EQ(rank_column({0.5, 0.9, 0.5, 0.1}, false), (std::vector<double>{2.5, 4.0, 2.5, 1.0}));
}

TEST(Rank, PublishedTableMeanRanks) {
  auto ranked = mrank(published_table());
  EXPECT_NEAR(mrank_of(ranked, "Proposed"), 1.75, 1e-12);
  EXPECT_NEAR(mrank_of(ranked, "BLIP-Diffusion"), 2.875, 1e-12);
  EXPECT_NEAR(mrank_of(ranked, "IP-Adapter"), 3.25, 1e-12);
  EXPECT_NEAR(mrank_of(ranked, "ELITE"), 4.125, 1e-12);
  EXPECT_NEAR(mrank_of(ranked, "DreamBooth"), 4.25, 1e-12);
  EXPECT_NEAR(mrank_of(ranked, "DisenBooth"), 4.75, 1e-12);
}

TEST(Rank, InvariantToMonotoneTransformAndRowOrder) {
  auto table = published_table();
  auto base = mrank(table);
  auto transformed = table;
  for (auto& r : transformed) {
    r.values["T"] = std::log(r.values["T"]);
    r.values["C-I"] = r.values["C-I"] * 10 + 3;
  }
  std::reverse(transformed.begin(), transformed.end());
  auto other = mrank(transformed);
  for (const auto& r : base) EXPECT_DOUBLE_EQ(mrank_of(other, r.method), r.mrank) << r.method;
}

TEST(Rank, MissingCellIsAnError) {
  auto table = published_table();
  table[2].values.erase("IV");
  EXPECT_THROW(mrank(table), DataError);
}

TEST(Rank, DefaultWeights) {
  std::map<std::string, double> w;
  for (const auto& m : default_metrics()) w[m.name] = m.weight;
  EXPECT_EQ(w, (std::map<std::string, double>{{"C-T", 1.0}, {"C-I", 0.5}, {"D-I", 0.5}, {"IV", 1.0}, {"T", 1.0}}));
}

TEST(Report, JsonAndTextCarryEveryMethod) {
  auto ranked = mrank(published_table());
  auto j = report_json(ranked);
  EXPECT_EQ(j.size(), 6U);
  auto text = format_report(ranked);
  for (const auto& r : ranked) EXPECT_NE(text.find(r.method), std::string::npos);
}

TEST(Report, ReadsMethodTable) {
  auto j = nlohmann::json::parse(R"({"methods": [{"name": "a", "C-T": 0.3, "C-I": 0.8, "D-I": 0.8, "IV": 0.02, "T": 2}]})");
  auto rows = read_method_table(j);
  ASSERT_EQ(rows.size(), 1U);
  EXPECT_DOUBLE_EQ(rows[0].values.at("IV"), 0.02);
  EXPECT_THROW(read_method_table(nlohmann::json::parse(R"({"rows": []})")), DataError);
}

TEST(SelfSupervised, DeterministicAndDiscriminative) {
  SelfSupervisedEncoder a, b;
  auto x = torch::rand({2, 3, 32, 32});
  EXPECT_TRUE(torch::equal(a.embed(x), b.embed(x)));
  EXPECT_EQ(a.embed(x).sizes(), (std::vector<int64_t>{2, 128}));
  auto e = a.embed(x);
  EXPECT_LT(cosine(e[0], e[1]), 1.0 - 1e-6);
}

TEST(Alignment, IdenticalImagesAlignPerfectly) {
  auto bb = subjtok::testing::tiny_backbone();
  Embedders e;
  e.backbone = bb.get();
  auto img = data::synth_toy_corpus(1, 1, 3, 32).samples.front().image;
  EXPECT_NEAR(image_alignment(e, img, img, Space::joint), 1.0, 1e-6);
  EXPECT_NEAR(image_alignment(e, img, img, Space::self_supervised), 1.0, 1e-6);
  const double ct = text_alignment(e, img, "a S* in the snow", "circle");
  EXPECT_GE(ct, -1.0);
  EXPECT_LE(ct, 1.0);
}

TEST(Timing, MeasuresElapsedTime) {
  int calls = 0;
  const double t = time_inference([&] {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  });
  EXPECT_EQ(calls, 2);
  EXPECT_GE(t, 0.019);
}
