#include "subjtok/metrics.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "subjtok/data.hpp"
#include "subjtok/log.hpp"

namespace subjtok::metrics {

namespace F = torch::nn::functional;

double cosine(const Tensor& a, const Tensor& b) {
  auto x = a.flatten().to(torch::kFloat64);
  auto y = b.flatten().to(torch::kFloat64);
  detail::expect_shape(x.numel() == y.numel(), "cosine: vectors differ in length");
  const double den = x.norm().item<double>() * y.norm().item<double>();
  if (den == 0.0) return 0.0;
  return std::clamp(x.dot(y).item<double>() / den, -1.0, 1.0);
}

SelfSupervisedEncoder::SelfSupervisedEncoder(uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  w1_ = torch::randn({64, 3, 5, 5}, gen, torch::kFloat32) / std::sqrt(75.0);
  b1_ = torch::randn({64}, gen, torch::kFloat32) * 0.1;
  w2_ = torch::randn({64, 64, 3, 3}, gen, torch::kFloat32) / std::sqrt(576.0);
  b2_ = torch::randn({64}, gen, torch::kFloat32) * 0.1;
}

Tensor SelfSupervisedEncoder::embed(const Tensor& images) const {
  torch::NoGradGuard no_grad;
  auto x = images * 2.0 - 1.0;
  x = torch::tanh(F::conv2d(x, w1_, F::Conv2dFuncOptions().bias(b1_).stride(2).padding(2)));
  x = torch::tanh(F::conv2d(x, w2_, F::Conv2dFuncOptions().bias(b2_).stride(2).padding(1)));
  auto flat = x.flatten(2);
  return torch::cat({flat.mean(2), flat.std(2, false)}, 1);
}

Tensor SelfSupervisedEncoder::embed(const ImageTensor& image) const { return embed(image.chw().unsqueeze(0)).squeeze(0); }

Tensor Embedders::image(const ImageTensor& img, Space space) const {
  if (space == Space::self_supervised) return self_supervised.embed(img);
  if (backbone == nullptr) throw ConfigError("joint image encoder unavailable");
  torch::NoGradGuard no_grad;
  return backbone->encode_image(img).global;
}

Tensor Embedders::text(const std::string& prompt) const {
  if (backbone == nullptr) throw ConfigError("joint text encoder unavailable");
  torch::NoGradGuard no_grad;
  return backbone->encode_prompts({prompt}).pooled.squeeze(0);
}

double text_alignment(const Embedders& e, const ImageTensor& generated, const std::string& prompt,
                      const std::string& class_name) {
  const auto text = data::count_placeholders(prompt) > 0 ? data::substitute_placeholder(prompt, class_name) : prompt;
  return cosine(e.image(generated, Space::joint), e.text(text));
}

double image_alignment(const Embedders& e, const ImageTensor& generated, const ImageTensor& reference, Space space) {
  return cosine(e.image(generated, space), e.image(reference, space));
}

double population_variance(const std::vector<double>& scores) {
  if (scores.empty()) return 0.0;
  const double n = static_cast<double>(scores.size());
  const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double ss = 0.0;
  for (double s : scores) ss += (s - mean) * (s - mean);
  return ss / n;
}

double internal_variance(const std::vector<std::vector<double>>& cells) {
  double total = 0.0;
  size_t used = 0;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].size() < 2) {
      LOG_WARN("internal variance: cell %zu has %zu score(s); skipped", i, cells[i].size());
      continue;
    }
    total += population_variance(cells[i]);
    ++used;
  }
  return used == 0 ? 0.0 : total / static_cast<double>(used);
}

double time_inference(const std::function<void()>& fn, bool warm_up) {
  if (warm_up) fn();
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

const std::vector<MetricSpec>& default_metrics() {
  static const std::vector<MetricSpec> m = {
      {"C-T", 1.0, true}, {"C-I", 0.5, true}, {"D-I", 0.5, true}, {"IV", 1.0, false}, {"T", 1.0, false}};
  return m;
}

std::vector<double> rank_column(const std::vector<double>& values, bool higher_better) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return higher_better ? values[a] > values[b] : values[a] < values[b];
  });
  std::vector<double> ranks(n, 0.0);
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::vector<RankedRow> mrank(const std::vector<MethodRow>& rows, const std::vector<MetricSpec>& metrics) {
  std::vector<RankedRow> out;
  for (const auto& r : rows) out.push_back({r.method, r.values, {}, 0.0});
  double total_weight = 0.0;
  for (const auto& m : metrics) {
    std::vector<double> col;
    for (const auto& r : rows) {
      auto it = r.values.find(m.name);
      if (it == r.values.end() || !std::isfinite(it->second)) {
        throw DataError("method '" + r.method + "' has no value for " + m.name);
      }
      col.push_back(it->second);
    }
    const auto ranks = rank_column(col, m.higher_better);
    for (size_t i = 0; i < out.size(); ++i) {
      out[i].ranks[m.name] = ranks[i];
      out[i].mrank += m.weight * ranks[i];
    }
    total_weight += m.weight;
  }
  for (auto& r : out) r.mrank /= total_weight;
  return out;
}

std::string format_report(const std::vector<RankedRow>& rows, const std::vector<MetricSpec>& metrics) {
  std::string s;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-18s", "method");
  s += buf;
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof(buf), " %10s", m.name.c_str());
    s += buf;
  }
  s += "      mRank\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-18s", r.method.c_str());
    s += buf;
    for (const auto& m : metrics) {
      std::snprintf(buf, sizeof(buf), " %10.4g", r.values.at(m.name));
      s += buf;
    }
    std::snprintf(buf, sizeof(buf), " %10.3f\n", r.mrank);
    s += buf;
  }
  return s;
}

nlohmann::json report_json(const std::vector<RankedRow>& rows) {
  auto j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"method", r.method}, {"values", r.values}, {"ranks", r.ranks}, {"mrank", r.mrank}});
  return j;
}

std::vector<MethodRow> read_method_table(const nlohmann::json& j) {
  if (!j.contains("methods") || !j["methods"].is_array()) throw DataError("manifest needs a 'methods' array");
  std::vector<MethodRow> rows;
  for (const auto& m : j["methods"]) {
    MethodRow r;
    r.method = m.value("name", "");
    if (r.method.empty()) throw DataError("method entry without a name");
    for (auto& [k, v] : m.items()) {
      if (k != "name" && v.is_number()) r.values[k] = v.get<double>();
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace subjtok::metrics
