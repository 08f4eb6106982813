#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "subjtok/backbone.hpp"

namespace subjtok::metrics {

double cosine(const Tensor& a, const Tensor& b);

enum class Space { joint, self_supervised };

/// Fixed random-weight convolutional encoder used as the self-supervised
/// image space at toy scale: two strided tanh convolutions, then per-channel
/// mean and standard deviation.
class SelfSupervisedEncoder {
 public:
  explicit SelfSupervisedEncoder(uint64_t seed = 7);
  /// images: [B, 3, H, W] -> [B, 128].
  Tensor embed(const Tensor& images) const;
  Tensor embed(const ImageTensor& image) const;

 private:
  Tensor w1_, b1_, w2_, b2_;
};

/// Embedding backends shared by all alignment metrics.
struct Embedders {
  const backbone::Backbone* backbone = nullptr;
  SelfSupervisedEncoder self_supervised;

  Tensor image(const ImageTensor& image, Space space) const;
  Tensor text(const std::string& prompt) const;
};

/// Cosine between the generated image and the prompt with S* replaced by the class name.
double text_alignment(const Embedders& e, const ImageTensor& generated, const std::string& prompt,
                      const std::string& class_name);
double image_alignment(const Embedders& e, const ImageTensor& generated, const ImageTensor& reference, Space space);

double population_variance(const std::vector<double>& scores);
/// Mean of per-cell population variances; cells with fewer than two scores
/// are skipped with a warning. Returns 0 when no cell qualifies.
double internal_variance(const std::vector<std::vector<double>>& cells);

/// Wall-clock seconds of `fn` after one untimed warm-up call.
double time_inference(const std::function<void()>& fn, bool warm_up = true);

// ---------------------------------------------------------------------------
// Ranking

struct MetricSpec {
  std::string name;
  double weight;
  bool higher_better;
};

/// C-T 1, C-I 0.5, D-I 0.5, IV 1, T 1.
const std::vector<MetricSpec>& default_metrics();

struct MethodRow {
  std::string method;
  std::map<std::string, double> values;
};

struct RankedRow {
  std::string method;
  std::map<std::string, double> values;
  std::map<std::string, double> ranks;
  double mrank = 0.0;
};

/// 1-based ranks with ties sharing the average rank.
std::vector<double> rank_column(const std::vector<double>& values, bool higher_better);

/// Weighted mean rank per method. Missing cells raise DataError.
std::vector<RankedRow> mrank(const std::vector<MethodRow>& rows,
                             const std::vector<MetricSpec>& metrics = default_metrics());

/// Plain-text table and one JSON record per method.
std::string format_report(const std::vector<RankedRow>& rows, const std::vector<MetricSpec>& metrics = default_metrics());
nlohmann::json report_json(const std::vector<RankedRow>& rows);

/// Reads {"methods": [{"name": ..., "C-T": ..., ...}, ...]}.
std::vector<MethodRow> read_method_table(const nlohmann::json& j);

}  // namespace subjtok::metrics
