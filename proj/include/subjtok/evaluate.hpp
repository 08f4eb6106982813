#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "subjtok/disentangle.hpp"
#include "subjtok/enrich.hpp"
#include "subjtok/metrics.hpp"
#include "subjtok/sampler.hpp"

namespace subjtok::evaluate {

/// Toy samples with masks drawn from a seeded stream independent of training.
std::vector<data::ToySample> held_out_samples(int n, uint64_t seed, int64_t resolution);

struct DisentanglementReport {
  std::vector<disentangle::MaskScore> scores;
  int wins = 0;  // images where subject IoU > irrelevant IoU
  double win_rate = 0.0;
  double mean_margin = 0.0;
  double mean_subject_iou = 0.0;
  double mean_irrelevant_iou = 0.0;

  std::vector<double> margins() const;
  nlohmann::json to_json() const;
};

/// Scores the attention maps of every sample against its mask.
DisentanglementReport evaluate_disentanglement(const backbone::Backbone& bb, const disentangle::Stage1Model& stage1,
                                               const std::vector<data::ToySample>& samples);

struct VarianceSetup {
  int n_subjects = 10;
  int n_prompts = 5;
  int n_references = 3;
  uint64_t seed = 11;
  sampler::SamplerConfig sampler;
};

struct VarianceReport {
  double internal_variance = 0.0;
  double mean_alignment = 0.0;  // mean D-I against the canonical render
  std::vector<std::vector<double>> cells;
  nlohmann::json to_json() const;
};

/// For each subject, renders references in different scenes, generates every
/// prompt from every reference and collects self-supervised image alignment
/// with the subject's canonical render per (subject, prompt) cell.
VarianceReport evaluate_internal_variance(backbone::Backbone& bb, const disentangle::Stage1Model& stage1,
                                          const enrich::Stage2Model& stage2, const VarianceSetup& setup,
                                          const metrics::Embedders& embedders);

}  // namespace subjtok::evaluate
