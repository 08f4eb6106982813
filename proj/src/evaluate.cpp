#include "subjtok/evaluate.hpp"

#include <algorithm>
#include <numeric>

#include "subjtok/log.hpp"

namespace subjtok::evaluate {

using json = nlohmann::json;

std::vector<data::ToySample> held_out_samples(int n, uint64_t seed, int64_t resolution) {
  const data::ToyWorld world(resolution);
  std::mt19937_64 rng(seed);
  std::vector<data::ToySample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(world.random_sample(rng));
  return out;
}

std::vector<double> DisentanglementReport::margins() const {
  std::vector<double> m;
  for (const auto& s : scores) m.push_back(s.margin());
  return m;
}

json DisentanglementReport::to_json() const {
  return {{"images", scores.size()},
          {"wins", wins},
          {"win_rate", win_rate},
          {"mean_margin", mean_margin},
          {"mean_subject_iou", mean_subject_iou},
          {"mean_irrelevant_iou", mean_irrelevant_iou}};
}

DisentanglementReport evaluate_disentanglement(const backbone::Backbone& bb, const disentangle::Stage1Model& stage1,
                                               const std::vector<data::ToySample>& samples) {
  DisentanglementReport r;
  for (const auto& s : samples) {
    const auto tokens = disentangle::tokenize(bb, stage1, s.image, disentangle::init_queries(bb, stage1, s.class_name()));
    const auto maps = disentangle::attention_maps(bb, s.image, tokens);
    auto score = disentangle::score_maps(maps, s.mask, tokens.n_subject);
    if (score.subject_iou > score.irrelevant_iou) ++r.wins;
    r.mean_margin += score.margin();
    r.mean_subject_iou += score.subject_iou;
    r.mean_irrelevant_iou += score.irrelevant_iou;
    r.scores.push_back(std::move(score));
  }
  if (!samples.empty()) {
    const double n = static_cast<double>(samples.size());
    r.win_rate = r.wins / n;
    r.mean_margin /= n;
    r.mean_subject_iou /= n;
    r.mean_irrelevant_iou /= n;
  }
  return r;
}

json VarianceReport::to_json() const {
  return {{"internal_variance", internal_variance}, {"mean_alignment", mean_alignment}, {"cells", cells.size()}};
}

VarianceReport evaluate_internal_variance(backbone::Backbone& bb, const disentangle::Stage1Model& stage1,
                                          const enrich::Stage2Model& stage2, const VarianceSetup& setup,
                                          const metrics::Embedders& embedders) {
  stage2.apply(bb);
  const data::ToyWorld world(bb.config.image_size);
  std::mt19937_64 rng(setup.seed);
  std::vector<int> ids(static_cast<size_t>(data::Subject::count()));
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto prompts = data::editing_prompts(data::SubjectCategory::nonlive);
  const auto n_scenes = static_cast<int>(data::ToyLexicon::scenes().size());

  VarianceReport r;
  double align_sum = 0.0;
  size_t align_n = 0;
  for (int si = 0; si < setup.n_subjects; ++si) {
    const auto subject = data::Subject::from_id(ids[static_cast<size_t>(si)]);
    const auto canonical = world.render_canonical(subject).image;
    std::vector<int> scenes(static_cast<size_t>(n_scenes));
    std::iota(scenes.begin(), scenes.end(), 0);
    std::shuffle(scenes.begin(), scenes.end(), rng);
    std::vector<enrich::EnrichedTokens> refs;
    for (int k = 0; k < setup.n_references; ++k) {
      data::ToySample s;
      do {
        s = world.render(subject, scenes[static_cast<size_t>(k % n_scenes)], world.random_pose(rng), rng);
      } while (s.mask_area_ratio() <= 0.02 || s.mask_area_ratio() >= 0.80);
      refs.push_back(enrich::condition(bb, stage1, stage2, s.image, subject.class_name()));
    }
    for (int pi = 0; pi < setup.n_prompts; ++pi) {
      const auto prompt = data::substitute_placeholder(prompts[static_cast<size_t>(pi)], subject.class_name());
      std::vector<double> cell;
      for (const auto& tokens : refs) {
        const auto img = sampler::generate_with_tokens(bb, tokens, prompt, setup.sampler);
        const double a = metrics::image_alignment(embedders, img, canonical, metrics::Space::self_supervised);
        cell.push_back(a);
        align_sum += a;
        ++align_n;
      }
      r.cells.push_back(std::move(cell));
    }
    LOG_DEBUG("variance: subject %d/%d done", si + 1, setup.n_subjects);
  }
  r.internal_variance = metrics::internal_variance(r.cells);
  r.mean_alignment = align_n == 0 ? 0.0 : align_sum / static_cast<double>(align_n);
  return r;
}

}  // namespace subjtok::evaluate
