#include "subjtok/enrich.hpp"

#include <chrono>
#include <cmath>

#include "subjtok/checkpoint.hpp"
#include "subjtok/log.hpp"

namespace subjtok::enrich {

namespace nn = torch::nn;
using backbone::Backbone;
using disentangle::Stage1Model;

void LambdaPolicy::validate() const {
  if (!std::isfinite(subject) || !std::isfinite(irrelevant) || subject < 0.0 || irrelevant < 0.0) {
    throw ConfigError("lambda weights must be finite and non-negative");
  }
}

ProjectorImpl::ProjectorImpl(int64_t in_rows, int64_t in_dim, int64_t out_rows, int64_t out_dim, int64_t hidden_mult,
                             bool bias)
    : in_rows_(in_rows), in_dim_(in_dim), out_rows_(out_rows), out_dim_(out_dim) {
  const auto hidden = hidden_mult * out_dim;
  fc1 = register_module("fc1", nn::Linear(nn::LinearOptions(in_rows * in_dim, hidden).bias(bias)));
  fc2 = register_module("fc2", nn::Linear(nn::LinearOptions(hidden, out_rows * out_dim).bias(bias)));
}

Tensor ProjectorImpl::forward(const Tensor& x) {
  detail::expect_shape(x.dim() == 3 && x.size(1) == in_rows_ && x.size(2) == in_dim_,
                       "projector expects [B, " + std::to_string(in_rows_) + ", " + std::to_string(in_dim_) + "]");
  auto h = torch::gelu(fc1(x.reshape({x.size(0), in_rows_ * in_dim_})));
  return fc2(h).view({x.size(0), out_rows_, out_dim_});
}

EnrichmentImpl::EnrichmentImpl(const ModelConfig& model, const Stage2Config& config, int64_t n_subject,
                               int64_t n_irrelevant)
    : global_(config.conditioning == "global") {
  if (!global_ && config.conditioning != "disentangled") {
    throw ConfigError("unknown conditioning '" + config.conditioning + "'");
  }
  if (config.n_enriched_subject < 1 || config.n_enriched_irrelevant < 1) {
    throw ConfigError("enriched token counts must be positive");
  }
  const auto d = model.text_dim;
  if (global_) {
    subject = register_module("subject", Projector(1, model.joint_dim, config.n_enriched_subject, d,
                                                   config.projector_hidden_mult, config.projector_bias));
    return;
  }
  subject = register_module("subject", Projector(n_subject, d, config.n_enriched_subject, d,
                                                 config.projector_hidden_mult, config.projector_bias));
  irrelevant = register_module("irrelevant", Projector(n_irrelevant, d, config.n_enriched_irrelevant, d,
                                                       config.projector_hidden_mult, config.projector_bias));
}

EnrichedTokens EnrichmentImpl::forward(const Tensor& subject_tokens, const Tensor& irrelevant_tokens) {
  EnrichedTokens out;
  out.subject = subject(subject_tokens);
  if (!global_) {
    if (!irrelevant_tokens.defined()) throw ShapeError("irrelevant tokens required");
    out.irrelevant = irrelevant(irrelevant_tokens);
  }
  return out;
}

EnrichedTokens enrich(const Enrichment& enrichment, const disentangle::DisentangledTokens& tokens) {
  auto e = enrichment.ptr();
  if (e->global_baseline()) throw ConfigError("global-feature projector does not take disentangled tokens");
  detail::expect_shape(tokens.tokens.dim() == 2, "tokens must be [n, d]");
  const auto n_s = tokens.n_subject;
  const auto n_i = tokens.rows() - n_s;
  if (n_s != e->subject->in_rows() || n_i != e->irrelevant->in_rows()) {
    throw ShapeError("token rows (" + std::to_string(n_s) + "+" + std::to_string(n_i) + ") do not match projectors (" +
                     std::to_string(e->subject->in_rows()) + "+" + std::to_string(e->irrelevant->in_rows()) + ")");
  }
  auto out = e->forward(tokens.subject().unsqueeze(0), tokens.irrelevant().unsqueeze(0));
  return {out.subject.squeeze(0), out.irrelevant.squeeze(0)};
}

int install_decoupled_branches(backbone::Denoiser& denoiser) {
  const int added = denoiser->install_branches();
  for (auto& p : denoiser->named_parameters(true)) {
    if (p.key().find("_subject.") != std::string::npos || p.key().find("_irrelevant.") != std::string::npos) {
      p.value().set_requires_grad(false);
    }
  }
  return added;
}

namespace {

bool is_branch(const std::string& name) {
  return name.find("_subject.") != std::string::npos || name.find("_irrelevant.") != std::string::npos;
}

std::vector<Tensor> branch_parameters(backbone::Denoiser& denoiser) {
  std::vector<Tensor> out;
  for (auto& p : denoiser->named_parameters(true)) {
    if (is_branch(p.key())) out.push_back(p.value());
  }
  return out;
}

}  // namespace

std::map<std::string, Tensor> branch_weights(const backbone::Denoiser& denoiser) {
  std::map<std::string, Tensor> out;
  for (const auto& p : denoiser.ptr()->named_parameters(true)) {
    if (is_branch(p.key())) out[p.key()] = p.value().detach().clone();
  }
  return out;
}

std::string frozen_checksum_stage2(const Backbone& bb) {
  std::string bytes;
  auto add = [&](const nn::Module& m, const std::string& prefix) {
    for (const auto& p : m.named_parameters(true)) {
      if (is_branch(p.key())) continue;
      auto t = p.value().detach().contiguous().to(torch::kFloat32);
      bytes += prefix + p.key();
      bytes.append(static_cast<const char*>(t.data_ptr()), static_cast<size_t>(t.numel()) * sizeof(float));
    }
  };
  add(*bb.image_encoder, "image_encoder.");
  add(*bb.text_encoder, "text_encoder.");
  add(*bb.denoiser, "denoiser.");
  return sha256_hex(bytes);
}

// ---------------------------------------------------------------------------

Stage2Model Stage2Model::create(const Backbone& bb, const Stage2Config& config, int64_t n_subject,
                                int64_t n_irrelevant) {
  torch::manual_seed(config.seed);
  Stage2Model m;
  m.config = config;
  m.enrichment = Enrichment(bb.config, config, n_subject, n_irrelevant);
  return m;
}

void Stage2Model::save(const std::filesystem::path& dir, const Backbone& bb, const nlohmann::json& extra) const {
  Checkpoint ck;
  const auto& e = *enrichment;
  ck.manifest = {{"kind", "stage2"},
                 {"mode", mode},
                 {"stage2", config},
                 {"model", bb.config},
                 {"n_subject", e.global_baseline() ? 1 : e.subject->in_rows()},
                 {"n_irrelevant", e.global_baseline() ? 1 : e.irrelevant->in_rows()},
                 {"backbone_checksums", bb.checksums()}};
  if (joint_stage1) ck.manifest["stage1"] = joint_stage1->config;
  for (auto& [k, v] : extra.items()) ck.manifest[k] = v;
  ck.put(e, "enrichment");
  for (const auto& [name, t] : branches) ck.tensors["branches." + name] = t;
  if (joint_stage1) ck.put(*joint_stage1->tokenizer, "tokenizer");
  ck.save(dir);
}

Stage2Model Stage2Model::load(const std::filesystem::path& dir) {
  auto ck = Checkpoint::load(dir);
  if (ck.manifest.value("kind", "") != "stage2") throw ConfigError(dir.string() + " is not a stage-2 checkpoint");
  const auto model = ck.manifest.at("model").get<ModelConfig>();
  Stage2Model m;
  m.config = ck.manifest.at("stage2").get<Stage2Config>();
  m.mode = ck.manifest.value("mode", "two_stage");
  m.enrichment = Enrichment(model, m.config, ck.manifest.at("n_subject").get<int64_t>(),
                            ck.manifest.at("n_irrelevant").get<int64_t>());
  ck.restore(*m.enrichment, "enrichment");
  const std::string prefix = "branches.";
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind(prefix, 0) == 0) m.branches[name.substr(prefix.size())] = t;
  }
  if (ck.manifest.contains("stage1")) {
    Stage1Model s1;
    s1.config = ck.manifest.at("stage1").get<Stage1Config>();
    s1.mode = m.mode;
    s1.tokenizer = disentangle::Tokenizer(model, s1.config);
    ck.restore(*s1.tokenizer, "tokenizer");
    s1.freeze();
    m.joint_stage1 = std::move(s1);
  }
  m.freeze();
  return m;
}

void Stage2Model::apply(Backbone& bb) const {
  if (!bb.denoiser->has_branches()) install_decoupled_branches(bb.denoiser);
  torch::NoGradGuard no_grad;
  auto params = bb.denoiser->named_parameters(true);
  for (const auto& [name, t] : branches) {
    auto* p = params.find(name);
    if (p == nullptr) throw ConfigError("denoiser has no branch parameter '" + name + "'");
    detail::expect_shape(p->sizes() == t.sizes(), "branch weight '" + name + "' has the wrong shape");
    p->copy_(t);
  }
}

void Stage2Model::freeze() {
  set_requires_grad(*enrichment, false);
  enrichment->eval();
}

EnrichedTokens condition(const Backbone& bb, const Stage1Model& stage1, const Stage2Model& stage2,
                         const ImageTensor& image, const std::string& class_name) {
  torch::NoGradGuard no_grad;
  auto e = stage2.enrichment.ptr();
  if (e->global_baseline()) {
    auto g = bb.encode_image(image).global;
    auto out = e->forward(g.view({1, 1, -1}), Tensor());
    return {out.subject.squeeze(0), Tensor()};
  }
  const auto& s1 = stage2.joint_stage1 ? *stage2.joint_stage1 : stage1;
  auto tokens = disentangle::tokenize(bb, s1, image, disentangle::init_queries(bb, s1, class_name));
  return enrich(stage2.enrichment, tokens);
}

// ---------------------------------------------------------------------------
// Training

namespace {

Stage2Result run(Backbone& bb, Stage1Model& stage1, bool train_tokenizer, data::PairSource& source,
                 Stage2Model model, const disentangle::TrainOptions& options) {
  const auto& config = model.config;
  Stage2Result result;
  install_decoupled_branches(bb.denoiser);
  result.frozen_checksum_before = frozen_checksum_stage2(bb);
  result.stage1_checksum_before = parameter_checksum(*stage1.tokenizer);

  auto enrichment = model.enrichment;
  enrichment->train();
  const bool global = enrichment->global_baseline();
  std::vector<Tensor> params = enrichment->parameters();
  for (auto& p : branch_parameters(bb.denoiser)) {
    p.set_requires_grad(true);
    params.push_back(p);
  }
  if (train_tokenizer) {
    set_requires_grad(*stage1.tokenizer, true);
    stage1.tokenizer->train();
    for (auto& p : stage1.tokenizer->parameters()) params.push_back(p);
  }
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));

  const auto n_s = stage1.tokenizer->n_subject();
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::map<std::string, Tensor> class_cache;
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t step = 0; step < config.steps; ++step) {
    auto batch = source.next(config.batch, rng);
    auto rb = disentangle::make_reconstruction_batch(bb, batch.images, config.augment, rng);
    const auto B = rb.target_latents.size(0);

    EnrichedTokens enriched;
    if (global) {
      Tensor g;
      {
        torch::NoGradGuard no_grad;
        g = bb.encode_images(rb.condition_images).global;
      }
      enriched = enrichment->forward(g.unsqueeze(1), Tensor());
    } else {
      Tensor feats;
      Tensor ce;
      {
        torch::NoGradGuard no_grad;
        feats = bb.encode_images(rb.condition_images).local;
        std::vector<Tensor> rows;
        for (const auto& n : batch.class_names) {
          auto it = class_cache.find(n);
          if (it == class_cache.end()) it = class_cache.emplace(n, bb.class_embedding(n)).first;
          rows.push_back(it->second);
        }
        ce = torch::stack(rows);
      }
      Tensor tokens;
      if (train_tokenizer) {
        tokens = stage1.tokenizer->forward(stage1.tokenizer->queries_for(ce), feats).tokens;
      } else {
        torch::NoGradGuard no_grad;
        tokens = stage1.tokenizer->forward(stage1.tokenizer->queries_for(ce), feats).tokens;
      }
      enriched = enrichment->forward(tokens.slice(1, 0, n_s), tokens.slice(1, n_s));
    }

    std::vector<std::string> prompts;
    std::vector<float> keep(static_cast<size_t>(B), 1.0F);
    for (int64_t i = 0; i < B; ++i) {
      const auto idx = static_cast<size_t>(i);
      if (u01(rng) < config.cond_drop) {
        prompts.emplace_back();
        keep[idx] = 0.0F;
      } else {
        prompts.push_back(data::substitute_placeholder(batch.templates[idx], batch.class_names[idx]));
      }
    }
    auto keep_t = torch::tensor(keep).view({B, 1, 1});
    attention::BranchTokens branches;
    branches.subject = enriched.subject * keep_t;
    branches.lambda_subject = 1.0;
    if (!global) {
      branches.irrelevant = enriched.irrelevant * keep_t;
      branches.lambda_irrelevant = 1.0;
    } else {
      branches.lambda_irrelevant = 0.0;
    }
    Tensor context;
    {
      torch::NoGradGuard no_grad;
      context = bb.encode_prompts(prompts).sequence;
    }
    auto t = torch::randint(1, bb.schedule.steps() + 1, {B}, torch::kInt64);
    auto eps = torch::randn_like(rb.target_latents);
    auto zt = bb.schedule.forward_noise(rb.target_latents, t, eps);
    auto loss = backbone::diffusion_loss(bb.denoiser->forward(zt, t, context, &branches), eps);
    const double lv = loss.item<double>();
    if (!std::isfinite(lv)) disentangle::dump_nan_batch(options.dump_dir, step, batch.images, prompts, lv);
    opt.zero_grad();
    loss.backward();
    nn::utils::clip_grad_norm_(params, 1.0);
    opt.step();
    result.losses.push_back(lv);
    if (config.log_every > 0 && step % config.log_every == 0) {
      LOG_INFO("%s step %ld loss %.4f", model.mode.c_str(), static_cast<long>(step), lv);
    }
    if (options.time_budget > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() > options.time_budget) {
      LOG_WARN("%s stopped at step %ld: time budget reached", model.mode.c_str(), static_cast<long>(step));
      break;
    }
  }

  for (auto& p : branch_parameters(bb.denoiser)) p.set_requires_grad(false);
  stage1.freeze();
  model.branches = branch_weights(bb.denoiser);
  model.freeze();
  result.frozen_checksum_after = frozen_checksum_stage2(bb);
  result.stage1_checksum_after = parameter_checksum(*stage1.tokenizer);
  if (result.frozen_checksum_after != result.frozen_checksum_before) {
    LOG_ERROR("frozen backbone parameters changed during %s training", model.mode.c_str());
  }
  if (!train_tokenizer && result.stage1_checksum_after != result.stage1_checksum_before) {
    LOG_ERROR("stage-1 parameters changed during stage-2 training");
  }
  if (!options.checkpoint_dir.empty()) {
    model.save(options.checkpoint_dir, bb,
               {{"frozen_checksum_before", result.frozen_checksum_before},
                {"frozen_checksum_after", result.frozen_checksum_after},
                {"steps_completed", result.losses.size()}});
  }
  result.model = std::move(model);
  return result;
}

}  // namespace

Stage2Result train_stage2(Backbone& bb, const Stage1Model& stage1, data::PairSource& source,
                          const Stage2Config& config, const disentangle::TrainOptions& options) {
  auto s1 = stage1;
  auto model = Stage2Model::create(bb, config, stage1.tokenizer->n_subject(), stage1.tokenizer->n_irrelevant());
  return run(bb, s1, false, source, std::move(model), options);
}

Stage2Result single_stage_ablation_train(Backbone& bb, data::PairSource& source, const Stage1Config& stage1,
                                         const Stage2Config& config, const disentangle::TrainOptions& options) {
  if (config.conditioning != "disentangled") throw ConfigError("single-stage ablation needs disentangled conditioning");
  auto s1 = Stage1Model::create(bb, stage1);
  s1.mode = "single_stage";
  s1.tuned_kv.clear();
  auto model = Stage2Model::create(bb, config, stage1.n_subject, stage1.n_irrelevant);
  model.mode = "single_stage";
  model.joint_stage1 = s1;
  return run(bb, s1, true, source, std::move(model), options);
}

}  // namespace subjtok::enrich
