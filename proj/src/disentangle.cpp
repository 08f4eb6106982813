#include "subjtok/disentangle.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "subjtok/checkpoint.hpp"
#include "subjtok/log.hpp"

namespace subjtok::disentangle {

namespace nn = torch::nn;
namespace F = torch::nn::functional;
using backbone::Backbone;

// ---------------------------------------------------------------------------
// Modules

RefineBlockImpl::RefineBlockImpl(int64_t dim) {
  ln1 = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  q = register_module("q", nn::Linear(dim, dim));
  k = register_module("k", nn::Linear(dim, dim));
  v = register_module("v", nn::Linear(dim, dim));
  out = register_module("out", nn::Linear(dim, dim));
  ln2 = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", nn::Linear(dim, 4 * dim));
  fc2 = register_module("fc2", nn::Linear(4 * dim, dim));
}

Tensor RefineBlockImpl::forward(const Tensor& x) {
  auto h = ln1(x);
  auto y = x + out(attention::cross_attention(q(h), k(h), v(h)));
  return y + fc2(torch::gelu(fc1(ln2(y))));
}

TokenizerImpl::TokenizerImpl(const ModelConfig& model, const Stage1Config& config)
    : n_subject_(config.n_subject), n_irrelevant_(config.n_irrelevant) {
  if (n_subject_ < 1 || n_irrelevant_ < 1) throw ConfigError("tokenizer needs n_subject >= 1 and n_irrelevant >= 1");
  const auto dq = model.feature_dim;
  const auto dk = model.feature_dim;
  const auto joint = model.joint_dim;
  subject_queries = register_parameter("subject_queries", torch::randn({n_subject_, dq}) * config.query_sigma);
  class_prior = register_module("class_prior", nn::Linear(joint, dq));
  to_q = register_module("to_q", nn::Linear(dq, dq));
  to_k = register_module("to_k", nn::Linear(dk, dq));
  refine = register_module("refine", nn::ModuleList());
  for (int64_t i = 0; i < config.refine_blocks; ++i) refine->push_back(RefineBlock(dk));
  out_norm = register_module("out_norm", nn::LayerNorm(nn::LayerNormOptions({dk})));
  out = register_module("out", nn::Linear(dk, model.text_dim));

  torch::NoGradGuard no_grad;
  to_q->weight.copy_(torch::eye(dq));
  to_q->bias.zero_();
  to_k->weight.copy_(torch::eye(dq, dk));
  to_k->bias.zero_();
  class_prior->bias.zero_();
  const auto& init = config.class_prior_init;
  if (init == "negated" || init == "identity") {
    const double sign = init == "negated" ? -1.0 : 1.0;
    class_prior->weight.copy_(sign * config.class_prior_scale * torch::eye(dq, joint));
  } else if (init != "random") {
    throw ConfigError("unknown class_prior_init '" + init + "'");
  }
}

Tensor TokenizerImpl::queries_for(const Tensor& class_embeddings) {
  const auto b = class_embeddings.size(0);
  const auto dq = subject_queries.size(1);
  auto subj = subject_queries.unsqueeze(0).expand({b, n_subject_, dq});
  auto e = F::normalize(class_embeddings, F::NormalizeFuncOptions().dim(1)) *
           std::sqrt(static_cast<double>(class_embeddings.size(1)));
  auto irr = class_prior(e).unsqueeze(1).expand({b, n_irrelevant_, dq});
  return torch::cat({subj, irr}, 1);
}

TokenizerOutput TokenizerImpl::forward(const Tensor& queries, const Tensor& features) {
  detail::expect_shape(queries.dim() == 3 && features.dim() == 3 && queries.size(0) == features.size(0),
                       "tokenizer expects queries [B,n,d_q] and features [B,L,d_k]");
  auto sa = attention::spatial_wise_attention(to_q(queries), to_k(features), features);
  auto x = sa.tokens;
  for (size_t i = 0; i < refine->size(); ++i) x = refine[i]->as<RefineBlock>()->forward(x);
  return {out(out_norm(x)), sa.tokens, sa.assignment};
}

// ---------------------------------------------------------------------------
// Stage-1 model

namespace {

std::map<std::string, Tensor> current_kv(const Backbone& bb) {
  std::map<std::string, Tensor> kv;
  for (auto [name, block] : bb.denoiser->attention_blocks()) {
    kv[name + ".to_k.weight"] = block->to_k->weight.detach().clone();
    kv[name + ".to_v.weight"] = block->to_v->weight.detach().clone();
  }
  return kv;
}

}  // namespace

Stage1Model Stage1Model::create(const Backbone& bb, const Stage1Config& config) {
  torch::manual_seed(config.seed);
  Stage1Model m;
  m.config = config;
  m.tokenizer = Tokenizer(bb.config, config);
  m.tuned_kv = current_kv(bb);
  return m;
}

void Stage1Model::save(const std::filesystem::path& dir, const Backbone& bb, const nlohmann::json& extra) const {
  Checkpoint ck;
  ck.manifest = {{"kind", "stage1"},
                 {"mode", mode},
                 {"stage1", config},
                 {"model", bb.config},
                 {"backbone_checksums", bb.checksums()}};
  for (auto& [k, v] : extra.items()) ck.manifest[k] = v;
  ck.put(*tokenizer, "tokenizer");
  for (const auto& [name, t] : tuned_kv) ck.tensors["tuned_kv." + name] = t;
  ck.save(dir);
}

Stage1Model Stage1Model::load(const std::filesystem::path& dir) {
  auto ck = Checkpoint::load(dir);
  const auto kind = ck.manifest.value("kind", "");
  if (kind != "stage1") throw ConfigError(dir.string() + " is not a stage-1 checkpoint");
  Stage1Model m;
  m.config = ck.manifest.at("stage1").get<Stage1Config>();
  m.mode = ck.manifest.value("mode", "two_stage");
  m.tokenizer = Tokenizer(ck.manifest.at("model").get<ModelConfig>(), m.config);
  ck.restore(*m.tokenizer, "tokenizer");
  const std::string prefix = "tuned_kv.";
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind(prefix, 0) == 0) m.tuned_kv[name.substr(prefix.size())] = t;
  }
  m.freeze();
  return m;
}

void Stage1Model::freeze() {
  set_requires_grad(*tokenizer, false);
  tokenizer->eval();
}

// ---------------------------------------------------------------------------
// Operations

QuerySet init_queries(const Backbone& bb, const Stage1Model& model, const std::string& class_name) {
  torch::NoGradGuard no_grad;
  auto e = bb.class_embedding(class_name);
  QuerySet qs;
  qs.queries = model.tokenizer.ptr()->queries_for(e.unsqueeze(0)).squeeze(0);
  qs.n_subject = model.tokenizer->n_subject();
  qs.n_irrelevant = model.tokenizer->n_irrelevant();
  return qs;
}

DisentangledTokens tokenize(const Backbone& bb, const Stage1Model& model, const ImageTensor& image,
                            const QuerySet& queries) {
  torch::NoGradGuard no_grad;
  auto feats = bb.encode_image(image).local;
  auto out = model.tokenizer.ptr()->forward(queries.queries.unsqueeze(0), feats.unsqueeze(0));
  return {out.tokens.squeeze(0), out.aggregated.squeeze(0), out.assignment.squeeze(0), queries.n_subject};
}

Tensor dot_product_maps(const Tensor& tokens, const Tensor& features) {
  detail::expect_shape(tokens.dim() == 2 && features.dim() == 2 && tokens.size(1) == features.size(1),
                       "dot_product_maps expects tokens [n,d] and features [L,d]");
  auto m = torch::matmul(tokens, features.t());
  auto lo = std::get<0>(m.min(1, true));
  auto hi = std::get<0>(m.max(1, true));
  auto span = hi - lo;
  auto flat = span <= 1e-12;
  return torch::where(flat, torch::zeros_like(m), (m - lo) / span.clamp_min(1e-12));
}

Tensor attention_maps(const Backbone& bb, const ImageTensor& image, const DisentangledTokens& tokens) {
  torch::NoGradGuard no_grad;
  auto feats = bb.encode_image(image).local;
  const auto g = bb.config.feature_grid();
  return dot_product_maps(tokens.aggregated, feats).view({tokens.rows(), g, g});
}

std::vector<std::filesystem::path> write_attention_maps(const std::filesystem::path& dir, const ImageTensor& image,
                                                        const Tensor& maps, int64_t n_subject) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  write_png(dir / "image.png", image);
  written.push_back(dir / "image.png");
  for (int64_t k = 0; k < maps.size(0); ++k) {
    auto up = F::interpolate(maps[k].unsqueeze(0).unsqueeze(0),
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{image.height(), image.width()})
                                 .mode(torch::kBilinear)
                                 .align_corners(false))
                  .squeeze(0)
                  .squeeze(0)
                  .clamp(0.0, 1.0);
    const auto name = k < n_subject ? "subject_" + std::to_string(k) : "irrelevant_" + std::to_string(k - n_subject);
    auto path = dir / (name + ".png");
    write_png(path, colorize_heatmap(up));
    written.push_back(path);
  }
  return written;
}

InjectedPrompt inject_tokens(const Backbone& bb, std::string_view prompt, const Tensor& token_rows) {
  const auto n = data::count_placeholders(prompt);
  if (n != 1) {
    throw PromptError("prompt must contain exactly one S*, found " + std::to_string(n) + ": '" + std::string(prompt) +
                      "'");
  }
  detail::expect_shape(token_rows.dim() == 2 && token_rows.size(1) == bb.config.text_dim,
                       "injected tokens must be [rows, text_dim]");
  auto ids = bb.token_ids(prompt);
  const auto pos = std::find(ids.begin(), ids.end(), Vocabulary::kPlaceholder) - ids.begin();
  auto emb = bb.text_encoder.ptr()->embed(ids);
  auto seq = torch::cat({emb.slice(0, 0, pos), token_rows, emb.slice(0, pos + 1)}, 0);
  if (seq.size(0) > bb.config.context_length) {
    throw PromptError("prompt with injected tokens needs " + std::to_string(seq.size(0)) + " positions, context holds " +
                      std::to_string(bb.config.context_length));
  }
  return {seq, seq.size(0) - 1};
}

InjectedPrompt inject_tokens(const Backbone& bb, std::string_view prompt, const DisentangledTokens& tokens,
                             InjectionMode mode) {
  return inject_tokens(bb, prompt, mode == InjectionMode::both ? tokens.tokens : tokens.subject());
}

InjectedPrompt plain_prompt(const Backbone& bb, std::string_view prompt) {
  if (data::count_placeholders(prompt) != 0) throw PromptError("plain prompt must not contain S*");
  auto ids = bb.token_ids(prompt);
  auto emb = bb.text_encoder.ptr()->embed(ids);
  return {emb, emb.size(0) - 1};
}

backbone::TextOutput encode_injected(const Backbone& bb, const std::vector<InjectedPrompt>& prompts) {
  std::vector<Tensor> seqs;
  std::vector<int64_t> eos;
  for (const auto& p : prompts) {
    seqs.push_back(p.embeddings);
    eos.push_back(p.eos_index);
  }
  auto te = bb.text_encoder.ptr();
  return te->forward(te->pad(seqs, eos));
}

// ---------------------------------------------------------------------------
// Training

ReconstructionBatch make_reconstruction_batch(const Backbone& bb, const Tensor& images,
                                              const data::AugmentConfig& augment, std::mt19937_64& rng) {
  return {data::augment(images, augment, rng), bb.autoencoder.encode(images)};
}

std::string frozen_checksum_stage1(const Backbone& bb) {
  std::string bytes;
  auto add = [&](const torch::nn::Module& m, const std::string& prefix, bool skip_base_kv) {
    for (const auto& p : m.named_parameters(true)) {
      const auto& name = p.key();
      if (skip_base_kv && (name.ends_with(".to_k.weight") || name.ends_with(".to_v.weight"))) continue;
      auto t = p.value().detach().contiguous().to(torch::kFloat32);
      bytes += prefix + name;
      bytes.append(static_cast<const char*>(t.data_ptr()), static_cast<size_t>(t.numel()) * sizeof(float));
    }
  };
  add(*bb.image_encoder, "image_encoder.", false);
  add(*bb.text_encoder, "text_encoder.", false);
  add(*bb.denoiser, "denoiser.", true);
  return sha256_hex(bytes);
}

void dump_nan_batch(const std::filesystem::path& dir, int64_t step, const Tensor& images,
                    const std::vector<std::string>& prompts, double loss) {
  const auto out = dir / ("step_" + std::to_string(step));
  std::filesystem::create_directories(out);
  for (int64_t i = 0; i < images.size(0); ++i) {
    write_png(out / ("image_" + std::to_string(i) + ".png"),
              ImageTensor::from_chw(torch::nan_to_num(images[i].detach(), 0.0).clamp(0.0, 1.0)));
  }
  nlohmann::json j = {{"step", step}, {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss))},
                      {"prompts", prompts}};
  std::ofstream(out / "batch.json") << j.dump(2) << "\n";
  LOG_ERROR("non-finite loss at step %ld; batch written to %s", static_cast<long>(step), out.string().c_str());
  throw TrainingError("non-finite loss at step " + std::to_string(step), out.string());
}

namespace {

Tensor class_embeddings(const Backbone& bb, const std::vector<std::string>& names,
                        std::map<std::string, Tensor>& cache) {
  torch::NoGradGuard no_grad;
  std::vector<Tensor> rows;
  for (const auto& n : names) {
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, bb.class_embedding(n)).first;
    rows.push_back(it->second);
  }
  return torch::stack(rows);
}

}  // namespace

Stage1Result train_stage1(Backbone& bb, data::PairSource& source, const Stage1Config& config,
                          const TrainOptions& options) {
  Stage1Result result;
  result.model = Stage1Model::create(bb, config);
  auto& tok = result.model.tokenizer;
  tok->train();
  result.frozen_checksum_before = frozen_checksum_stage1(bb);

  const auto original_kv = current_kv(bb);
  std::vector<Tensor> params = tok->parameters();
  for (auto [name, block] : bb.denoiser->attention_blocks()) {
    block->to_k->weight.set_requires_grad(true);
    block->to_v->weight.set_requires_grad(true);
    params.push_back(block->to_k->weight);
    params.push_back(block->to_v->weight);
  }
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::map<std::string, Tensor> class_cache;
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t step = 0; step < config.steps; ++step) {
    auto batch = source.next(config.batch, rng);
    auto rb = make_reconstruction_batch(bb, batch.images, config.augment, rng);
    Tensor feats;
    {
      torch::NoGradGuard no_grad;
      feats = bb.encode_images(rb.condition_images).local;
    }
    auto queries = tok->queries_for(class_embeddings(bb, batch.class_names, class_cache));
    auto out = tok->forward(queries, feats);

    std::vector<InjectedPrompt> prompts;
    for (int64_t i = 0; i < out.tokens.size(0); ++i) {
      if (u01(rng) < config.cond_drop) {
        prompts.push_back(plain_prompt(bb, ""));
      } else {
        prompts.push_back(inject_tokens(bb, batch.templates[static_cast<size_t>(i)], out.tokens[i]));
      }
    }
    auto context = encode_injected(bb, prompts).sequence;
    auto t = torch::randint(1, bb.schedule.steps() + 1, {rb.target_latents.size(0)}, torch::kInt64);
    auto eps = torch::randn_like(rb.target_latents);
    auto zt = bb.schedule.forward_noise(rb.target_latents, t, eps);
    auto loss = backbone::diffusion_loss(bb.denoiser->forward(zt, t, context), eps);
    const double lv = loss.item<double>();
    if (!std::isfinite(lv)) dump_nan_batch(options.dump_dir, step, batch.images, batch.templates, lv);
    opt.zero_grad();
    loss.backward();
    nn::utils::clip_grad_norm_(params, 1.0);
    opt.step();
    result.losses.push_back(lv);
    if (config.log_every > 0 && step % config.log_every == 0) {
      LOG_INFO("stage1 step %ld loss %.4f", static_cast<long>(step), lv);
    }
    if (options.time_budget > 0 &&
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() > options.time_budget) {
      LOG_WARN("stage1 stopped at step %ld: time budget reached", static_cast<long>(step));
      break;
    }
  }

  result.model.tuned_kv = current_kv(bb);
  {
    torch::NoGradGuard no_grad;
    for (auto [name, block] : bb.denoiser->attention_blocks()) {
      block->load_base_kv(original_kv.at(name + ".to_k.weight"), original_kv.at(name + ".to_v.weight"));
      block->to_k->weight.set_requires_grad(false);
      block->to_v->weight.set_requires_grad(false);
    }
  }
  result.model.freeze();
  result.frozen_checksum_after = frozen_checksum_stage1(bb);
  if (result.frozen_checksum_after != result.frozen_checksum_before) {
    LOG_ERROR("frozen backbone parameters changed during stage-1 training");
  }
  if (!options.checkpoint_dir.empty()) {
    result.model.save(options.checkpoint_dir, bb,
                      {{"frozen_checksum_before", result.frozen_checksum_before},
                       {"frozen_checksum_after", result.frozen_checksum_after},
                       {"steps_completed", result.losses.size()}});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Mask scoring

Tensor mask_to_grid(const Tensor& mask, int64_t grid) {
  auto m = mask.to(torch::kFloat32);
  if (m.dim() == 3) m = m.select(m.size(0) == 1 ? 0 : 2, 0);
  detail::expect_shape(m.dim() == 2, "mask must be [H,W]");
  return F::adaptive_avg_pool2d(m.unsqueeze(0).unsqueeze(0), F::AdaptiveAvgPool2dFuncOptions({grid, grid}))
      .squeeze(0)
      .squeeze(0);
}

double iou(const Tensor& a, const Tensor& b) {
  const auto inter = (a & b).sum().item<double>();
  const auto uni = (a | b).sum().item<double>();
  return uni == 0.0 ? 0.0 : inter / uni;
}

MaskScore score_maps(const Tensor& maps, const Tensor& mask, int64_t n_subject) {
  const auto n = maps.size(0);
  auto flat = maps.reshape({n, -1});
  const auto L = flat.size(1);
  const auto g = static_cast<int64_t>(std::lround(std::sqrt(static_cast<double>(L))));
  detail::expect_shape(g * g == L, "maps must cover a square grid");
  detail::expect_shape(n_subject >= 1 && n_subject <= n, "n_subject out of range");
  auto target = (mask_to_grid(mask, g) > 0.5).flatten();
  MaskScore s;
  double subj = 0.0;
  double irr = 0.0;
  for (int64_t k = 0; k < n; ++k) {
    const double v = iou(flat[k] >= 0.5, target);
    s.token_iou.push_back(v);
    (k < n_subject ? subj : irr) += v;
  }
  s.subject_iou = subj / static_cast<double>(n_subject);
  s.irrelevant_iou = n > n_subject ? irr / static_cast<double>(n - n_subject) : 0.0;
  return s;
}

}  // namespace subjtok::disentangle
