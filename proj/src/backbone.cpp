#include "subjtok/backbone.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "subjtok/log.hpp"

#include "subjtok/data.hpp"

namespace subjtok::backbone {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// NoiseSchedule

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("noise schedule needs at least one step");
  alpha_bar_.resize(betas_.size() + 1);
  alpha_bar_[0] = 1.0;
  for (size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] >= 0.0 && betas_[i] <= 1.0)) throw ConfigError("betas must lie in [0, 1]");
    alpha_bar_[i + 1] = alpha_bar_[i] * (1.0 - betas_[i]);
  }
}

NoiseSchedule NoiseSchedule::linear(int64_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  std::vector<double> betas(static_cast<size_t>(steps));
  for (int64_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) { return NoiseSchedule(std::move(betas)); }

double NoiseSchedule::alpha_bar(int64_t t) const {
  if (t < 0 || t > steps()) throw ConfigError("timestep " + std::to_string(t) + " outside [0, T]");
  return alpha_bar_[static_cast<size_t>(t)];
}

Tensor NoiseSchedule::alpha_bar_table() const {
  std::vector<float> v(alpha_bar_.begin(), alpha_bar_.end());
  return torch::tensor(v);
}

Tensor NoiseSchedule::forward_noise(const Tensor& z0, int64_t t, const Tensor& noise) const {
  if (t < 1 || t > steps()) throw ConfigError("timestep " + std::to_string(t) + " outside [1, T]");
  detail::expect_shape(z0.sizes() == noise.sizes(), "forward_noise: latent and noise shapes differ");
  const double ab = alpha_bar_[static_cast<size_t>(t)];
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * noise;
}

Tensor NoiseSchedule::forward_noise(const Tensor& z0, const Tensor& t, const Tensor& noise) const {
  detail::expect_shape(z0.sizes() == noise.sizes(), "forward_noise: latent and noise shapes differ");
  detail::expect_shape(t.dim() == 1 && t.size(0) == z0.size(0), "forward_noise: one step per sample");
  if (t.min().item<int64_t>() < 1 || t.max().item<int64_t>() > steps()) {
    throw ConfigError("forward_noise: timestep outside [1, T]");
  }
  std::vector<int64_t> view(static_cast<size_t>(z0.dim()), 1);
  view[0] = z0.size(0);
  auto ab = alpha_bar_table().to(z0.device()).index_select(0, t).view(view);
  return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise;
}

Tensor NoiseSchedule::ddim_step(const Tensor& z_t, const Tensor& eps, int64_t t, int64_t t_prev) const {
  const double ab = alpha_bar(t);
  const double ab_prev = alpha_bar(t_prev);
  auto x0 = (z_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
  return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
}

std::vector<int64_t> NoiseSchedule::ddim_timesteps(int64_t n) const {
  if (n < 1) throw ConfigError("sampler needs at least one step");
  n = std::min(n, steps());
  std::vector<int64_t> ts;
  ts.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) ts.push_back(steps() - (i * steps()) / n);
  return ts;
}

Tensor diffusion_loss(const Tensor& eps_pred, const Tensor& eps) { return (eps_pred - eps).pow(2).mean(); }

// ---------------------------------------------------------------------------
// Image encoder

ImageEncoderImpl::ImageEncoderImpl(const ModelConfig& config) : config_(config) {
  const auto f = config.feature_dim;
  if (config.feature_dim != config.joint_dim) {
    throw ConfigError("toy image encoder shares one space for local and pooled features (feature_dim == joint_dim)");
  }
  patch = register_module("patch", nn::Conv2d(nn::Conv2dOptions(3, f, config.patch_size).stride(config.patch_size)));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(f, f, 3).padding(1)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(f, f, 3).padding(1)));
  norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({f})));
  proj = register_module("proj", nn::Linear(f, config.joint_dim));
}

ImageFeatures ImageEncoderImpl::forward(const Tensor& images) {
  detail::expect_shape(images.dim() == 4 && images.size(1) == 3, "image encoder expects [B,3,H,W]");
  if (images.size(2) != config_.image_size || images.size(3) != config_.image_size) {
    throw ConfigError("image is " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                      ", encoder expects " + std::to_string(config_.image_size) + "x" +
                      std::to_string(config_.image_size));
  }
  auto x = (images - 0.5) / 0.25;
  auto h0 = torch::gelu(patch(x));
  auto h1 = h0 + torch::gelu(conv1(h0));
  auto h2 = h1 + torch::gelu(conv2(h1));
  auto tokens = [&](const Tensor& h) { return proj(norm(h.flatten(2).transpose(1, 2))); };
  auto final_local = tokens(h2);
  ImageFeatures out;
  out.local = config_.image_feature_layer == "penultimate" ? tokens(h1) : final_local;
  out.global = final_local.mean(1);
  return out;
}

// ---------------------------------------------------------------------------
// Text encoder

TextEncoderImpl::TextEncoderImpl(const ModelConfig& config, int64_t vocab_size) : config_(config) {
  const auto d = config.text_dim;
  token = register_module("token", nn::Embedding(vocab_size, d));
  position = register_parameter("position", torch::randn({config.context_length, d}) * 0.02);
  for (int64_t i = 0; i < config.text_layers; ++i) {
    Layer l;
    const auto p = "layer" + std::to_string(i) + "_";
    l.ln1 = register_module(p + "ln1", nn::LayerNorm(nn::LayerNormOptions({d})));
    l.ln2 = register_module(p + "ln2", nn::LayerNorm(nn::LayerNormOptions({d})));
    l.qkv = register_module(p + "qkv", nn::Linear(d, 3 * d));
    l.out = register_module(p + "out", nn::Linear(d, d));
    l.fc1 = register_module(p + "fc1", nn::Linear(d, 4 * d));
    l.fc2 = register_module(p + "fc2", nn::Linear(4 * d, d));
    layers_.push_back(l);
  }
  final_norm = register_module("final_norm", nn::LayerNorm(nn::LayerNormOptions({d})));
  proj = register_module("proj", nn::Linear(d, config.joint_dim));
}

Tensor TextEncoderImpl::embed(const std::vector<int64_t>& ids) {
  return token(torch::tensor(ids, torch::kInt64));
}

TextBatch TextEncoderImpl::pad(const std::vector<Tensor>& sequences, const std::vector<int64_t>& eos_index) {
  detail::expect_shape(sequences.size() == eos_index.size(), "one eos index per sequence");
  const auto ctx = config_.context_length;
  auto pad_row = token(torch::tensor({Vocabulary::kPad}, torch::kInt64));
  std::vector<Tensor> rows;
  rows.reserve(sequences.size());
  for (const auto& s : sequences) {
    const auto n = s.size(0);
    if (n > ctx) {
      throw PromptError("prompt needs " + std::to_string(n) + " tokens, context holds " + std::to_string(ctx));
    }
    rows.push_back(n == ctx ? s : torch::cat({s, pad_row.expand({ctx - n, s.size(1)})}, 0));
  }
  return {torch::stack(rows), torch::tensor(eos_index, torch::kInt64)};
}

TextOutput TextEncoderImpl::forward(const TextBatch& batch) {
  const auto b = batch.embeddings.size(0);
  const auto n = batch.embeddings.size(1);
  const auto d = config_.text_dim;
  const auto heads = config_.text_heads;
  auto x = batch.embeddings + position.slice(0, 0, n).unsqueeze(0);
  auto causal = torch::ones({n, n}, torch::kBool).triu(1);
  for (auto& l : layers_) {
    auto qkv = l.qkv(l.ln1(x)).chunk(3, -1);
    auto q = attention::split_heads(qkv[0], heads);
    auto k = attention::split_heads(qkv[1], heads);
    auto v = attention::split_heads(qkv[2], heads);
    auto logits = torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(d / heads));
    logits = logits.masked_fill(causal, -1e9);
    x = x + l.out(attention::merge_heads(torch::matmul(torch::softmax(logits, -1), v)));
    x = x + l.fc2(torch::gelu(l.fc1(l.ln2(x))));
  }
  x = final_norm(x);
  auto idx = batch.eos_index.view({b, 1, 1}).expand({b, 1, d});
  auto eos = x.gather(1, idx).squeeze(1);
  return {x, proj(eos)};
}

// ---------------------------------------------------------------------------
// Latent autoencoder

Tensor LatentAutoencoder::encode(const Tensor& images) const {
  detail::expect_shape(images.dim() == 4, "autoencoder expects [B,C,H,W]");
  return F::pixel_unshuffle(images * 2.0 - 1.0, F::PixelUnshuffleFuncOptions(factor_));
}

Tensor LatentAutoencoder::decode(const Tensor& latents) const {
  return ((F::pixel_shuffle(latents, F::PixelShuffleFuncOptions(factor_)) + 1.0) * 0.5).clamp(0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Denoiser

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t time_dim) {
  norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(8, in)));
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)));
  time = register_module("time", nn::Linear(time_dim, out));
  norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(8, out)));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
  if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

Tensor ResBlockImpl::forward(const Tensor& x, const Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip.is_empty() ? x : skip(x)) + h;
}

Tensor timestep_embedding(const Tensor& t, int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half))
                   .to(t.device());
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

DenoiserImpl::DenoiserImpl(const ModelConfig& config) : config_(config) {
  const auto& ch = config.unet_channels;
  const auto c0 = ch.front();
  time_dim_ = 4 * c0;
  time1 = register_module("time1", nn::Linear(c0, time_dim_));
  time2 = register_module("time2", nn::Linear(time_dim_, time_dim_));
  conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(config.latent_channels(), c0, 3).padding(1)));
  down_res = register_module("down_res", nn::ModuleList());
  down_attn = register_module("down_attn", nn::ModuleList());
  downsample = register_module("downsample", nn::ModuleList());
  up_conv = register_module("up_conv", nn::ModuleList());
  up_res = register_module("up_res", nn::ModuleList());
  up_attn = register_module("up_attn", nn::ModuleList());
  int64_t prev = c0;
  for (size_t i = 0; i < ch.size(); ++i) {
    down_res->push_back(ResBlock(prev, ch[i], time_dim_));
    down_attn->push_back(attention::CrossAttentionBlock(ch[i], config.text_dim, config.attn_dim, config.attn_heads));
    down_names_.push_back(i + 1 == ch.size() ? "mid.attn" : "down" + std::to_string(i) + ".attn");
    if (i + 1 < ch.size()) downsample->push_back(nn::Conv2d(nn::Conv2dOptions(ch[i], ch[i], 3).stride(2).padding(1)));
    prev = ch[i];
  }
  for (size_t j = ch.size() - 1; j-- > 0;) {
    up_conv->push_back(nn::Conv2d(nn::Conv2dOptions(ch[j + 1], ch[j], 3).padding(1)));
    up_res->push_back(ResBlock(2 * ch[j], ch[j], time_dim_));
    up_attn->push_back(attention::CrossAttentionBlock(ch[j], config.text_dim, config.attn_dim, config.attn_heads));
    up_names_.push_back("up" + std::to_string(j) + ".attn");
  }
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(8, c0)));
  conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(c0, config.latent_channels(), 3).padding(1)));
  torch::NoGradGuard no_grad;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

Tensor DenoiserImpl::forward(const Tensor& z_t, const Tensor& t, const Tensor& context,
                             const attention::BranchTokens* branches) {
  if (torch::GradMode::is_enabled()) ++grad_enabled_calls_;
  auto temb = time2(torch::silu(time1(timestep_embedding(t, config_.unet_channels.front()).to(z_t.scalar_type()))));
  auto h = conv_in(z_t);
  std::vector<Tensor> skips;
  const auto levels = down_res->size();
  for (size_t i = 0; i < levels; ++i) {
    h = down_res[i]->as<ResBlock>()->forward(h, temb);
    h = down_attn[i]->as<attention::CrossAttentionBlock>()->forward(h, context, branches);
    if (i + 1 < levels) {
      skips.push_back(h);
      h = downsample[i]->as<nn::Conv2d>()->forward(h);
    }
  }
  for (size_t j = 0; j < up_res->size(); ++j) {
    h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    h = up_conv[j]->as<nn::Conv2d>()->forward(h);
    h = torch::cat({h, skips.back()}, 1);
    skips.pop_back();
    h = up_res[j]->as<ResBlock>()->forward(h, temb);
    h = up_attn[j]->as<attention::CrossAttentionBlock>()->forward(h, context, branches);
  }
  return conv_out(torch::silu(norm_out(h)));
}

std::vector<std::pair<std::string, attention::CrossAttentionBlock>> DenoiserImpl::attention_blocks() const {
  std::vector<std::pair<std::string, attention::CrossAttentionBlock>> out;
  for (size_t i = 0; i < down_attn->size(); ++i) {
    out.emplace_back(down_names_[i], attention::CrossAttentionBlock(down_attn->ptr<attention::CrossAttentionBlockImpl>(i)));
  }
  for (size_t j = 0; j < up_attn->size(); ++j) {
    out.emplace_back(up_names_[j], attention::CrossAttentionBlock(up_attn->ptr<attention::CrossAttentionBlockImpl>(j)));
  }
  return out;
}

int DenoiserImpl::install_branches() {
  int added = 0;
  for (auto& [name, block] : attention_blocks()) {
    if (block->install_branches()) ++added;
  }
  if (added == 0) LOG_WARN("decoupled branches already installed; nothing to do");
  return added;
}

bool DenoiserImpl::has_branches() const {
  const auto blocks = attention_blocks();
  return !blocks.empty() && std::all_of(blocks.begin(), blocks.end(), [](const auto& b) { return b.second->has_branches(); });
}

// ---------------------------------------------------------------------------
// Backbone bundle

std::shared_ptr<Backbone> Backbone::create(const ModelConfig& config, uint64_t seed) {
  config.validate();
  if (config.profile == "pretrained") {
    if (!std::filesystem::exists(std::filesystem::path(config.pretrained_weights) / "manifest.json")) {
      throw ConfigError("pretrained weights not found at '" + config.pretrained_weights + "'");
    }
    return load(config.pretrained_weights);
  }
  torch::manual_seed(seed);
  auto bb = std::make_shared<Backbone>();
  bb->config = config;
  bb->image_encoder = ImageEncoder(config);
  bb->text_encoder = TextEncoder(config, bb->vocab.size());
  bb->denoiser = Denoiser(config);
  bb->autoencoder = LatentAutoencoder(config.latent_factor);
  bb->schedule = NoiseSchedule::linear(config.schedule_steps, config.beta_start, config.beta_end);
  return bb;
}

void Backbone::save(const std::filesystem::path& dir, const nlohmann::json& extra) const {
  Checkpoint ck;
  ck.manifest = {{"kind", "backbone"},
                 {"profile", config.profile},
                 {"model", config},
                 {"vocabulary", vocab.words()},
                 {"schedule", {{"type", "linear"}, {"steps", schedule.steps()},
                               {"beta_start", config.beta_start}, {"beta_end", config.beta_end},
                               {"alpha_bar_T", schedule.alpha_bar(schedule.steps())}}},
                 {"autoencoder", {{"type", "space_to_depth"}, {"factor", autoencoder.factor()},
                                  {"latent_channels", config.latent_channels()},
                                  {"reconstruction_tolerance", LatentAutoencoder::kReconstructionTolerance}}},
                 {"checksums", checksums()}};
  for (auto& [k, v] : extra.items()) ck.manifest[k] = v;
  ck.put(*image_encoder, "image_encoder");
  ck.put(*text_encoder, "text_encoder");
  ck.put(*denoiser, "denoiser");
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, t] : ck.tensors) shapes[name] = t.sizes().vec();
  ck.manifest["shapes"] = shapes;
  ck.save(dir);
}

std::shared_ptr<Backbone> Backbone::load(const std::filesystem::path& dir) {
  auto ck = Checkpoint::load(dir);
  if (ck.manifest.value("kind", "") != "backbone") throw ConfigError(dir.string() + " is not a backbone checkpoint");
  auto config = ck.manifest.at("model").get<ModelConfig>();
  config.profile = "toy";
  auto bb = create(config, 0);
  bb->config.profile = ck.manifest.value("profile", "toy");
  bb->vocab = Vocabulary(ck.manifest.at("vocabulary").get<std::vector<std::string>>());
  if (bb->vocab.size() != Vocabulary::toy().size()) bb->text_encoder = TextEncoder(config, bb->vocab.size());
  ck.restore(*bb->image_encoder, "image_encoder");
  ck.restore(*bb->text_encoder, "text_encoder");
  ck.restore(*bb->denoiser, "denoiser");
  bb->freeze();
  return bb;
}

void Backbone::freeze() {
  for (torch::nn::Module* m : std::initializer_list<torch::nn::Module*>{image_encoder.get(), text_encoder.get(), denoiser.get()}) {
    set_requires_grad(*m, false);
    m->eval();
  }
}

std::map<std::string, std::string> Backbone::checksums() const {
  return {{"image_encoder", parameter_checksum(*image_encoder)},
          {"text_encoder", parameter_checksum(*text_encoder)},
          {"denoiser", parameter_checksum(*denoiser)}};
}

Tensor Backbone::to_chw_batch(const std::vector<ImageTensor>& images) const {
  std::vector<Tensor> chw;
  chw.reserve(images.size());
  for (const auto& im : images) chw.push_back(im.chw());
  return torch::stack(chw);
}

ImageFeatures Backbone::encode_images(const Tensor& images) const { return image_encoder.ptr()->forward(images); }

ImageFeatures Backbone::encode_image(const ImageTensor& image) const {
  if (image.channels() != 3) throw ConfigError("image encoder expects 3 channels");
  auto f = image_encoder.ptr()->forward(image.chw().unsqueeze(0));
  return {f.local.squeeze(0), f.global.squeeze(0)};
}

std::vector<int64_t> Backbone::token_ids(std::string_view prompt) const { return vocab.encode(prompt); }

TextOutput Backbone::encode_prompts(const std::vector<std::string>& prompts) const {
  std::vector<Tensor> seqs;
  std::vector<int64_t> eos;
  for (const auto& p : prompts) {
    if (data::count_placeholders(p) != 0) throw PromptError("plain prompt must not contain S*: '" + p + "'");
    auto ids = token_ids(p);
    eos.push_back(static_cast<int64_t>(ids.size()) - 1);
    seqs.push_back(text_encoder.ptr()->embed(ids));
  }
  auto te = text_encoder.ptr();
  return te->forward(te->pad(seqs, eos));
}

Tensor Backbone::class_embedding(const std::string& class_name) const {
  auto ids = vocab.encode_strict(class_name);
  auto te = text_encoder.ptr();
  auto out = te->forward(te->pad({te->embed(ids)}, {static_cast<int64_t>(ids.size()) - 1}));
  return out.pooled.squeeze(0);
}

// ---------------------------------------------------------------------------
// Toy backbone training

namespace {

struct CaptionedBatch {
  Tensor images;
  Tensor masks;  // [B, H, W]
  std::vector<std::string> captions;
  std::vector<std::string> subject_text;
  std::vector<std::string> scene_text;
};

CaptionedBatch sample_batch(const data::ToyWorld& world, int64_t n, std::mt19937_64& rng) {
  CaptionedBatch b;
  std::vector<Tensor> imgs;
  std::vector<Tensor> masks;
  for (int64_t i = 0; i < n; ++i) {
    auto s = world.random_sample(rng);
    imgs.push_back(s.image.chw());
    masks.push_back(s.mask.to(torch::kFloat32));
    b.captions.push_back(s.caption);
    b.subject_text.push_back("a " + s.subject.description());
    b.scene_text.emplace_back(data::ToyLexicon::scene_phrase(static_cast<size_t>(s.scene)));
  }
  b.images = torch::stack(imgs);
  b.masks = torch::stack(masks);
  return b;
}

Tensor symmetric_clip_loss(const Tensor& a, const Tensor& b, const Tensor& logit_scale) {
  auto x = F::normalize(a, F::NormalizeFuncOptions().dim(1));
  auto y = F::normalize(b, F::NormalizeFuncOptions().dim(1));
  auto logits = logit_scale.exp().clamp_max(100.0) * torch::matmul(x, y.t());
  auto labels = torch::arange(x.size(0), torch::kInt64);
  return 0.5 * (F::cross_entropy(logits, labels) + F::cross_entropy(logits.t(), labels));
}

/// Mask-weighted mean of local features: [B, L, d] x [B, H, W] -> [B, d].
Tensor region_pool(const Tensor& local, const Tensor& masks) {
  const auto g = static_cast<int64_t>(std::lround(std::sqrt(static_cast<double>(local.size(1)))));
  auto w = F::adaptive_avg_pool2d(masks.unsqueeze(1), F::AdaptiveAvgPool2dFuncOptions({g, g})).flatten(1);
  return (local * w.unsqueeze(-1)).sum(1) / (w.sum(1, true) + 1e-6);
}

}  // namespace

std::shared_ptr<Backbone> train_toy_backbone(const ModelConfig& model, const BackboneTrainConfig& config,
                                             BackboneTrainReport* report) {
  auto bb = Backbone::create(model, config.seed);
  const data::ToyWorld world(model.image_size);
  std::mt19937_64 rng(config.seed);
  const auto t0 = std::chrono::steady_clock::now();

  {
    auto logit_scale = torch::full({1}, std::log(1.0 / 0.07), torch::requires_grad());
    std::vector<Tensor> params = bb->image_encoder->parameters();
    for (auto& p : bb->text_encoder->parameters()) params.push_back(p);
    params.push_back(logit_scale);
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(config.encoder_lr).weight_decay(0.01));
    for (int64_t step = 0; step < config.encoder_steps; ++step) {
      auto batch = sample_batch(world, config.encoder_batch, rng);
      auto feats = bb->image_encoder->forward(batch.images);
      auto loss = symmetric_clip_loss(feats.global, bb->encode_prompts(batch.captions).pooled, logit_scale);
      if (config.region_weight > 0) {
        auto regions = torch::cat({region_pool(feats.local, batch.masks), region_pool(feats.local, 1.0 - batch.masks)}, 0);
        auto texts = batch.subject_text;
        texts.insert(texts.end(), batch.scene_text.begin(), batch.scene_text.end());
        loss = loss + config.region_weight * symmetric_clip_loss(regions, bb->encode_prompts(texts).pooled, logit_scale);
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      if (report) report->encoder_loss.push_back(loss.item<double>());
      if (config.log_every > 0 && step % config.log_every == 0) {
        LOG_INFO("encoders step %ld loss %.4f", static_cast<long>(step), loss.item<double>());
      }
    }
  }
  set_requires_grad(*bb->image_encoder, false);
  set_requires_grad(*bb->text_encoder, false);
  bb->image_encoder->eval();
  bb->text_encoder->eval();

  torch::optim::AdamW opt(bb->denoiser->parameters(), torch::optim::AdamWOptions(config.denoiser_lr).weight_decay(0.01));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int64_t step = 0; step < config.denoiser_steps; ++step) {
    auto batch = sample_batch(world, config.denoiser_batch, rng);
    for (auto& c : batch.captions) {
      if (u01(rng) < config.caption_drop) c.clear();
    }
    Tensor context;
    {
      torch::NoGradGuard no_grad;
      context = bb->encode_prompts(batch.captions).sequence;
    }
    auto z0 = bb->autoencoder.encode(batch.images);
    auto t = torch::randint(1, bb->schedule.steps() + 1, {z0.size(0)}, torch::kInt64);
    auto eps = torch::randn_like(z0);
    auto zt = bb->schedule.forward_noise(z0, t, eps);
    auto loss = diffusion_loss(bb->denoiser->forward(zt, t, context), eps);
    opt.zero_grad();
    loss.backward();
    nn::utils::clip_grad_norm_(bb->denoiser->parameters(), 1.0);
    opt.step();
    if (report) report->denoiser_loss.push_back(loss.item<double>());
    if (config.log_every > 0 && step % config.log_every == 0) {
      LOG_INFO("denoiser step %ld loss %.4f", static_cast<long>(step), loss.item<double>());
    }
  }
  bb->freeze();
  LOG_INFO("backbone trained in %.1fs",
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return bb;
}

}  // namespace subjtok::backbone
