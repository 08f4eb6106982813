#include "subjtok/pipeline.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

#include "subjtok/log.hpp"

namespace subjtok {

std::string checkpoint_id(const std::filesystem::path& dir) {
  std::ifstream in(dir / "tensors.bin", std::ios::binary);
  if (!in) throw ConfigError("checkpoint not found: " + dir.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str()).substr(0, 16);
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<uint8_t> base64_decode(std::string_view text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
  }
  if (clean.size() % 4 != 0) throw DataError("base64 length must be a multiple of 4");
  std::vector<uint8_t> out(3 * clean.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw DataError("malformed base64");
  size_t len = static_cast<size_t>(n);
  if (!clean.empty() && clean.back() == '=') --len;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

std::string resolve_prompt(const std::string& prompt, const std::string& class_name) {
  return data::count_placeholders(prompt) == 0 ? prompt : data::substitute_placeholder(prompt, class_name);
}

ImageTensor fit_reference(const ImageTensor& image, int64_t size) {
  auto hwc = image.hwc();
  if (hwc.size(2) == 4) hwc = hwc.slice(2, 0, 3);
  if (hwc.size(2) == 1) hwc = hwc.expand({hwc.size(0), hwc.size(1), 3});
  ImageTensor rgb(hwc.contiguous());
  if (rgb.height() == size && rgb.width() == size) return rgb;
  return resize(rgb, size, size);
}

std::shared_ptr<Pipeline> Pipeline::load(const RunConfig& config) {
  for (const auto& p : {config.backbone_checkpoint, config.stage1_checkpoint, config.stage2_checkpoint}) {
    if (!std::filesystem::exists(std::filesystem::path(p) / "manifest.json")) {
      throw ConfigError("checkpoint missing: " + p);
    }
  }
  auto bb = backbone::Backbone::load(config.backbone_checkpoint);
  auto s1 = disentangle::Stage1Model::load(config.stage1_checkpoint);
  auto s2 = enrich::Stage2Model::load(config.stage2_checkpoint);
  auto p = from_parts(config, bb, std::move(s1), std::move(s2));
  p->ids_ = {{"backbone", checkpoint_id(config.backbone_checkpoint)},
             {"stage1", checkpoint_id(config.stage1_checkpoint)},
             {"stage2", checkpoint_id(config.stage2_checkpoint)}};
  return p;
}

std::shared_ptr<Pipeline> Pipeline::from_parts(RunConfig config, std::shared_ptr<backbone::Backbone> bb,
                                               disentangle::Stage1Model stage1, enrich::Stage2Model stage2) {
  auto p = std::make_shared<Pipeline>();
  p->config_ = std::move(config);
  p->bb_ = std::move(bb);
  p->stage1_ = std::move(stage1);
  p->stage2_ = std::move(stage2);
  p->stage2_.apply(*p->bb_);
  p->bb_->freeze();
  return p;
}

ImageTensor Pipeline::generate(const ImageTensor& reference, const std::string& class_name, const std::string& prompt,
                               const sampler::SamplerConfig& config) const {
  return sampler::generate(*bb_, stage1_, stage2_, fit_reference(reference, bb_->config.image_size), class_name,
                           resolve_prompt(prompt, class_name), config);
}

ImageTensor Pipeline::generate_text_only(const std::string& prompt, const sampler::SamplerConfig& config) const {
  return sampler::generate_text_only(*bb_, prompt, config);
}

disentangle::DisentangledTokens Pipeline::tokens(const ImageTensor& reference, const std::string& class_name) const {
  const auto& s1 = stage2_.joint_stage1 ? *stage2_.joint_stage1 : stage1_;
  return disentangle::tokenize(*bb_, s1, fit_reference(reference, bb_->config.image_size),
                               disentangle::init_queries(*bb_, s1, class_name));
}

Tensor Pipeline::attention_maps(const ImageTensor& reference, const std::string& class_name) const {
  return disentangle::attention_maps(*bb_, fit_reference(reference, bb_->config.image_size),
                                     tokens(reference, class_name));
}

}  // namespace subjtok
