#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

#include "subjtok/config.hpp"
#include "subjtok/enrich.hpp"
#include "subjtok/sampler.hpp"

namespace subjtok {

/// Identifier of a checkpoint directory: first 16 hex digits of the SHA-256
/// of its tensor file.
std::string checkpoint_id(const std::filesystem::path& dir);

std::string base64_encode(const std::vector<uint8_t>& bytes);
/// Throws DataError on malformed input.
std::vector<uint8_t> base64_decode(std::string_view text);

/// Loaded backbone, stage-1 and stage-2 models ready for generation.
class Pipeline {
 public:
  /// Loads the three checkpoints named by the config; missing ones raise ConfigError.
  static std::shared_ptr<Pipeline> load(const RunConfig& config);
  static std::shared_ptr<Pipeline> from_parts(RunConfig config, std::shared_ptr<backbone::Backbone> bb,
                                              disentangle::Stage1Model stage1, enrich::Stage2Model stage2);

  /// Customized generation. S* in the prompt is replaced by the class name.
  ImageTensor generate(const ImageTensor& reference, const std::string& class_name, const std::string& prompt,
                       const sampler::SamplerConfig& config) const;
  ImageTensor generate_text_only(const std::string& prompt, const sampler::SamplerConfig& config) const;
  /// Per-token heatmaps of the reference, [n, g, g].
  disentangle::DisentangledTokens tokens(const ImageTensor& reference, const std::string& class_name) const;
  Tensor attention_maps(const ImageTensor& reference, const std::string& class_name) const;

  const RunConfig& config() const { return config_; }
  const backbone::Backbone& backbone() const { return *bb_; }
  const disentangle::Stage1Model& stage1() const { return stage1_; }
  const enrich::Stage2Model& stage2() const { return stage2_; }
  const std::map<std::string, std::string>& checkpoint_ids() const { return ids_; }

 private:
  RunConfig config_;
  std::shared_ptr<backbone::Backbone> bb_;
  disentangle::Stage1Model stage1_;
  enrich::Stage2Model stage2_;
  std::map<std::string, std::string> ids_;
};

/// Drops alpha, expands grey to RGB and resizes to size×size.
ImageTensor fit_reference(const ImageTensor& image, int64_t size);

/// Replaces S* with the class name; prompts without S* are returned unchanged.
std::string resolve_prompt(const std::string& prompt, const std::string& class_name);

}  // namespace subjtok
