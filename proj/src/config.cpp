#include "subjtok/config.hpp"

#include <openssl/evp.h>

#include <fstream>

#include "subjtok/common.hpp"

namespace subjtok {

using json = nlohmann::json;

void ModelConfig::validate() const {
  if (profile != "toy" && profile != "pretrained") {
    throw ConfigError("unknown profile '" + profile + "' (expected toy|pretrained)");
  }
  if (image_size % patch_size != 0) throw ConfigError("image_size must be a multiple of patch_size");
  if (image_size % latent_factor != 0) throw ConfigError("image_size must be a multiple of latent_factor");
  if (unet_channels.empty()) throw ConfigError("unet_channels must not be empty");
  if (latent_size() % (int64_t{1} << (unet_channels.size() - 1)) != 0) {
    throw ConfigError("latent size not divisible by the denoiser's downsampling");
  }
  if (attn_dim % attn_heads != 0) throw ConfigError("attn_dim must be divisible by attn_heads");
  if (text_dim % text_heads != 0) throw ConfigError("text_dim must be divisible by text_heads");
  if (image_feature_layer != "final" && image_feature_layer != "penultimate") {
    throw ConfigError("image_feature_layer must be final|penultimate");
  }
  if (schedule_steps < 1) throw ConfigError("schedule_steps must be >= 1");
  if (profile == "pretrained" && pretrained_weights.empty()) {
    throw ConfigError("pretrained profile requires pretrained_weights");
  }
}

Stage1Config Stage1Config::full_scale() {
  Stage1Config c;
  c.resolution = 256;
  c.batch = 160;
  c.lr = 5e-7;
  c.steps = 120000;
  return c;
}

Stage2Config Stage2Config::full_scale() {
  Stage2Config c;
  c.resolution = 512;
  c.batch = 40;
  c.lr = 1e-4;
  c.steps = 120000;
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    if (j.contains("backbone")) c.backbone = j["backbone"].get<BackboneTrainConfig>();
    if (j.contains("stage1")) c.stage1 = j["stage1"].get<Stage1Config>();
    if (j.contains("stage2")) c.stage2 = j["stage2"].get<Stage2Config>();
    c.work_dir = j.value("work_dir", c.work_dir);
    c.backbone_checkpoint = j.value("backbone_checkpoint", std::string{});
    c.stage1_checkpoint = j.value("stage1_checkpoint", std::string{});
    c.stage2_checkpoint = j.value("stage2_checkpoint", std::string{});
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.work_dir);
  resolve(c.backbone_checkpoint);
  resolve(c.stage1_checkpoint);
  resolve(c.stage2_checkpoint);
  auto dflt = [&](std::string& p, const char* name) {
    if (p.empty()) p = (std::filesystem::path(c.work_dir) / name).string();
  };
  dflt(c.backbone_checkpoint, "backbone");
  dflt(c.stage1_checkpoint, "stage1");
  dflt(c.stage2_checkpoint, "stage2");
  c.model.validate();
  return c;
}

json RunConfig::to_json() const {
  return json{{"model", model},
              {"backbone", backbone},
              {"stage1", stage1},
              {"stage2", stage2},
              {"work_dir", work_dir},
              {"backbone_checkpoint", backbone_checkpoint},
              {"stage1_checkpoint", stage1_checkpoint},
              {"stage2_checkpoint", stage2_checkpoint}};
}

std::string RunConfig::hash() const {
  auto j = to_json();
  j.erase("work_dir");
  j.erase("backbone_checkpoint");
  j.erase("stage1_checkpoint");
  j.erase("stage2_checkpoint");
  return sha256_hex(j.dump());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace subjtok
