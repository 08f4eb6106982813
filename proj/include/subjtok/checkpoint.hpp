#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "subjtok/common.hpp"

namespace subjtok {

/// A checkpoint is a directory with two files:
///   manifest.json  plain-text metadata (profile, shapes, schedule, provenance)
///   tensors.bin    named float32 arrays:
///                  "SJTK" u32 version, u64 count, then per tensor
///                  u32 name length, name bytes, u32 rank, i64 dims[rank],
///                  float32 data (little endian, row-major)
struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  /// Writes into a temporary sibling directory and renames it into place.
  void save(const std::filesystem::path& dir) const;
  static Checkpoint load(const std::filesystem::path& dir);

  void put(const torch::nn::Module& module, const std::string& prefix);
  /// Copies stored values into the module's parameters and buffers; every
  /// module entry must be present with a matching shape.
  void restore(torch::nn::Module& module, const std::string& prefix) const;
  bool has_prefix(const std::string& prefix) const;
};

/// SHA-256 over names and raw bytes of every parameter and buffer.
std::string parameter_checksum(const torch::nn::Module& module);

int64_t parameter_count(const torch::nn::Module& module, bool trainable_only = false);

void set_requires_grad(torch::nn::Module& module, bool requires_grad);

}  // namespace subjtok
