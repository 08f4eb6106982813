#include "subjtok/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "subjtok/config.hpp"

namespace subjtok {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'S', 'J', 'T', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("truncated tensor archive");
  return v;
}

std::map<std::string, Tensor> named_state(const torch::nn::Module& module) {
  std::map<std::string, Tensor> out;
  for (const auto& p : module.named_parameters(true)) out.emplace(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace(b.key(), b.value());
  return out;
}

}  // namespace

void Checkpoint::save(const fs::path& dir) const {
  const auto tmp = fs::path(dir.string() + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream m(tmp / "manifest.json");
    m << manifest.dump(2) << '\n';
  }
  std::ofstream out(tmp / "tensors.bin", std::ios::binary);
  out.write(kMagic, 4);
  put_raw<uint32_t>(out, kVersion);
  put_raw<uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    put_raw<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_raw<uint32_t>(out, static_cast<uint32_t>(c.dim()));
    for (auto d : c.sizes()) put_raw<int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
              static_cast<std::streamsize>(c.numel() * sizeof(float)));
  }
  out.close();
  if (!out) throw ConfigError("failed writing checkpoint " + tmp.string());
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

Checkpoint Checkpoint::load(const fs::path& dir) {
  Checkpoint ck;
  std::ifstream m(dir / "manifest.json");
  if (!m) throw ConfigError("checkpoint not found: " + dir.string());
  try {
    ck.manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  std::ifstream in(dir / "tensors.bin", std::ios::binary);
  if (!in) throw ConfigError("checkpoint tensors missing: " + dir.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw ConfigError("not a tensor archive: " + dir.string());
  if (get_raw<uint32_t>(in) != kVersion) throw ConfigError("unsupported tensor archive version");
  const auto count = get_raw<uint64_t>(in);
  for (uint64_t i = 0; i < count; ++i) {
    std::string name(get_raw<uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rank = get_raw<uint32_t>(in);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = get_raw<int64_t>(in);
    auto t = torch::empty(dims, torch::kFloat32);
    in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw ConfigError("truncated tensor archive: " + dir.string());
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

void Checkpoint::put(const torch::nn::Module& module, const std::string& prefix) {
  for (const auto& [name, t] : named_state(module)) tensors[prefix + "." + name] = t.detach().clone();
}

void Checkpoint::restore(torch::nn::Module& module, const std::string& prefix) const {
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : named_state(module)) {
    auto it = tensors.find(prefix + "." + name);
    if (it == tensors.end()) throw ConfigError("checkpoint is missing " + prefix + "." + name);
    if (it->second.sizes() != t.sizes()) {
      throw ConfigError("shape mismatch for " + prefix + "." + name);
    }
    t.copy_(it->second);
  }
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  auto it = tensors.lower_bound(prefix + ".");
  return it != tensors.end() && it->first.starts_with(prefix + ".");
}

std::string parameter_checksum(const torch::nn::Module& module) {
  std::string bytes;
  for (const auto& [name, t] : named_state(module)) {
    auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(c.data_ptr<float>()), static_cast<size_t>(c.numel()) * sizeof(float));
  }
  return sha256_hex(bytes);
}

int64_t parameter_count(const torch::nn::Module& module, bool trainable_only) {
  int64_t n = 0;
  for (const auto& p : module.parameters(true)) {
    if (!trainable_only || p.requires_grad()) n += p.numel();
  }
  return n;
}

void set_requires_grad(torch::nn::Module& module, bool requires_grad) {
  for (auto& p : module.parameters(true)) p.set_requires_grad(requires_grad);
}

}  // namespace subjtok
