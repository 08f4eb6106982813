#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "subjtok/pipeline.hpp"

namespace httplib {
class Server;
}

namespace subjtok::service {

struct GenerationRequest {
  ImageTensor reference;
  std::string reference_sha256;
  std::string prompt;
  std::string class_name;
  double lambda_subject = 1.0;
  double lambda_irrelevant = 0.0;
  uint64_t seed = 0;
  int64_t steps = 50;
  double guidance_scale = 5.0;

  /// Field-level validation; problems are collected in `errors` keyed by field name.
  static std::optional<GenerationRequest> parse(const nlohmann::json& body, std::map<std::string, std::string>& errors);
  sampler::SamplerConfig sampler_config() const;
  nlohmann::json to_json() const;
};

/// Append-only directory of run records:
///   <root>/<id>/record.json, output.png, reference.png
/// Each run is written to a temporary directory and renamed into place.
class RunStore {
 public:
  explicit RunStore(std::filesystem::path root);

  std::string put(nlohmann::json record, const ImageTensor& output, const ImageTensor& reference);
  std::optional<nlohmann::json> get(const std::string& id) const;
  std::optional<ImageTensor> image(const std::string& id, const std::string& name) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  std::atomic<uint64_t> counter_{0};
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Requests waiting or running before new ones get 429.
  int max_queue = 4;
};

/// HTTP front end. Generation requests run one at a time.
class Service {
 public:
  Service(std::shared_ptr<const Pipeline> pipeline, std::shared_ptr<RunStore> store, ServiceOptions options = {});
  ~Service();

  Response generate(const std::string& body);
  Response run(const std::string& id) const;
  Response health() const;
  Response attention_maps(const std::string& id) const;

  /// Binds the listening socket; returns the bound port (options.port 0 picks a free one).
  int bind();
  /// Serves until stop() is called.
  void listen();
  void stop();

 private:
  std::shared_ptr<const Pipeline> pipeline_;
  std::shared_ptr<RunStore> store_;
  ServiceOptions options_;
  mutable std::mutex generation_;
  std::atomic<int> pending_{0};
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace subjtok::service
