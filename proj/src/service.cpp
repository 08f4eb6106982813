#include "subjtok/service.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <regex>

#include "httplib.h"
#include "subjtok/log.hpp"

namespace subjtok::service {

using json = nlohmann::json;

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

template <typename T>
bool read_number(const json& body, const char* key, T& out, std::map<std::string, std::string>& errors) {
  if (!body.contains(key)) return true;
  const auto& v = body[key];
  if (!v.is_number()) {
    errors[key] = "must be a number";
    return false;
  }
  if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<int64_t>() < 0)) {
      errors[key] = "must be a non-negative integer";
      return false;
    }
  }
  out = v.get<T>();
  return true;
}

}  // namespace

std::optional<GenerationRequest> GenerationRequest::parse(const json& body, std::map<std::string, std::string>& errors) {
  if (!body.is_object()) {
    errors["body"] = "must be a JSON object";
    return std::nullopt;
  }
  GenerationRequest r;
  if (!body.contains("reference") || !body["reference"].is_string()) {
    errors["reference"] = "base64 PNG string required";
  } else {
    try {
      const auto bytes = base64_decode(body["reference"].get<std::string>());
      r.reference = decode_png(bytes);
      r.reference_sha256 = sha256_hex(std::string(bytes.begin(), bytes.end()));
    } catch (const std::exception& e) {
      errors["reference"] = std::string("not a decodable base64 PNG: ") + e.what();
    }
  }
  if (!body.contains("prompt") || !body["prompt"].is_string() || body["prompt"].get<std::string>().empty()) {
    errors["prompt"] = "must be a nonempty string";
  } else {
    r.prompt = body["prompt"].get<std::string>();
    if (data::count_placeholders(r.prompt) > 1) errors["prompt"] = "at most one S* placeholder";
  }
  if (!body.contains("class_name") || !body["class_name"].is_string() ||
      body["class_name"].get<std::string>().empty()) {
    errors["class_name"] = "must be a nonempty string";
  } else {
    r.class_name = body["class_name"].get<std::string>();
  }
  if (read_number(body, "lambda_s", r.lambda_subject, errors) &&
      (!std::isfinite(r.lambda_subject) || r.lambda_subject < 0)) {
    errors["lambda_s"] = "must be >= 0";
  }
  if (read_number(body, "lambda_i", r.lambda_irrelevant, errors) &&
      (!std::isfinite(r.lambda_irrelevant) || r.lambda_irrelevant < 0)) {
    errors["lambda_i"] = "must be >= 0";
  }
  read_number(body, "seed", r.seed, errors);
  if (read_number(body, "steps", r.steps, errors) && (r.steps < 1 || r.steps > 1000)) {
    errors["steps"] = "must be in [1, 1000]";
  }
  if (read_number(body, "guidance_scale", r.guidance_scale, errors) &&
      (!std::isfinite(r.guidance_scale) || r.guidance_scale < 0)) {
    errors["guidance_scale"] = "must be >= 0";
  }
  if (!errors.empty()) return std::nullopt;
  return r;
}

sampler::SamplerConfig GenerationRequest::sampler_config() const {
  sampler::SamplerConfig c;
  c.steps = steps;
  c.guidance_scale = guidance_scale;
  c.seed = seed;
  c.lambda = {lambda_subject, lambda_irrelevant};
  return c;
}

json GenerationRequest::to_json() const {
  return {{"prompt", prompt},
          {"class_name", class_name},
          {"lambda_s", lambda_subject},
          {"lambda_i", lambda_irrelevant},
          {"seed", seed},
          {"steps", steps},
          {"guidance_scale", guidance_scale},
          {"reference_sha256", reference_sha256}};
}

// ---------------------------------------------------------------------------

RunStore::RunStore(std::filesystem::path root) : root_(std::move(root)) { std::filesystem::create_directories(root_); }

std::string RunStore::put(json record, const ImageTensor& output, const ImageTensor& reference) {
  const auto stamp = std::chrono::system_clock::now().time_since_epoch().count();
  const auto seq = counter_.fetch_add(1);
  const auto id = sha256_hex(record.dump() + std::to_string(stamp) + "/" + std::to_string(seq)).substr(0, 16);
  const auto tmp = root_ / (".tmp-" + id);
  const auto dst = root_ / id;
  std::filesystem::create_directories(tmp);
  record["id"] = id;
  record["output"] = "output.png";
  write_png(tmp / "output.png", output);
  write_png(tmp / "reference.png", reference);
  std::ofstream(tmp / "record.json") << record.dump(2) << "\n";
  std::filesystem::rename(tmp, dst);
  return id;
}

std::optional<json> RunStore::get(const std::string& id) const {
  static const std::regex kId("^[0-9a-f]{16}$");
  if (!std::regex_match(id, kId)) return std::nullopt;
  std::ifstream in(root_ / id / "record.json");
  if (!in) return std::nullopt;
  return json::parse(in);
}

std::optional<ImageTensor> RunStore::image(const std::string& id, const std::string& name) const {
  if (!get(id)) return std::nullopt;
  const auto p = root_ / id / name;
  if (!std::filesystem::exists(p)) return std::nullopt;
  return read_png(p);
}

// ---------------------------------------------------------------------------

Service::Service(std::shared_ptr<const Pipeline> pipeline, std::shared_ptr<RunStore> store, ServiceOptions options)
    : pipeline_(std::move(pipeline)), store_(std::move(store)), options_(std::move(options)) {}

Service::~Service() { stop(); }

Response Service::generate(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    return {400, {{"error", "invalid request"}, {"fields", {{"body", std::string("malformed JSON: ") + e.what()}}}}};
  }
  std::map<std::string, std::string> errors;
  auto req = GenerationRequest::parse(j, errors);
  if (!req) return {400, {{"error", "invalid request"}, {"fields", errors}}};

  if (pending_.fetch_add(1) >= options_.max_queue) {
    pending_.fetch_sub(1);
    return {429, {{"error", "generation queue is full"}, {"max_queue", options_.max_queue}}};
  }
  struct Release {
    std::atomic<int>& n;
    ~Release() { n.fetch_sub(1); }
  } release{pending_};

  const auto t0 = std::chrono::steady_clock::now();
  std::lock_guard lock(generation_);
  const auto t1 = std::chrono::steady_clock::now();
  ImageTensor out;
  try {
    out = pipeline_->generate(req->reference, req->class_name, req->prompt, req->sampler_config());
  } catch (const VocabularyError& e) {
    return {400, {{"error", "invalid request"}, {"fields", {{"class_name", e.what()}}}}};
  } catch (const PromptError& e) {
    return {400, {{"error", "invalid request"}, {"fields", {{"prompt", e.what()}}}}};
  }
  const auto t2 = std::chrono::steady_clock::now();
  json record = {{"request", req->to_json()},
                 {"timings", {{"queue_s", std::chrono::duration<double>(t1 - t0).count()},
                              {"generate_s", std::chrono::duration<double>(t2 - t1).count()}}},
                 {"checkpoints", pipeline_->checkpoint_ids()},
                 {"config_hash", pipeline_->config().hash()},
                 {"profile", pipeline_->backbone().config.profile},
                 {"created", utc_now()}};
  const auto id = store_->put(record, out, fit_reference(req->reference, pipeline_->backbone().config.image_size));
  record["id"] = id;
  record["output"] = "output.png";
  return {200, {{"run_id", id}, {"image", base64_encode(encode_png(out))}, {"record", record}}};
}

Response Service::run(const std::string& id) const {
  auto rec = store_->get(id);
  if (!rec) return {404, {{"error", "unknown run '" + id + "'"}}};
  auto img = store_->image(id, "output.png");
  json body = *rec;
  if (img) body["image"] = base64_encode(encode_png(*img));
  return {200, body};
}

Response Service::health() const {
  return {200, {{"status", "ok"},
                {"profile", pipeline_->backbone().config.profile},
                {"checkpoints", pipeline_->checkpoint_ids()},
                {"config_hash", pipeline_->config().hash()}}};
}

Response Service::attention_maps(const std::string& id) const {
  auto rec = store_->get(id);
  auto ref = store_->image(id, "reference.png");
  if (!rec || !ref) return {404, {{"error", "unknown run '" + id + "'"}}};
  const auto class_name = rec->at("request").at("class_name").get<std::string>();
  Tensor maps;
  int64_t n_subject = 1;
  {
    std::lock_guard lock(generation_);
    const auto tokens = pipeline_->tokens(*ref, class_name);
    n_subject = tokens.n_subject;
    maps = disentangle::attention_maps(pipeline_->backbone(), *ref, tokens);
  }
  namespace F = torch::nn::functional;
  json out = json::array();
  for (int64_t k = 0; k < maps.size(0); ++k) {
    auto up = F::interpolate(maps[k].unsqueeze(0).unsqueeze(0),
                             F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{ref->height(), ref->width()})
                                 .mode(torch::kBilinear)
                                 .align_corners(false))
                  .squeeze(0)
                  .squeeze(0)
                  .clamp(0.0, 1.0);
    const bool subj = k < n_subject;
    out.push_back({{"token", subj ? "subject" : "irrelevant"},
                   {"index", subj ? k : k - n_subject},
                   {"grid", maps.size(1)},
                   {"image", base64_encode(encode_png(colorize_heatmap(up)))}});
  }
  return {200, {{"run_id", id}, {"maps", out}}};
}

int Service::bind() {
  server_ = std::make_unique<httplib::Server>();
  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server_->Post("/generate", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, generate(req.body));
  });
  server_->Get(R"(/runs/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, run(req.matches[1]));
  });
  server_->Get("/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  server_->Get(R"(/attention-maps/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, attention_maps(req.matches[1]));
  });
  server_->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    LOG_ERROR("request failed: %s", what.c_str());
    res.status = 500;
    res.set_content(json({{"error", what}}).dump(), "application/json");
  });
  if (options_.port == 0) return server_->bind_to_any_port(options_.host);
  if (!server_->bind_to_port(options_.host, options_.port)) {
    throw ConfigError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  return options_.port;
}

void Service::listen() {
  if (!server_) bind();
  LOG_INFO("serving on %s", options_.host.c_str());
  server_->listen_after_bind();
}

void Service::stop() {
  if (server_) server_->stop();
}

}  // namespace subjtok::service
