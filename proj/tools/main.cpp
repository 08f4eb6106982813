#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "subjtok/evaluate.hpp"
#include "subjtok/log.hpp"
#include "subjtok/pipeline.hpp"
#include "subjtok/service.hpp"

using namespace subjtok;
namespace fs = std::filesystem;

namespace {

RunConfig load_config(const std::string& path) {
  if (!path.empty()) return RunConfig::load(path);
  RunConfig c;
  c.backbone_checkpoint = (fs::path(c.work_dir) / "backbone").string();
  c.stage1_checkpoint = (fs::path(c.work_dir) / "stage1").string();
  c.stage2_checkpoint = (fs::path(c.work_dir) / "stage2").string();
  return c;
}

std::string lambda_label(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

struct SamplerFlags {
  uint64_t seed = 0;
  int64_t steps = 50;
  double scale = 5.0;
  double lambda_s = 1.0;
  double lambda_i = 0.0;

  void add(CLI::App* app, bool with_lambda) {
    app->add_option("--seed", seed, "Sampler seed")->capture_default_str();
    app->add_option("--steps", steps, "DDIM steps")->check(CLI::Range(1, 1000))->capture_default_str();
    app->add_option("--scale", scale, "Classifier-free guidance scale")->check(CLI::NonNegativeNumber)->capture_default_str();
    if (with_lambda) {
      app->add_option("--lambda-s", lambda_s, "Subject branch weight")->check(CLI::NonNegativeNumber)->capture_default_str();
      app->add_option("--lambda-i", lambda_i, "Irrelevant branch weight")->check(CLI::NonNegativeNumber)->capture_default_str();
    }
  }
  sampler::SamplerConfig config() const {
    sampler::SamplerConfig c;
    c.seed = seed;
    c.steps = steps;
    c.guidance_scale = scale;
    c.lambda = {lambda_s, lambda_i};
    return c;
  }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

nlohmann::json toy_method_metrics(backbone::Backbone& bb, const disentangle::Stage1Model& s1,
                                  const enrich::Stage2Model& s2, const nlohmann::json& spec) {
  evaluate::VarianceSetup setup;
  setup.n_subjects = spec.value("subjects", 10);
  setup.n_prompts = spec.value("prompts", 5);
  setup.n_references = spec.value("references", 3);
  setup.sampler.steps = spec.value("steps", 25);
  metrics::Embedders emb;
  emb.backbone = &bb;
  auto iv = evaluate::evaluate_internal_variance(bb, s1, s2, setup, emb);

  const data::ToyWorld world(bb.config.image_size);
  std::mt19937_64 rng(setup.seed + 1);
  const auto prompts = data::editing_prompts(data::SubjectCategory::nonlive);
  double ct = 0, ci = 0, di = 0;
  int n = 0;
  double t = 0;
  for (int i = 0; i < setup.n_subjects; ++i) {
    auto ref = world.random_sample(rng);
    for (int p = 0; p < setup.n_prompts; ++p) {
      const auto prompt = data::substitute_placeholder(prompts[static_cast<size_t>(p)], ref.class_name());
      ImageTensor img;
      const double secs = metrics::time_inference(
          [&] { img = sampler::generate(bb, s1, s2, ref.image, ref.class_name(), prompt, setup.sampler); }, n == 0);
      t += secs;
      ct += metrics::text_alignment(emb, img, prompt, ref.class_name());
      ci += metrics::image_alignment(emb, img, ref.image, metrics::Space::joint);
      di += metrics::image_alignment(emb, img, ref.image, metrics::Space::self_supervised);
      ++n;
    }
  }
  return {{"C-T", ct / n}, {"C-I", ci / n}, {"D-I", di / n}, {"IV", iv.internal_variance}, {"T", t / n}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subject customization from a single reference image: disentangling tokenizer, enrichment and sampling"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug|info|warn|error|quiet")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "quiet"}))
      ->capture_default_str();

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Render the synthetic toy corpus with ground-truth masks");
  std::string synth_out;
  int synth_subjects = 48, synth_scenes = 4, synth_res = 64;
  uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--subjects", synth_subjects, "Distinct subjects")->capture_default_str();
  synth->add_option("--scenes", synth_scenes, "Scenes per subject")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
  synth->add_option("--resolution", synth_res, "Image size in pixels")->capture_default_str();

  // train-backbone
  auto* tbb = app.add_subcommand("train-backbone", "Pretrain the frozen toy encoders and denoiser");
  std::string config_path, out_dir;
  tbb->add_option("--config", config_path, "Run configuration (JSON)");
  tbb->add_option("--out", out_dir, "Checkpoint directory (default: backbone_checkpoint from the config)");

  // train-dis
  auto* tdis = app.add_subcommand("train-dis", "Stage 1: train the disentangling tokenizer");
  tdis->add_option("--config", config_path, "Run configuration (JSON)");
  tdis->add_option("--out", out_dir, "Checkpoint directory (default: stage1_checkpoint)");
  std::string manifest_path;
  tdis->add_option("--manifest", manifest_path, "Bbox manifest (JSON lines); default streams toy renders");

  // train-en
  auto* ten = app.add_subcommand("train-en", "Stage 2: train the enrichment projectors and decoupled branches");
  std::string stage1_path, conditioning;
  ten->add_option("--stage1", stage1_path, "Stage-1 checkpoint (default: stage1_checkpoint)");
  ten->add_option("--config", config_path, "Run configuration (JSON)");
  ten->add_option("--out", out_dir, "Checkpoint directory (default: stage2_checkpoint)");
  ten->add_option("--conditioning", conditioning, "disentangled|global (overrides the config)")
      ->check(CLI::IsMember({"disentangled", "global"}));
  ten->add_option("--manifest", manifest_path, "Bbox manifest (JSON lines); default streams toy renders");

  // train-single
  auto* tsingle = app.add_subcommand("train-single", "Ablation: train tokenizer, projectors and branches jointly");
  tsingle->add_option("--config", config_path, "Run configuration (JSON)");
  tsingle->add_option("--out", out_dir, "Checkpoint directory")->required();

  // generate
  auto* gen = app.add_subcommand("generate", "Generate an image of the reference subject");
  std::string ref_path, prompt, class_name, gen_out = "out.png", maps_dir;
  SamplerFlags sf;
  gen->add_option("--config", config_path, "Run configuration (JSON)");
  gen->add_option("--ref", ref_path, "Reference image (PNG)")->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", prompt, "Prompt; S* is replaced by the class name")->required();
  gen->add_option("--class", class_name, "Subject class name")->required();
  gen->add_option("--out", gen_out, "Output PNG")->capture_default_str();
  gen->add_option("--maps", maps_dir, "Also write per-token attention maps to this directory");
  sf.add(gen, true);

  // sweep-lambda
  auto* sweep = app.add_subcommand("sweep-lambda", "Generate the 5x5 grid over subject/irrelevant branch weights");
  std::string sweep_out = "lambda_grid";
  sweep->add_option("--config", config_path, "Run configuration (JSON)");
  sweep->add_option("--ref", ref_path, "Reference image (PNG)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--prompt", prompt, "Prompt; S* is replaced by the class name")->required();
  sweep->add_option("--class", class_name, "Subject class name")->required();
  sweep->add_option("--out", sweep_out, "Output directory")->capture_default_str();
  sf.add(sweep, false);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Compute metrics and mean ranks for a manifest of methods");
  std::string eval_out = "report";
  eval->add_option("--manifest", manifest_path,
                   "JSON: {\"methods\": [{name, C-T, C-I, D-I, IV, T}]} or {\"runs\": [{name, config}]}")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "Report directory")->capture_default_str();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP generation service");
  service::ServiceOptions sopt;
  std::string runs_dir;
  serve->add_option("--config", config_path, "Run configuration (JSON)");
  serve->add_option("--host", sopt.host, "Bind address")->capture_default_str();
  serve->add_option("--port", sopt.port, "Port (0 picks a free one)")
      ->check(CLI::Range(0, 65535))
      ->capture_default_str();
  serve->add_option("--max-queue", sopt.max_queue, "Requests waiting or running before 429")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  serve->add_option("--runs", runs_dir, "Run store directory (default: <work_dir>/runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  static const std::map<std::string, LogLevel> kLevels = {{"debug", LogLevel::debug},
                                                         {"info", LogLevel::info},
                                                         {"warn", LogLevel::warn},
                                                         {"error", LogLevel::error},
                                                         {"quiet", LogLevel::quiet}};
  set_log_level(kLevels.at(log_level));

  try {
    if (synth->parsed()) {
      auto corpus = data::synth_toy_corpus(synth_subjects, synth_scenes, synth_seed, synth_res);
      data::write_toy_corpus(corpus, synth_out);
      std::printf("wrote %zu samples to %s\n", corpus.samples.size(), synth_out.c_str());
      return 0;
    }

    const auto cfg = load_config(config_path);
    auto make_source = [&]() -> std::unique_ptr<data::PairSource> {
      if (manifest_path.empty()) return std::make_unique<data::ToyStream>(cfg.model.image_size);
      data::BuildOptions opt;
      opt.resolution = cfg.model.image_size;
      data::BuildStats stats;
      auto pairs = data::build_pairs(manifest_path, opt, &stats);
      LOG_INFO("built %zu pairs (%zu filtered, %zu unreadable)", stats.kept, stats.filtered, stats.unreadable);
      return std::make_unique<data::PairList>(std::move(pairs));
    };

    if (tbb->parsed()) {
      auto bb = backbone::train_toy_backbone(cfg.model, cfg.backbone);
      const auto dir = out_dir.empty() ? cfg.backbone_checkpoint : out_dir;
      bb->save(dir, {{"train", cfg.backbone}, {"config_hash", cfg.hash()}});
      std::printf("backbone checkpoint: %s\n", dir.c_str());
      return 0;
    }
    if (tdis->parsed()) {
      auto bb = backbone::Backbone::load(cfg.backbone_checkpoint);
      auto source = make_source();
      disentangle::TrainOptions opt;
      opt.checkpoint_dir = out_dir.empty() ? cfg.stage1_checkpoint : out_dir;
      opt.dump_dir = fs::path(cfg.work_dir) / "nan_dumps";
      auto r = disentangle::train_stage1(*bb, *source, cfg.stage1, opt);
      std::printf("stage-1 checkpoint: %s (final loss %.4f)\n", opt.checkpoint_dir.c_str(),
                  r.losses.empty() ? 0.0 : r.losses.back());
      return r.frozen_checksum_before == r.frozen_checksum_after ? 0 : 1;
    }
    if (ten->parsed()) {
      auto bb = backbone::Backbone::load(cfg.backbone_checkpoint);
      auto s1 = disentangle::Stage1Model::load(stage1_path.empty() ? cfg.stage1_checkpoint : stage1_path);
      auto s2cfg = cfg.stage2;
      if (!conditioning.empty()) s2cfg.conditioning = conditioning;
      auto source = make_source();
      disentangle::TrainOptions opt;
      opt.checkpoint_dir = out_dir.empty() ? cfg.stage2_checkpoint : out_dir;
      opt.dump_dir = fs::path(cfg.work_dir) / "nan_dumps";
      auto r = enrich::train_stage2(*bb, s1, *source, s2cfg, opt);
      std::printf("stage-2 checkpoint: %s (final loss %.4f)\n", opt.checkpoint_dir.c_str(),
                  r.losses.empty() ? 0.0 : r.losses.back());
      return r.frozen_checksum_before == r.frozen_checksum_after ? 0 : 1;
    }
    if (tsingle->parsed()) {
      auto bb = backbone::Backbone::load(cfg.backbone_checkpoint);
      data::ToyStream source(cfg.model.image_size);
      disentangle::TrainOptions opt;
      opt.checkpoint_dir = out_dir;
      opt.dump_dir = fs::path(cfg.work_dir) / "nan_dumps";
      auto r = enrich::single_stage_ablation_train(*bb, source, cfg.stage1, cfg.stage2, opt);
      std::printf("single-stage checkpoint: %s (final loss %.4f)\n", out_dir.c_str(),
                  r.losses.empty() ? 0.0 : r.losses.back());
      return 0;
    }
    if (gen->parsed()) {
      auto pipe = Pipeline::load(cfg);
      const auto ref = read_png(ref_path);
      ImageTensor img;
      const double secs = metrics::time_inference([&] { img = pipe->generate(ref, class_name, prompt, sf.config()); }, false);
      write_png(gen_out, img);
      if (!maps_dir.empty()) {
        const auto fitted = fit_reference(ref, pipe->backbone().config.image_size);
        const auto tokens = pipe->tokens(ref, class_name);
        disentangle::write_attention_maps(maps_dir, fitted, disentangle::attention_maps(pipe->backbone(), fitted, tokens),
                                          tokens.n_subject);
      }
      std::printf("wrote %s (%.2fs)\n", gen_out.c_str(), secs);
      return 0;
    }
    if (sweep->parsed()) {
      auto pipe = Pipeline::load(cfg);
      const auto ref = read_png(ref_path);
      fs::create_directories(sweep_out);
      const std::array<double, 5> grid = {0.0, 0.25, 0.5, 0.75, 1.0};
      for (double ls : grid) {
        for (double li : grid) {
          auto c = sf.config();
          c.lambda = {ls, li};
          const auto name = "lam_s" + lambda_label(ls) + "_i" + lambda_label(li) + ".png";
          write_png(fs::path(sweep_out) / name, pipe->generate(ref, class_name, prompt, c));
        }
      }
      std::printf("wrote 25 images to %s\n", sweep_out.c_str());
      return 0;
    }
    if (eval->parsed()) {
      std::ifstream in(manifest_path);
      const auto manifest = nlohmann::json::parse(in);
      std::vector<metrics::MethodRow> rows;
      if (manifest.contains("runs")) {
        for (const auto& run : manifest["runs"]) {
          auto rc = RunConfig::load(fs::path(manifest_path).parent_path() / run.at("config").get<std::string>());
          auto bb = backbone::Backbone::load(rc.backbone_checkpoint);
          auto s1 = disentangle::Stage1Model::load(rc.stage1_checkpoint);
          auto s2 = enrich::Stage2Model::load(rc.stage2_checkpoint);
          metrics::MethodRow row{run.at("name").get<std::string>(), {}};
          for (auto& [k, v] : toy_method_metrics(*bb, s1, s2, run).items()) row.values[k] = v.get<double>();
          rows.push_back(std::move(row));
        }
      } else {
        rows = metrics::read_method_table(manifest);
      }
      const auto ranked = metrics::mrank(rows);
      const auto text = metrics::format_report(ranked);
      fs::create_directories(eval_out);
      std::ofstream(fs::path(eval_out) / "report.txt") << text;
      write_json(fs::path(eval_out) / "report.json", metrics::report_json(ranked));
      std::fputs(text.c_str(), stdout);
      return 0;
    }
    if (serve->parsed()) {
      auto pipe = Pipeline::load(cfg);
      auto store = std::make_shared<service::RunStore>(runs_dir.empty() ? fs::path(cfg.work_dir) / "runs" : fs::path(runs_dir));
      service::Service svc(pipe, store, sopt);
      const int port = svc.bind();
      std::printf("listening on %s:%d\n", sopt.host.c_str(), port);
      std::fflush(stdout);
      svc.listen();
      return 0;
    }
  } catch (const subjtok::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
