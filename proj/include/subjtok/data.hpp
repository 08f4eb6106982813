#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subjtok/image.hpp"

namespace subjtok::data {

inline constexpr std::string_view kPlaceholder = "S*";

// ---------------------------------------------------------------------------
// Prompt library

enum class SubjectCategory { live, nonlive };

/// The 27 CLIP ImageNet-style training templates, each containing S*.
std::span<const std::string_view> training_templates();

/// The 25 evaluation editing prompts for a subject category.
std::span<const std::string_view> editing_prompts(SubjectCategory category);
std::vector<std::string> editing_prompts(std::string_view category);

/// Replaces the single S* in `prompt` with `word`. Throws PromptError when the
/// prompt does not contain exactly one placeholder.
std::string substitute_placeholder(std::string_view prompt, std::string_view word);
int count_placeholders(std::string_view prompt);

// ---------------------------------------------------------------------------
// Toy world: procedurally rendered subjects on named scenes.

struct ToyLexicon {
  static std::span<const std::string_view> shapes();
  static std::span<const std::string_view> colors();
  static std::span<const std::string_view> patterns();
  /// Scene keys. `scene_phrase(k)` gives the caption suffix for scene k.
  static std::span<const std::string_view> scenes();
  static std::string_view scene_phrase(size_t scene);
  static std::array<float, 3> color_rgb(size_t color);
};

struct Subject {
  int shape = 0;
  int color = 0;
  int pattern = 0;

  /// Class name used for queries and text prompts (the shape word).
  std::string class_name() const;
  /// "red striped circle"
  std::string description() const;
  int id() const;
  static Subject from_id(int id);
  static int count();
  bool operator==(const Subject&) const = default;
};

struct Pose {
  float cx = 0.0F;
  float cy = 0.0F;
  float scale = 0.4F;
  float angle = 0.0F;
};

struct ToySample {
  ImageTensor image;
  Tensor mask;  // H×W, 1 on subject pixels
  Subject subject;
  int scene = -1;  // -1 for the neutral canonical backdrop
  std::string caption;

  std::string class_name() const { return subject.class_name(); }
  double mask_area_ratio() const;
};

class ToyWorld {
 public:
  explicit ToyWorld(int64_t resolution = 64) : resolution_(resolution) {}

  ToySample render(const Subject& subject, int scene, const Pose& pose, std::mt19937_64& rng) const;
  /// Subject centered on a neutral grey backdrop; the identity reference for IV scoring.
  ToySample render_canonical(const Subject& subject) const;
  Pose random_pose(std::mt19937_64& rng) const;
  /// A fully random sample; used as an unbounded training stream.
  ToySample random_sample(std::mt19937_64& rng) const;
  std::string random_caption(const Subject& subject, int scene, std::mt19937_64& rng) const;

  int64_t resolution() const { return resolution_; }

 private:
  Tensor background(int scene, std::mt19937_64& rng) const;
  int64_t resolution_;
};

struct ToyCorpus {
  std::vector<ToySample> samples;
  std::vector<Subject> subjects;
  int n_scenes = 0;
};

/// n_subjects distinct subjects, each rendered in n_scenes scenes at random
/// poses. Deterministic per seed.
ToyCorpus synth_toy_corpus(int n_subjects, int n_scenes, uint64_t seed, int64_t resolution = 64);

/// Writes images/, masks/, canonical/, index.jsonl and manifest.jsonl.
void write_toy_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Bbox-annotated corpora

struct BoxAnnotation {
  std::filesystem::path image;
  double x = 0, y = 0, w = 0, h = 0;
  std::string class_name;
};

struct TrainingPair {
  std::string prompt_template;  // contains S*
  std::string prompt_text;      // class name substituted
  ImageTensor image;
  std::string class_name;
  std::optional<Tensor> mask;
};

inline constexpr double kMinAreaRatio = 0.02;
inline constexpr double kMaxAreaRatio = 0.80;

/// Crops whose bbox covers more than 80% or less than 2% of the image are
/// dropped; the bounds themselves are kept.
bool keep_crop(double area_ratio);

/// Parses one manifest record. Throws DataError on malformed input.
BoxAnnotation parse_manifest_line(std::string_view line);

struct BuildOptions {
  int64_t resolution = 256;
  uint64_t seed = 0;
  int workers = 1;
  bool deterministic = true;
};

struct BuildStats {
  size_t rows = 0;
  size_t kept = 0;
  size_t filtered = 0;
  size_t unreadable = 0;
};

std::vector<TrainingPair> build_pairs(const std::filesystem::path& manifest, const BuildOptions& options,
                                      BuildStats* stats = nullptr);

/// Chooses a training template uniformly at random.
std::string_view sample_template(std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Training sources

struct PairBatch {
  Tensor images;                        // [B, 3, H, W] in [0,1]
  std::vector<std::string> templates;   // each with one S*
  std::vector<std::string> class_names;
};

class PairSource {
 public:
  virtual ~PairSource() = default;
  virtual PairBatch next(int64_t n, std::mt19937_64& rng) = 0;
};

/// Unbounded stream of freshly rendered toy samples.
class ToyStream final : public PairSource {
 public:
  explicit ToyStream(int64_t resolution) : world_(resolution) {}
  PairBatch next(int64_t n, std::mt19937_64& rng) override;

 private:
  ToyWorld world_;
};

/// Samples with replacement from materialized pairs.
class PairList final : public PairSource {
 public:
  explicit PairList(std::vector<TrainingPair> pairs);
  PairBatch next(int64_t n, std::mt19937_64& rng) override;
  size_t size() const { return pairs_.size(); }

 private:
  std::vector<TrainingPair> pairs_;
};

// ---------------------------------------------------------------------------
// Augmentation applied to reference images before tokenization.

struct AugmentConfig {
  double flip_prob = 0.5;
  double min_crop_scale = 0.6;
  double max_crop_scale = 1.0;
  double max_rotation_deg = 15.0;
  double brightness = 0.2;
  double contrast = 0.2;
  bool enabled = true;
};

/// Batched augmentation of B×3×H×W images in [0,1].
Tensor augment(const Tensor& images, const AugmentConfig& config, std::mt19937_64& rng);

}  // namespace subjtok::data
