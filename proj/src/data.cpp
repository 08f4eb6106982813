#include "subjtok/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <thread>

#include "json.hpp"
#include "subjtok/log.hpp"

namespace subjtok::data {

using json = nlohmann::json;

namespace {

constexpr std::array<std::string_view, 27> kTemplates = {
    "a photo of a S*",           "a rendering of a S*",        "a cropped photo of the S*",
    "the photo of a S*",         "a photo of a clean S*",      "a photo of a dirty S*",
    "a dark photo of the S*",    "a photo of my S*",           "a photo of the cool S*",
    "a close-up photo of a S*",  "a bright photo of the S*",   "a cropped photo of a S*",
    "a photo of the S*",         "a good photo of the S*",     "a photo of one S*",
    "a close-up photo of the S*", "a rendition of the S*",     "a photo of the clean S*",
    "a rendition of a S*",       "a photo of a nice S*",       "a good photo of a S*",
    "a photo of the nice S*",    "a photo of the small S*",    "a photo of the weird S*",
    "a photo of the large S*",   "a photo of a cool S*",       "a photo of a small S*",
};

constexpr std::array<std::string_view, 25> kLivePrompts = {
    "a S* in the jungle",
    "a S* in the snow",
    "a S* on the beach",
    "a S* on a cobblestone street",
    "a S* on top of pink fabric",
    "a S* on top of a wooden floor",
    "a S* with a city in the background",
    "a S* with a mountain in the background",
    "a S* with a blue house in the background",
    "a S* on top of a purple rug in a forest",
    "a S* with a wheat field in the background",
    "a S* with a tree and autumn leaves in the background",
    "a S* with the Eiffel Tower in the background",
    "a S* floating on top of water",
    "a S* floating in an ocean of milk",
    "a S* on top of green grass with sunflowers around it",
    "a S* on top of a mirror",
    "a S* on top of the sidewalk in a crowded street",
    "a S* on top of a dirt road",
    "a S* on top of a white rug",
    "a red S*",
    "a purple S*",
    "a shiny S*",
    "a wet S*",
    "a cube shaped S*",
};

constexpr std::array<std::string_view, 25> kNonlivePrompts = {
    "a S* in the jungle",
    "a S* in the snow",
    "a S* on the beach",
    "a S* on a cobblestone street",
    "a S* on top of pink fabric",
    "a S* on top of a wooden floor",
    "a S* with a city in the background",
    "a S* with a mountain in the background",
    "a S* with a blue house in the background",
    "a S* on top of a purple rug in a forest",
    "a S* wearing a red hat",
    "a S* wearing a Santa hat",
    "a S* wearing a rainbow scarf",
    "a S* wearing a black top hat and a monocle",
    "a S* in a chef outfit",
    "a S* in a firefighter outfit",
    "a S* in a police outfit",
    "a S* wearing pink glasses",
    "a S* wearing a yellow shirt",
    "a S* in a purple wizard outfit",
    "a red S*",
    "a purple S*",
    "a shiny S*",
    "a wet S*",
    "a cube shaped S*",
};

constexpr std::array<std::string_view, 6> kShapes = {"circle", "square", "triangle", "diamond", "cross", "ring"};
constexpr std::array<std::string_view, 8> kColors = {"red",    "green",  "blue", "yellow",
                                                     "purple", "orange", "pink", "cyan"};
constexpr std::array<std::array<float, 3>, 8> kColorRgb = {{
    {0.90F, 0.12F, 0.12F},
    {0.15F, 0.80F, 0.20F},
    {0.15F, 0.30F, 0.95F},
    {0.95F, 0.88F, 0.10F},
    {0.60F, 0.15F, 0.80F},
    {0.98F, 0.55F, 0.08F},
    {0.98F, 0.45F, 0.75F},
    {0.10F, 0.88F, 0.90F},
}};
constexpr std::array<std::string_view, 4> kPatterns = {"solid", "striped", "dotted", "checkered"};
constexpr std::array<std::string_view, 10> kScenes = {"jungle", "snow", "beach", "cobblestone", "fabric",
                                                      "wood",   "city", "mountain", "house",   "rug"};
constexpr std::array<std::string_view, 10> kScenePhrases = {
    "in the jungle",
    "in the snow",
    "on the beach",
    "on a cobblestone street",
    "on top of pink fabric",
    "on top of a wooden floor",
    "with a city in the background",
    "with a mountain in the background",
    "with a blue house in the background",
    "on top of a purple rug in a forest",
};

float uniform(std::mt19937_64& rng, float lo, float hi) {
  return std::uniform_real_distribution<float>(lo, hi)(rng);
}

Tensor rgb(float r, float g, float b) { return torch::tensor({r, g, b}).view({3, 1, 1}); }

/// Smooth value noise in [0,1]: a random coarse grid bilinearly upsampled.
Tensor value_noise(int64_t res, int64_t cells, std::mt19937_64& rng) {
  std::vector<float> v(static_cast<size_t>(cells * cells));
  for (auto& x : v) x = uniform(rng, 0.0F, 1.0F);
  auto grid = torch::tensor(v).view({1, 1, cells, cells});
  namespace F = torch::nn::functional;
  return F::interpolate(grid, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{res, res})
                                  .mode(torch::kBicubic)
                                  .align_corners(true))
      .view({res, res})
      .clamp(0.0, 1.0);
}

struct Grid {
  Tensor x;  // [-1,1], left to right
  Tensor y;  // [-1,1], top to bottom
};

Grid make_grid(int64_t res) {
  auto c = (torch::arange(res, torch::kFloat32) + 0.5) / static_cast<double>(res) * 2.0 - 1.0;
  auto yy = c.view({res, 1}).expand({res, res});
  auto xx = c.view({1, res}).expand({res, res});
  return {xx.contiguous(), yy.contiguous()};
}

Tensor shape_mask(int shape, const Tensor& px, const Tensor& py) {
  auto r = torch::sqrt(px * px + py * py);
  switch (shape) {
    case 0:
      return r <= 1.0;
    case 1:
      return torch::maximum(px.abs(), py.abs()) <= 0.82;
    case 2: {
      // upward triangle with vertices (0,-1), (-0.95,0.7), (0.95,0.7)
      auto bottom = py <= 0.7;
      auto left = (py + 1.0) >= (-px) * (1.7 / 0.95);
      auto right = (py + 1.0) >= px * (1.7 / 0.95);
      return bottom.logical_and(left).logical_and(right);
    }
    case 3:
      return (px.abs() + py.abs()) <= 1.0;
    case 4:
      return ((px.abs() <= 0.36).logical_and(py.abs() <= 1.0))
          .logical_or((py.abs() <= 0.36).logical_and(px.abs() <= 1.0));
    case 5:
      return (r <= 1.0).logical_and(r >= 0.52);
    default:
      throw DataError("unknown shape index");
  }
}

Tensor pattern_mask(int pattern, const Tensor& px, const Tensor& py) {
  switch (pattern) {
    case 0:
      return torch::zeros_like(px, torch::kBool);
    case 1:
      return torch::sin(px * (3.0 * std::numbers::pi)) > 0.0;
    case 2: {
      auto fx = px * 2.5 - torch::floor(px * 2.5) - 0.5;
      auto fy = py * 2.5 - torch::floor(py * 2.5) - 0.5;
      return (fx * fx + fy * fy) < 0.09;
    }
    case 3:
      return torch::remainder(torch::floor(px * 2.0) + torch::floor(py * 2.0), 2.0) > 0.5;
    default:
      throw DataError("unknown pattern index");
  }
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::span<const std::string_view> training_templates() { return kTemplates; }

std::span<const std::string_view> editing_prompts(SubjectCategory category) {
  return category == SubjectCategory::live ? std::span<const std::string_view>(kLivePrompts)
                                           : std::span<const std::string_view>(kNonlivePrompts);
}

std::vector<std::string> editing_prompts(std::string_view category) {
  SubjectCategory c;
  if (category == "live") {
    c = SubjectCategory::live;
  } else if (category == "nonlive" || category == "non-live") {
    c = SubjectCategory::nonlive;
  } else {
    throw DataError("unknown subject category '" + std::string(category) + "' (expected live|nonlive)");
  }
  const auto list = editing_prompts(c);
  return {list.begin(), list.end()};
}

int count_placeholders(std::string_view prompt) {
  int n = 0;
  for (size_t pos = prompt.find(kPlaceholder); pos != std::string_view::npos;
       pos = prompt.find(kPlaceholder, pos + kPlaceholder.size())) {
    ++n;
  }
  return n;
}

std::string substitute_placeholder(std::string_view prompt, std::string_view word) {
  const int n = count_placeholders(prompt);
  if (n != 1) {
    throw PromptError("prompt must contain exactly one " + std::string(kPlaceholder) + ", found " +
                      std::to_string(n) + ": '" + std::string(prompt) + "'");
  }
  const auto pos = prompt.find(kPlaceholder);
  std::string out(prompt.substr(0, pos));
  out += word;
  out += prompt.substr(pos + kPlaceholder.size());
  return out;
}

// ---------------------------------------------------------------------------

std::span<const std::string_view> ToyLexicon::shapes() { return kShapes; }
std::span<const std::string_view> ToyLexicon::colors() { return kColors; }
std::span<const std::string_view> ToyLexicon::patterns() { return kPatterns; }
std::span<const std::string_view> ToyLexicon::scenes() { return kScenes; }
std::string_view ToyLexicon::scene_phrase(size_t scene) { return kScenePhrases.at(scene); }
std::array<float, 3> ToyLexicon::color_rgb(size_t color) { return kColorRgb.at(color); }

std::string Subject::class_name() const { return std::string(kShapes.at(static_cast<size_t>(shape))); }

std::string Subject::description() const {
  std::string d(kColors.at(static_cast<size_t>(color)));
  if (pattern != 0) {
    d += ' ';
    d += kPatterns.at(static_cast<size_t>(pattern));
  }
  d += ' ';
  d += class_name();
  return d;
}

int Subject::count() { return static_cast<int>(kShapes.size() * kColors.size() * kPatterns.size()); }

int Subject::id() const {
  return (shape * static_cast<int>(kColors.size()) + color) * static_cast<int>(kPatterns.size()) + pattern;
}

Subject Subject::from_id(int id) {
  if (id < 0 || id >= count()) throw DataError("subject id out of range");
  Subject s;
  s.pattern = id % static_cast<int>(kPatterns.size());
  id /= static_cast<int>(kPatterns.size());
  s.color = id % static_cast<int>(kColors.size());
  s.shape = id / static_cast<int>(kColors.size());
  return s;
}

double ToySample::mask_area_ratio() const { return mask.to(torch::kFloat64).mean().item<double>(); }

Tensor ToyWorld::background(int scene, std::mt19937_64& rng) const {
  const auto res = resolution_;
  const auto g = make_grid(res);
  const auto n = [&](int64_t cells) { return value_noise(res, cells, rng); };
  switch (scene) {
    case 0: {  // jungle
      auto base = rgb(0.05F, 0.28F, 0.08F);
      auto leaf = rgb(0.20F, 0.55F, 0.15F);
      auto t = n(6);
      return base + (leaf - base) * t.unsqueeze(0);
    }
    case 1: {  // snow
      auto t = n(5).unsqueeze(0);
      return rgb(0.86F, 0.90F, 0.95F) + 0.1F * (t - 0.5F);
    }
    case 2: {  // beach
      const float horizon = uniform(rng, -0.3F, 0.2F);
      auto sky = rgb(0.45F, 0.70F, 0.95F);
      auto sand = rgb(0.90F, 0.80F, 0.55F) + 0.06F * (n(8).unsqueeze(0) - 0.5F);
      auto below = (g.y > horizon).to(torch::kFloat32).unsqueeze(0);
      return sky * (1.0F - below) + sand * below;
    }
    case 3: {  // cobblestone
      const float cells = uniform(rng, 5.0F, 8.0F);
      const float ox = uniform(rng, 0.0F, 1.0F);
      const float oy = uniform(rng, 0.0F, 1.0F);
      auto fx = (g.x + 1.0) * cells / 2.0 + ox;
      auto fy = (g.y + 1.0) * cells / 2.0 + oy;
      auto edge = torch::minimum((fx - torch::round(fx)).abs(), (fy - torch::round(fy)).abs()) < 0.08;
      auto stone = rgb(0.52F, 0.52F, 0.50F) + 0.10F * (n(10).unsqueeze(0) - 0.5F);
      return torch::where(edge.unsqueeze(0), rgb(0.25F, 0.25F, 0.25F).expand({3, res, res}), stone);
    }
    case 4: {  // pink fabric
      const float f = uniform(rng, 10.0F, 16.0F);
      auto weave = torch::sin(g.x * f) * torch::sin(g.y * f);
      return rgb(0.85F, 0.62F, 0.70F) + 0.05F * weave.unsqueeze(0);
    }
    case 5: {  // wooden floor
      const float planks = uniform(rng, 4.0F, 7.0F);
      auto band = torch::floor((g.y + 1.0) * planks / 2.0);
      auto shade = torch::remainder(band * 0.37, 1.0) * 0.12;
      auto grain = 0.04 * torch::sin(g.x * 20.0 + band * 3.0);
      return rgb(0.55F, 0.35F, 0.18F) + (shade + grain).unsqueeze(0);
    }
    case 6: {  // city at night
      auto lights = (n(12) > 0.72).to(torch::kFloat32).unsqueeze(0);
      return rgb(0.08F, 0.10F, 0.22F) * (1.0F - lights) + rgb(0.95F, 0.85F, 0.40F) * lights;
    }
    case 7: {  // mountain
      const float peak_x = uniform(rng, -0.4F, 0.4F);
      const float peak_y = uniform(rng, -0.7F, -0.3F);
      auto sky = rgb(0.60F, 0.80F, 0.98F).expand({3, res, res});
      auto rock = (g.y >= peak_y + (g.x - peak_x).abs() * 1.2).unsqueeze(0);
      auto grass = (g.y > 0.55).unsqueeze(0);
      auto out = torch::where(rock, rgb(0.45F, 0.43F, 0.42F).expand({3, res, res}), sky);
      return torch::where(grass, rgb(0.30F, 0.55F, 0.25F).expand({3, res, res}), out);
    }
    case 8: {  // blue house
      const float hx = uniform(rng, -0.6F, 0.2F);
      auto sky = rgb(0.70F, 0.85F, 0.98F).expand({3, res, res});
      auto lawn = (g.y > 0.3).unsqueeze(0);
      auto house = (g.x > hx).logical_and(g.x < hx + 0.8).logical_and(g.y > -0.4).logical_and(g.y <= 0.3);
      auto out = torch::where(lawn, rgb(0.40F, 0.70F, 0.35F).expand({3, res, res}), sky);
      return torch::where(house.unsqueeze(0), rgb(0.20F, 0.35F, 0.75F).expand({3, res, res}), out);
    }
    case 9: {  // purple rug in a forest
      auto forest = rgb(0.10F, 0.30F, 0.12F) + 0.12F * (n(7).unsqueeze(0) - 0.5F);
      const float ry = uniform(rng, 0.2F, 0.5F);
      auto rug = ((g.x * g.x) / 0.8 + ((g.y - ry) * (g.y - ry)) / 0.25) < 1.0;
      return torch::where(rug.unsqueeze(0), rgb(0.50F, 0.30F, 0.58F).expand({3, res, res}), forest);
    }
    case -1:
      return rgb(0.5F, 0.5F, 0.5F).expand({3, res, res}).clone();
    default:
      throw DataError("unknown scene index " + std::to_string(scene));
  }
}

Pose ToyWorld::random_pose(std::mt19937_64& rng) const {
  Pose p;
  p.scale = uniform(rng, 0.30F, 0.50F);
  const float margin = 0.95F - p.scale;
  p.cx = uniform(rng, -margin, margin) * 0.8F;
  p.cy = uniform(rng, -margin, margin) * 0.8F;
  p.angle = uniform(rng, -0.6F, 0.6F);
  return p;
}

ToySample ToyWorld::render(const Subject& subject, int scene, const Pose& pose, std::mt19937_64& rng) const {
  const auto g = make_grid(resolution_);
  const float c = std::cos(pose.angle);
  const float s = std::sin(pose.angle);
  auto dx = (g.x - pose.cx) / pose.scale;
  auto dy = (g.y - pose.cy) / pose.scale;
  auto px = c * dx + s * dy;
  auto py = -s * dx + c * dy;

  auto inside = shape_mask(subject.shape, px, py);
  auto secondary = pattern_mask(subject.pattern, px, py);
  const auto base = ToyLexicon::color_rgb(static_cast<size_t>(subject.color));
  auto main_color = rgb(base[0], base[1], base[2]);
  auto alt_color = main_color * 0.4F + 0.08F;
  // light shading gives solid subjects some structure
  auto shade = (1.0 - 0.12 * (px + py) / 2.0).unsqueeze(0);
  auto subject_rgb = torch::where(secondary.unsqueeze(0), alt_color.expand({3, resolution_, resolution_}),
                                  main_color.expand({3, resolution_, resolution_})) *
                     shade;

  auto bg = background(scene, rng);
  auto chw = torch::where(inside.unsqueeze(0), subject_rgb, bg).clamp(0.0, 1.0);

  ToySample out;
  out.image = ImageTensor::from_chw(chw);
  out.mask = inside.to(torch::kFloat32);
  out.subject = subject;
  out.scene = scene;
  out.caption = scene >= 0 ? random_caption(subject, scene, rng) : "a photo of a " + subject.description();
  return out;
}

ToySample ToyWorld::render_canonical(const Subject& subject) const {
  std::mt19937_64 rng(0);
  Pose p;
  p.scale = 0.55F;
  return render(subject, -1, p, rng);
}

std::string ToyWorld::random_caption(const Subject& subject, int scene, std::mt19937_64& rng) const {
  const int form = std::uniform_int_distribution<int>(0, 3)(rng);
  std::string desc;
  switch (form) {
    case 0:
      desc = subject.class_name();
      break;
    case 1:
      desc = std::string(kColors.at(static_cast<size_t>(subject.color))) + " " + subject.class_name();
      break;
    default:
      desc = subject.description();
  }
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.25) {
    return substitute_placeholder(sample_template(rng), desc);
  }
  return "a " + desc + " " + std::string(ToyLexicon::scene_phrase(static_cast<size_t>(scene)));
}

ToySample ToyWorld::random_sample(std::mt19937_64& rng) const {
  const auto subject = Subject::from_id(std::uniform_int_distribution<int>(0, Subject::count() - 1)(rng));
  const int scene = std::uniform_int_distribution<int>(0, static_cast<int>(kScenes.size()) - 1)(rng);
  for (;;) {
    auto sample = render(subject, scene, random_pose(rng), rng);
    const double ratio = sample.mask_area_ratio();
    if (ratio > kMinAreaRatio && ratio < kMaxAreaRatio) return sample;
  }
}

ToyCorpus synth_toy_corpus(int n_subjects, int n_scenes, uint64_t seed, int64_t resolution) {
  if (n_subjects < 1 || n_scenes < 1) throw DataError("n_subjects and n_scenes must be >= 1");
  if (n_subjects > Subject::count()) {
    throw DataError("toy world has only " + std::to_string(Subject::count()) + " distinct subjects");
  }
  std::mt19937_64 rng(seed);
  std::vector<int> ids(static_cast<size_t>(Subject::count()));
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  std::shuffle(ids.begin(), ids.end(), rng);

  const ToyWorld world(resolution);
  ToyCorpus corpus;
  corpus.n_scenes = n_scenes;
  const int scene_count = static_cast<int>(kScenes.size());
  for (int si = 0; si < n_subjects; ++si) {
    const auto subject = Subject::from_id(ids[static_cast<size_t>(si)]);
    corpus.subjects.push_back(subject);
    const int offset = std::uniform_int_distribution<int>(0, scene_count - 1)(rng);
    for (int k = 0; k < n_scenes; ++k) {
      const int scene = (offset + k) % scene_count;
      for (;;) {
        auto sample = world.render(subject, scene, world.random_pose(rng), rng);
        const double ratio = sample.mask_area_ratio();
        if (ratio > kMinAreaRatio && ratio < kMaxAreaRatio) {
          corpus.samples.push_back(std::move(sample));
          break;
        }
      }
    }
  }
  return corpus;
}

namespace {

std::array<double, 4> mask_bbox(const Tensor& mask) {
  auto rows = mask.sum(1).nonzero().view(-1);
  auto cols = mask.sum(0).nonzero().view(-1);
  if (rows.numel() == 0) return {0, 0, 0, 0};
  const double y0 = rows.min().item<double>();
  const double y1 = rows.max().item<double>() + 1;
  const double x0 = cols.min().item<double>();
  const double x1 = cols.max().item<double>() + 1;
  return {x0, y0, x1 - x0, y1 - y0};
}

}  // namespace

void write_toy_corpus(const ToyCorpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "canonical");
  std::ofstream index(dir / "index.jsonl");
  std::ofstream manifest(dir / "manifest.jsonl");
  const ToyWorld world(corpus.samples.empty() ? 64 : corpus.samples.front().image.height());
  for (size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& s = corpus.samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.png", i);
    write_png(dir / "images" / name, s.image);
    write_png(dir / "masks" / name, ImageTensor(s.mask.unsqueeze(-1)));
    const auto box = mask_bbox(s.mask);
    json rec = {{"id", i},
                {"image", std::string("images/") + name},
                {"mask", std::string("masks/") + name},
                {"class", s.class_name()},
                {"subject", s.subject.id()},
                {"subject_description", s.subject.description()},
                {"scene", std::string(kScenes.at(static_cast<size_t>(s.scene)))},
                {"caption", s.caption},
                {"bbox", {box[0], box[1], box[2], box[3]}}};
    index << rec.dump() << '\n';
    manifest << json{{"image", (dir / "images" / name).string()},
                     {"bbox", {box[0], box[1], box[2], box[3]}},
                     {"class", s.class_name()}}
                    .dump()
             << '\n';
  }
  for (const auto& subject : corpus.subjects) {
    write_png(dir / "canonical" / ("subject_" + std::to_string(subject.id()) + ".png"),
              world.render_canonical(subject).image);
  }
}

// ---------------------------------------------------------------------------

bool keep_crop(double area_ratio) { return area_ratio >= kMinAreaRatio && area_ratio <= kMaxAreaRatio; }

BoxAnnotation parse_manifest_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest row: ") + e.what());
  }
  if (!j.is_object() || !j.contains("image") || !j.contains("bbox") || !j.contains("class")) {
    throw DataError("manifest row needs image, bbox and class: " + std::string(line));
  }
  const auto& bbox = j["bbox"];
  if (!bbox.is_array() || bbox.size() != 4 || !std::all_of(bbox.begin(), bbox.end(), [](const json& v) {
        return v.is_number();
      })) {
    throw DataError("bbox must be [x, y, w, h]: " + std::string(line));
  }
  BoxAnnotation a;
  a.image = j["image"].get<std::string>();
  a.x = bbox[0].get<double>();
  a.y = bbox[1].get<double>();
  a.w = bbox[2].get<double>();
  a.h = bbox[3].get<double>();
  a.class_name = trim(j["class"].get<std::string>());
  if (a.class_name.empty()) throw DataError("empty class name in manifest row");
  if (a.w <= 0 || a.h <= 0 || a.x < 0 || a.y < 0) throw DataError("degenerate bbox in manifest row");
  return a;
}

std::string_view sample_template(std::mt19937_64& rng) {
  return kTemplates[std::uniform_int_distribution<size_t>(0, kTemplates.size() - 1)(rng)];
}

namespace {

std::optional<TrainingPair> make_pair(const BoxAnnotation& a, const std::filesystem::path& base,
                                      int64_t resolution, uint64_t seed, BuildStats& stats,
                                      std::mutex& mu) {
  ImageTensor image;
  try {
    image = read_png(a.image.is_absolute() ? a.image : base / a.image);
  } catch (const DataError& e) {
    LOG_WARN("skipping unreadable image %s: %s", a.image.string().c_str(), e.what());
    std::lock_guard lock(mu);
    ++stats.unreadable;
    return std::nullopt;
  }
  const double W = static_cast<double>(image.width());
  const double H = static_cast<double>(image.height());
  if (a.x + a.w > W + 1e-9 || a.y + a.h > H + 1e-9) {
    throw DataError("bbox exceeds image bounds for " + a.image.string());
  }
  const double ratio = (a.w * a.h) / (W * H);
  if (!keep_crop(ratio)) {
    std::lock_guard lock(mu);
    ++stats.filtered;
    return std::nullopt;
  }
  const auto x0 = static_cast<int64_t>(std::floor(a.x));
  const auto y0 = static_cast<int64_t>(std::floor(a.y));
  const auto x1 = std::max(x0 + 1, static_cast<int64_t>(std::ceil(a.x + a.w)));
  const auto y1 = std::max(y0 + 1, static_cast<int64_t>(std::ceil(a.y + a.h)));
  auto crop = ImageTensor(image.hwc().slice(0, y0, y1).slice(1, x0, x1).clone());
  std::mt19937_64 rng(seed);
  TrainingPair pair;
  pair.prompt_template = std::string(sample_template(rng));
  pair.prompt_text = substitute_placeholder(pair.prompt_template, a.class_name);
  pair.image = resize(crop, resolution, resolution);
  pair.class_name = a.class_name;
  std::lock_guard lock(mu);
  ++stats.kept;
  return pair;
}

}  // namespace

std::vector<TrainingPair> build_pairs(const std::filesystem::path& manifest, const BuildOptions& options,
                                      BuildStats* stats_out) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  std::vector<BoxAnnotation> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    rows.push_back(parse_manifest_line(line));
  }
  BuildStats stats;
  stats.rows = rows.size();
  const auto base = manifest.parent_path();
  std::vector<std::optional<TrainingPair>> slots(rows.size());
  std::mutex mu;
  std::vector<TrainingPair> unordered;
  const int workers = std::max(1, options.workers);
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  auto work = [&](int w) {
    try {
      for (size_t i = static_cast<size_t>(w); i < rows.size(); i += static_cast<size_t>(workers)) {
        auto pair = make_pair(rows[i], base, options.resolution, options.seed + i, stats, mu);
        if (options.deterministic) {
          slots[i] = std::move(pair);
        } else if (pair) {
          std::lock_guard lock(mu);
          unordered.push_back(std::move(*pair));
        }
      }
    } catch (...) {
      errors[static_cast<size_t>(w)] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  if (stats_out) *stats_out = stats;
  if (!options.deterministic) return unordered;
  std::vector<TrainingPair> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  return out;
}

// ---------------------------------------------------------------------------

PairBatch ToyStream::next(int64_t n, std::mt19937_64& rng) {
  PairBatch b;
  std::vector<Tensor> imgs;
  for (int64_t i = 0; i < n; ++i) {
    auto s = world_.random_sample(rng);
    imgs.push_back(s.image.chw());
    b.templates.emplace_back(sample_template(rng));
    b.class_names.push_back(s.class_name());
  }
  b.images = torch::stack(imgs);
  return b;
}

PairList::PairList(std::vector<TrainingPair> pairs) : pairs_(std::move(pairs)) {
  if (pairs_.empty()) throw DataError("no training pairs");
}

PairBatch PairList::next(int64_t n, std::mt19937_64& rng) {
  PairBatch b;
  std::vector<Tensor> imgs;
  std::uniform_int_distribution<size_t> pick(0, pairs_.size() - 1);
  for (int64_t i = 0; i < n; ++i) {
    const auto& p = pairs_[pick(rng)];
    imgs.push_back(p.image.chw());
    b.templates.push_back(p.prompt_template);
    b.class_names.push_back(p.class_name);
  }
  b.images = torch::stack(imgs);
  return b;
}

// ---------------------------------------------------------------------------

Tensor augment(const Tensor& images, const AugmentConfig& config, std::mt19937_64& rng) {
  if (!config.enabled) return images;
  namespace F = torch::nn::functional;
  const auto B = images.size(0);
  std::vector<float> theta;
  std::vector<float> bright;
  std::vector<float> contr;
  theta.reserve(static_cast<size_t>(B) * 6);
  for (int64_t b = 0; b < B; ++b) {
    const float scale = std::sqrt(uniform(rng, static_cast<float>(config.min_crop_scale),
                                          static_cast<float>(config.max_crop_scale)));
    const float max_shift = 1.0F - scale;
    const float tx = uniform(rng, -max_shift, max_shift);
    const float ty = uniform(rng, -max_shift, max_shift);
    const float deg = uniform(rng, -static_cast<float>(config.max_rotation_deg),
                              static_cast<float>(config.max_rotation_deg));
    const float a = deg * static_cast<float>(std::numbers::pi) / 180.0F;
    const float flip = uniform(rng, 0.0F, 1.0F) < config.flip_prob ? -1.0F : 1.0F;
    const float c = std::cos(a) * scale;
    const float s = std::sin(a) * scale;
    theta.insert(theta.end(), {c * flip, -s, tx, s * flip, c, ty});
    bright.push_back(uniform(rng, -static_cast<float>(config.brightness), static_cast<float>(config.brightness)));
    contr.push_back(1.0F + uniform(rng, -static_cast<float>(config.contrast), static_cast<float>(config.contrast)));
  }
  auto th = torch::tensor(theta).view({B, 2, 3}).to(images.device());
  auto grid = F::affine_grid(th, images.sizes().vec(), false);
  auto warped = F::grid_sample(images, grid,
                               F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
  auto br = torch::tensor(bright).view({B, 1, 1, 1}).to(images.device());
  auto ct = torch::tensor(contr).view({B, 1, 1, 1}).to(images.device());
  auto mean = warped.mean({1, 2, 3}, true);
  return ((warped - mean) * ct + mean + br).clamp(0.0, 1.0);
}

}  // namespace subjtok::data
