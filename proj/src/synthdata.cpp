#include "fewvlm/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "fewvlm/error.hpp"
#include "fewvlm/prompts.hpp"

namespace fewvlm::synth {

namespace {

constexpr std::array<std::string_view, kShapes> kShapeNames = {"circle", "square", "triangle", "star"};
constexpr std::array<std::string_view, kColors> kColorNames = {"red", "blue", "green", "black", "yellow"};
constexpr std::array<std::string_view, 3> kCaptionOpeners = {"a picture of", "a photo of", "an image of"};

std::string scene_id(std::string_view prefix, std::size_t i) {
  std::ostringstream out;
  out << prefix << '_' << std::setw(6) << std::setfill('0') << i;
  return out.str();
}

std::vector<std::size_t> distinct_cells(Rng& rng, std::size_t n) {
  std::vector<std::size_t> cells(kGridSide * kGridSide);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(std::span<std::size_t>(cells));
  cells.resize(n);
  return cells;
}

std::size_t shape_count(const SceneSpec& scene, Shape s) {
  return static_cast<std::size_t>(
      std::count_if(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) { return o.shape == s; }));
}

}  // namespace

std::string_view shape_name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string_view color_name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

std::optional<Shape> parse_shape(std::string_view s) {
  for (std::size_t i = 0; i < kShapes; ++i)
    if (kShapeNames[i] == s) return static_cast<Shape>(i);
  return std::nullopt;
}

std::optional<Color> parse_color(std::string_view s) {
  for (std::size_t i = 0; i < kColors; ++i)
    if (kColorNames[i] == s) return static_cast<Color>(i);
  return std::nullopt;
}

void SceneSpec::validate() const {
  if (objects.empty()) fail(ErrorCode::kInvalidArgument, "scene has no objects");
  if (objects.size() > kMaxObjects) {
    fail(ErrorCode::kTooManyObjects, "scene has " + std::to_string(objects.size()) + " objects, at most 36 fit");
  }
  for (const auto& o : objects) {
    if (o.cell >= kGridSide * kGridSide) fail(ErrorCode::kInvalidArgument, "object cell outside the 6x6 grid");
    if (static_cast<std::size_t>(o.shape) >= kShapes || static_cast<std::size_t>(o.color) >= kColors) {
      fail(ErrorCode::kInvalidArgument, "object attribute outside the inventory");
    }
  }
}

RegionFeatures render_features(const SceneSpec& scene, const WorldConfig& world) {
  if (scene.objects.size() > kMaxObjects || scene.objects.size() > world.n_regions) {
    fail(ErrorCode::kTooManyObjects, "scene has " + std::to_string(scene.objects.size()) + " objects but only " +
                                         std::to_string(std::min(world.n_regions, kMaxObjects)) + " region slots");
  }
  scene.validate();
  if (world.feature_dim < 16) fail(ErrorCode::kInvalidArgument, "feature_dim must be >= 16");
  const std::size_t d = world.feature_dim;
  // The projection depends only on the world, so every scene shares it.
  std::vector<double> proj((kShapes + kColors) * d);
  Rng proj_rng(world.projection_seed);
  for (auto& p : proj) p = proj_rng.normal() / std::sqrt(2.0);

  RegionFeatures r;
  r.n_regions = world.n_regions;
  r.dim = d;
  r.features.assign(r.n_regions * d, 0.0f);
  r.boxes.assign(r.n_regions * 4, 0.0f);
  Rng noise(scene.seed);
  const double bound = 3.0 * world.noise;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    const double* ps = proj.data() + static_cast<std::size_t>(o.shape) * d;
    const double* pc = proj.data() + (kShapes + static_cast<std::size_t>(o.color)) * d;
    for (std::size_t k = 0; k < d; ++k) {
      const double eps = std::clamp(noise.normal() * world.noise, -bound, bound);
      r.features[i * d + k] = static_cast<float>(ps[k] + pc[k] + eps);
    }
    const double cell = 1.0 / static_cast<double>(kGridSide);
    const double x = static_cast<double>(o.cell % kGridSide) * cell;
    const double y = static_cast<double>(o.cell / kGridSide) * cell;
    r.boxes[i * 4 + 0] = static_cast<float>(x);
    r.boxes[i * 4 + 1] = static_cast<float>(y);
    r.boxes[i * 4 + 2] = static_cast<float>(std::min(1.0, x + cell));
    r.boxes[i * 4 + 3] = static_cast<float>(std::min(1.0, y + cell));
  }
  r.validate();
  return r;
}

SceneSpec random_scene(Rng& rng, std::size_t min_objects, std::size_t max_objects) {
  if (min_objects < 1 || min_objects > max_objects) fail(ErrorCode::kInvalidArgument, "bad object count range");
  if (max_objects > kMaxObjects) fail(ErrorCode::kTooManyObjects, "at most 36 objects fit the grid");
  SceneSpec scene;
  const auto n = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(min_objects),
                                                    static_cast<std::int64_t>(max_objects)));
  const auto cells = distinct_cells(rng, n);
  for (std::size_t i = 0; i < n; ++i) {
    scene.objects.push_back({static_cast<Shape>(rng.below(kShapes)), static_cast<Color>(rng.below(kColors)), cells[i]});
  }
  scene.seed = rng.next_u64();
  return scene;
}

std::string scene_caption(const SceneSpec& scene) {
  std::string out;
  for (const auto& o : scene.objects) {
    if (!out.empty()) out += " next to ";
    out += "a ";
    out += color_name(o.color);
    out += ' ';
    out += shape_name(o.shape);
  }
  return out;
}

std::optional<std::vector<std::pair<Color, Shape>>> parse_caption(std::string_view caption) {
  std::vector<std::string> words;
  std::istringstream in{std::string(caption)};
  for (std::string w; in >> w;) words.push_back(w);
  std::vector<std::pair<Color, Shape>> out;
  std::size_t i = 0;
  while (true) {
    if (i + 3 > words.size() || words[i] != "a") return std::nullopt;
    const auto c = parse_color(words[i + 1]);
    const auto s = parse_shape(words[i + 2]);
    if (!c || !s) return std::nullopt;
    out.emplace_back(*c, *s);
    i += 3;
    if (i == words.size()) return out;
    if (i + 2 > words.size() || words[i] != "next" || words[i + 1] != "to") return std::nullopt;
    i += 2;
  }
}

Shape dominant_shape(const SceneSpec& scene) {
  scene.validate();
  Shape best = scene.objects.front().shape;
  for (const auto& o : scene.objects)
    if (shape_count(scene, o.shape) > shape_count(scene, best)) best = o.shape;
  return best;
}

std::vector<std::string> region_descriptions(const SceneSpec& scene) {
  std::vector<std::string> out;
  for (const auto& o : scene.objects) {
    if (shape_count(scene, o.shape) != 1) continue;
    const std::string s(shape_name(o.shape)), c(color_name(o.color));
    out.push_back("the " + s + " is " + c);
    out.push_back("the color of the " + s + " is " + c);
    out.push_back(c + " is the color of the " + s);
    out.push_back("there is a " + c + " " + s);
  }
  return out;
}

SceneTasks make_tasks(const SceneSpec& scene) {
  scene.validate();
  SceneTasks t;
  t.caption = scene_caption(scene);
  for (const auto& o : scene.objects) {
    if (shape_count(scene, o.shape) != 1) continue;  // the question would be ambiguous
    t.qa.emplace_back("what color is the " + std::string(shape_name(o.shape)) + "?", std::string(color_name(o.color)));
  }
  t.label = std::string(shape_name(dominant_shape(scene)));
  return t;
}

std::string class_name(Color color, Shape shape) {
  return std::string(color_name(color)) + " " + std::string(shape_name(shape));
}

SceneSpec class_scene(Color color, Shape shape, Rng& rng) {
  // Two copies of the class object plus up to two distractors whose shapes
  // differ from it and from each other, so the class object dominates.
  std::vector<Shape> others;
  for (std::size_t s = 0; s < kShapes; ++s)
    if (static_cast<Shape>(s) != shape) others.push_back(static_cast<Shape>(s));
  rng.shuffle(std::span<Shape>(others));
  const auto n_distract = static_cast<std::size_t>(rng.below(3));
  const auto cells = distinct_cells(rng, 2 + n_distract);
  SceneSpec scene;
  scene.objects.push_back({shape, color, cells[0]});
  scene.objects.push_back({shape, color, cells[1]});
  for (std::size_t i = 0; i < n_distract; ++i) {
    scene.objects.push_back({others[i], static_cast<Color>(rng.below(kColors)), cells[2 + i]});
  }
  // Shuffle slot order so the class object is not always first.
  rng.shuffle(std::span<SceneObject>(scene.objects));
  scene.seed = rng.next_u64();
  return scene;
}

const RegionFeatures& SynthWorld::regions(const std::string& image_id) const {
  const auto it = features.find(image_id);
  if (it == features.end()) fail(ErrorCode::kUnknownId, "no features for image " + image_id);
  return it->second;
}

std::vector<std::string> SynthWorld::all_texts() const {
  std::vector<std::string> texts;
  for (const auto& item : pretrain) texts.push_back(item.caption);
  for (const auto& ex : vqa) {
    const auto& p = std::get<VqaPayload>(ex.payload);
    texts.push_back(p.question);
    texts.insert(texts.end(), p.answers.begin(), p.answers.end());
  }
  for (const auto& ex : caption) {
    const auto& p = std::get<CaptionPayload>(ex.payload);
    texts.insert(texts.end(), p.captions.begin(), p.captions.end());
  }
  for (std::size_t s = 0; s < kShapes; ++s) {
    for (std::size_t c = 0; c < kColors; ++c) texts.push_back(class_name(static_cast<Color>(c), static_cast<Shape>(s)));
  }
  for (const auto& t : catalog_templates()) {
    texts.push_back(t.input_pattern);
    texts.push_back(t.target_pattern);
  }
  for (const auto opener : kCaptionOpeners) texts.emplace_back(opener);
  return texts;
}

SynthWorld generate_world(const SynthConfig& config) {
  SynthWorld world;
  world.config = config;
  Rng rng(config.seed);
  for (std::size_t i = 0; i < config.n_pretrain_scenes; ++i) {
    const auto id = scene_id("pre", i);
    const auto scene = random_scene(rng, config.min_objects, config.max_objects);
    world.features.emplace(id, render_features(scene, config.world));
    world.scenes.emplace(id, scene);
    std::string cap = scene_caption(scene);
    if (rng.bernoulli(config.caption_prompt_rate)) {
      cap = std::string(kCaptionOpeners[rng.below(kCaptionOpeners.size())]) + " " + cap;
    }
    world.pretrain.push_back({id, cap});
    const auto desc = region_descriptions(scene);
    world.pretrain.push_back({id, desc.empty() ? scene_caption(scene) : desc[rng.below(desc.size())]});
  }
  std::vector<std::string> shape_labels(kShapeNames.begin(), kShapeNames.end());
  for (std::size_t i = 0; i < config.n_task_scenes; ++i) {
    const auto id = scene_id("task", i);
    const auto scene = random_scene(rng, config.min_objects, config.max_objects);
    world.features.emplace(id, render_features(scene, config.world));
    world.scenes.emplace(id, scene);
    const auto tasks = make_tasks(scene);
    for (const auto& [q, a] : tasks.qa) world.vqa.push_back({id, VqaPayload{q, {a}}});
    world.caption.push_back({id, CaptionPayload{{tasks.caption}}});
    world.classify.push_back({id, ClassifyPayload{tasks.label, shape_labels}});
  }
  return world;
}

std::vector<Episode> make_episodes(SynthWorld& world, std::size_t n_episodes, std::size_t n_way, std::size_t k_shot,
                                   std::size_t n_query_per_class, std::uint64_t seed) {
  std::vector<std::pair<Color, Shape>> classes;
  for (std::size_t c = 0; c < kColors; ++c)
    for (std::size_t s = 0; s < kShapes; ++s) classes.emplace_back(static_cast<Color>(c), static_cast<Shape>(s));
  if (n_way < 1 || n_way > classes.size()) fail(ErrorCode::kInvalidArgument, "n_way outside [1, 20]");
  if (k_shot < 1) fail(ErrorCode::kInvalidArgument, "k_shot must be >= 1");
  Rng rng(seed);
  std::vector<Episode> out;
  std::size_t image = 0;
  auto add_image = [&](Color c, Shape s) {
    const auto id = scene_id("ep" + std::to_string(seed), image++);
    const auto scene = class_scene(c, s, rng);
    world.features.insert_or_assign(id, render_features(scene, world.config.world));
    world.scenes.insert_or_assign(id, scene);
    return id;
  };
  for (std::size_t e = 0; e < n_episodes; ++e) {
    auto pool = classes;
    rng.shuffle(std::span<std::pair<Color, Shape>>(pool));
    pool.resize(n_way);
    Episode ep;
    for (const auto& [c, s] : pool) ep.classes.push_back(class_name(c, s));
    for (const auto& [c, s] : pool) {
      for (std::size_t k = 0; k < k_shot; ++k) {
        ep.support.push_back({add_image(c, s), ClassifyPayload{class_name(c, s), ep.classes}});
      }
      for (std::size_t q = 0; q < n_query_per_class; ++q) {
        ep.queries.push_back({add_image(c, s), ClassifyPayload{class_name(c, s), ep.classes}});
      }
    }
    out.push_back(std::move(ep));
  }
  return out;
}

void write_world(const SynthWorld& world, const Vocab& vocab, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  for (const auto& [id, r] : world.features) save_features(r, dir / "features" / (id + ".vlft"));
  write_dataset(world.vqa, dir / "vqa.jsonl");
  write_dataset(world.caption, dir / "caption.jsonl");
  write_dataset(world.classify, dir / "classify.jsonl");
  write_pretrain_corpus(world.pretrain, dir / "pretrain.jsonl");
  vocab.save(dir / "vocab.txt");
}

}  // namespace fewvlm::synth
