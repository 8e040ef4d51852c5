#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fewvlm/data.hpp"
#include "fewvlm/objectives.hpp"
#include "fewvlm/rng.hpp"

namespace fewvlm::synth {

enum class Shape { kCircle, kSquare, kTriangle, kStar };
enum class Color { kRed, kBlue, kGreen, kBlack, kYellow };

inline constexpr std::size_t kShapes = 4;
inline constexpr std::size_t kColors = 5;
inline constexpr std::size_t kGridSide = 6;
inline constexpr std::size_t kMaxObjects = 36;

std::string_view shape_name(Shape s);
std::string_view color_name(Color c);
std::optional<Shape> parse_shape(std::string_view s);
std::optional<Color> parse_color(std::string_view s);

struct SceneObject {
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  std::size_t cell = 0;  // row-major index on the 6x6 grid
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;  // drives the feature noise

  // Throws TooManyObjects / InvalidArgument.
  void validate() const;
};

struct WorldConfig {
  std::size_t feature_dim = 32;
  std::size_t n_regions = 8;  // slots per image; unused ones are zero
  double noise = 0.05;
  std::uint64_t projection_seed = 7;
};

// Projection of the shape/color one-hot code plus clipped Gaussian noise;
// boxes are the objects' grid cells.
RegionFeatures render_features(const SceneSpec& scene, const WorldConfig& world);

// n_objects drawn uniformly in [min_objects, max_objects] on distinct cells.
SceneSpec random_scene(Rng& rng, std::size_t min_objects, std::size_t max_objects);

struct SceneTasks {
  std::string caption;
  std::vector<std::pair<std::string, std::string>> qa;  // (question, answer)
  std::string label;                                   // dominant shape
};

SceneTasks make_tasks(const SceneSpec& scene);
std::string scene_caption(const SceneSpec& scene);
// Color/shape pairs in caption order, or nothing if the text is off-grammar.
std::optional<std::vector<std::pair<Color, Shape>>> parse_caption(std::string_view caption);
// Most frequent shape; ties go to the shape seen first.
Shape dominant_shape(const SceneSpec& scene);
// Region descriptions ("the circle is red" and variants) for unambiguous shapes.
std::vector<std::string> region_descriptions(const SceneSpec& scene);

// Scene whose most frequent object is (color, shape), for the episode task.
SceneSpec class_scene(Color color, Shape shape, Rng& rng);
std::string class_name(Color color, Shape shape);

struct SynthConfig {
  WorldConfig world;
  std::size_t n_pretrain_scenes = 1000;  // each yields a caption and a description
  std::size_t n_task_scenes = 400;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double caption_prompt_rate = 0.25;  // captions opened with "a picture of" and similar
  std::uint64_t seed = 0;
};

struct SynthWorld {
  SynthConfig config;
  std::map<std::string, RegionFeatures> features;  // by image id
  std::map<std::string, SceneSpec> scenes;
  std::vector<CorpusItem> pretrain;
  std::vector<VLExample> vqa;
  std::vector<VLExample> caption;
  std::vector<VLExample> classify;

  const RegionFeatures& regions(const std::string& image_id) const;
  // Every text the world can emit, for vocabulary construction.
  std::vector<std::string> all_texts() const;
};

SynthWorld generate_world(const SynthConfig& config);

// 5-way k-shot episodes over "{color} {shape}" classes; images are added to
// `world.features`. Support and query examples carry Classify payloads.
std::vector<Episode> make_episodes(SynthWorld& world, std::size_t n_episodes, std::size_t n_way, std::size_t k_shot,
                                   std::size_t n_query_per_class, std::uint64_t seed);

// Feature files under <dir>/features plus vqa/caption/classify/pretrain
// JSONL and a vocab file.
void write_world(const SynthWorld& world, const Vocab& vocab, const std::filesystem::path& dir);

}  // namespace fewvlm::synth
