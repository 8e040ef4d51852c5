#include <map>

#include "doctest.h"
#include "fewvlm/error.hpp"
#include "fewvlm/synthdata.hpp"

using namespace fewvlm;
using namespace fewvlm::synth;

namespace {

SceneSpec scene(std::vector<SceneObject> objects, std::uint64_t seed = 1) { return {std::move(objects), seed}; }

// Independent restatement of the QA rule: ask about a shape only when it
// occurs exactly once; the answer is that object's color.
std::vector<std::pair<std::string, std::string>> oracle_qa(const SceneSpec& s) {
  std::map<Shape, int> count;
  for (const auto& o : s.objects) ++count[o.shape];
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& o : s.objects) {
    if (count[o.shape] == 1) {
      out.emplace_back("what color is the " + std::string(shape_name(o.shape)) + "?", std::string(color_name(o.color)));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("single red circle") {
  const auto s = scene({{Shape::kCircle, Color::kRed, 0}});
  const auto t = make_tasks(s);
  CHECK(t.caption == "a red circle");
  REQUIRE(t.qa.size() == 1);
  CHECK(t.qa[0].first == "what color is the circle?");
  CHECK(t.qa[0].second == "red");
  CHECK(t.label == "circle");
}

TEST_CASE("ambiguous shapes get no color question") {
  const auto s = scene({{Shape::kCircle, Color::kRed, 0}, {Shape::kCircle, Color::kBlue, 1}, {Shape::kStar, Color::kGreen, 2}});
  const auto t = make_tasks(s);
  REQUIRE(t.qa.size() == 1);
  CHECK(t.qa[0].first == "what color is the star?");
  CHECK(t.label == "circle");
  CHECK(t.caption == "a red circle next to a blue circle next to a green star");
}

TEST_CASE("rendering") {
  WorldConfig w;
  const auto s = scene({{Shape::kCircle, Color::kRed, 7}});
  const auto a = render_features(s, w), b = render_features(s, w);
  CHECK(a.features == b.features);
  CHECK(a.boxes == b.boxes);
  std::size_t nonzero = 0;
  for (std::size_t r = 0; r < a.n_regions; ++r) nonzero += !a.is_padding(r);
  CHECK(nonzero == 1);
  CHECK(a.box(0)[0] == doctest::Approx(1.0 / 6.0));
  CHECK(a.box(0)[1] == doctest::Approx(1.0 / 6.0));
  auto other = s;
  other.objects[0].color = Color::kBlue;
  CHECK(render_features(other, w).features != a.features);
  SceneSpec crowded;
  for (std::size_t i = 0; i < 9; ++i) crowded.objects.push_back({Shape::kStar, Color::kBlack, i});
  try {
    render_features(crowded, w);
    FAIL("expected TooManyObjects");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTooManyObjects);
  }
  WorldConfig narrow;
  narrow.feature_dim = 8;
  CHECK_THROWS_AS(render_features(s, narrow), Error);
}

TEST_CASE("captions parse back and QA follows the oracle") {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    const auto s = random_scene(rng, 1, 6);
    const auto t = make_tasks(s);
    const auto parsed = parse_caption(t.caption);
    REQUIRE(parsed.has_value());
    REQUIRE(parsed->size() == s.objects.size());
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      CHECK((*parsed)[k].first == s.objects[k].color);
      CHECK((*parsed)[k].second == s.objects[k].shape);
    }
    CHECK(t.qa == oracle_qa(s));
  }
  CHECK_FALSE(parse_caption("a red circle beside a blue square").has_value());
}

TEST_CASE("world generation is a pure function of its config") {
  SynthConfig cfg;
  cfg.n_pretrain_scenes = 20;
  cfg.n_task_scenes = 10;
  cfg.seed = 5;
  const auto a = generate_world(cfg), b = generate_world(cfg);
  REQUIRE(a.pretrain.size() == 40);
  for (std::size_t i = 0; i < a.pretrain.size(); ++i) CHECK(a.pretrain[i].caption == b.pretrain[i].caption);
  CHECK(a.caption.size() == 10);
  CHECK(a.features.size() == 30);
  for (const auto& [id, f] : a.features) CHECK(b.features.at(id).features == f.features);
}

TEST_CASE("class scenes are dominated by their class") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto s = class_scene(Color::kYellow, Shape::kTriangle, rng);
    CHECK(dominant_shape(s) == Shape::kTriangle);
  }
  SynthWorld world;
  world.config.world = WorldConfig{};
  const auto eps = make_episodes(world, 3, 5, 2, 1, 9);
  REQUIRE(eps.size() == 3);
  for (const auto& e : eps) {
    CHECK(e.classes.size() == 5);
    CHECK(e.support.size() == 10);
    CHECK(e.queries.size() == 5);
  }
}
