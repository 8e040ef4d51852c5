#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fewvlm/data.hpp"
#include "fewvlm/error.hpp"
#include "fewvlm/rng.hpp"

using namespace fewvlm;

namespace {

Vocab sample_vocab() {
  std::vector<std::string> texts = {"What position is this man playing?", "pitcher", "a picture of", "an image of",
                                    "a small black dog standing over a plate of food."};
  return Vocab::build(texts, 4);
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kInvalidArgument;
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("vocab layout and invariants") {
  const auto v = sample_vocab();
  CHECK(v.n_sentinels() == 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(v.token(v.sentinel(k)) == "<text_" + std::to_string(k) + ">");
  CHECK(v.pad() != v.bos());
  CHECK(v.bos() != v.eos());
  CHECK(v.eos() != v.unk());
  CHECK(v.pad() != v.unk());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
  CHECK(code_of([] { Vocab::build({}, 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("tokenize examples") {
  const auto v = sample_vocab();
  CHECK(tokenize("", v).empty());
  CHECK(tokenize("<text_1> pitcher", v) == TokenSeq{v.sentinel(1), v.id("pitcher")});
  CHECK(tokenize("a picture of", v) == TokenSeq{v.id("a"), v.id("picture"), v.id("of")});
  CHECK(tokenize("zebra", v) == TokenSeq{v.unk()});
  CHECK(tokenize("Pitcher.", v) == TokenSeq{v.id("pitcher"), v.id(".")});
}

TEST_CASE("detokenize examples") {
  const auto v = sample_vocab();
  CHECK(detokenize(TokenSeq{}, v).empty());
  CHECK(detokenize(tokenize("an image of", v), v) == "an image of");
  CHECK(detokenize(TokenSeq{v.sentinel(1), v.id("pitcher")}, v) == "<text_1> pitcher");
  CHECK(detokenize(TokenSeq{v.bos(), v.id("pitcher"), v.eos(), v.pad()}, v) == "pitcher");
  const auto big = static_cast<TokenId>(v.size());
  CHECK(code_of([&] { detokenize(TokenSeq{big}, v); }) == ErrorCode::kInvalidId);
}

TEST_CASE("tokenize/detokenize round-trip on random vocabulary strings") {
  const auto v = sample_vocab();
  std::vector<std::string> pool(v.words().begin(), v.words().end());
  for (std::size_t k = 0; k < v.n_sentinels(); ++k) pool.push_back(sentinel_text(k));
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const auto n = rng.range(0, 12);
    for (int i = 0; i < n; ++i) {
      if (i) s += ' ';
      s += pool[rng.below(pool.size())];
    }
    CHECK(detokenize(tokenize(s, v), v) == normalize_text(s));
  }
}

TEST_CASE("vocab file round-trip") {
  const auto v = sample_vocab();
  const auto path = temp_file("fewvlm_vocab_test.txt");
  v.save(path);
  const auto w = Vocab::load(path);
  CHECK(w.tokens() == v.tokens());
  CHECK(w.n_sentinels() == v.n_sentinels());
  std::filesystem::remove(path);
}

TEST_CASE("feature files round-trip bit-exactly") {
  RegionFeatures r;
  r.n_regions = 36;
  r.dim = 2048;
  Rng rng(12);
  for (std::size_t i = 0; i < r.n_regions * r.dim; ++i) r.features.push_back(static_cast<float>(rng.normal()));
  for (std::size_t i = 0; i < r.n_regions; ++i) r.boxes.insert(r.boxes.end(), {0.1f, 0.2f, 0.5f, 0.9f});
  const auto p = temp_file("fewvlm_feat_a.vlft");
  const auto q = temp_file("fewvlm_feat_b.vlft");
  save_features(r, p);
  const auto loaded = load_features(p);
  CHECK(loaded.n_regions == 36);
  CHECK(loaded.dim == 2048);
  save_features(loaded, q);
  std::ifstream a(p, std::ios::binary), b(q, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(sa.size() == 12 + 36 * 2048 * 4 + 36 * 16);
  std::filesystem::remove(p);
  std::filesystem::remove(q);
}

TEST_CASE("feature file errors") {
  const auto p = temp_file("fewvlm_feat_bad.vlft");
  auto write = [&](const char* magic, std::uint32_t n, std::uint32_t d, std::vector<float> payload) {
    std::ofstream out(p, std::ios::binary);
    out.write(magic, 4);
    out.write(reinterpret_cast<const char*>(&n), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
  };
  write("XXXX", 1, 1, {0.f, 0.f, 0.f, 0.f, 0.f});
  CHECK(code_of([&] { load_features(p); }) == ErrorCode::kBadMagic);
  write("VLFT", 0, 4, {});
  CHECK(code_of([&] { load_features(p); }) == ErrorCode::kShapeMismatch);
  write("VLFT", 2, 2, {1.f, 2.f});  // truncated
  CHECK(code_of([&] { load_features(p); }) == ErrorCode::kShapeMismatch);
  write("VLFT", 1, 1, {std::nanf(""), 0.f, 0.f, 0.f, 0.f});
  CHECK(code_of([&] { load_features(p); }) == ErrorCode::kNonFiniteValue);
  std::filesystem::remove(p);
}

TEST_CASE("box invariants") {
  RegionFeatures r;
  r.n_regions = 1;
  r.dim = 2;
  r.features = {1.f, 2.f};
  r.boxes = {0.5f, 0.1f, 0.4f, 0.2f};  // x1 > x2
  CHECK_THROWS_AS(r.validate(), Error);
  r.boxes = {0.f, 0.f, 1.f, 1.f};
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("dataset parsing") {
  const auto ex = parse_dataset(
      R"({"image_id":"i1","question":"What position is this man playing?","answers":["pitcher"]})", TaskKind::kVqa);
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].image_id == "i1");
  CHECK(std::get<VqaPayload>(ex[0].payload).answers == std::vector<std::string>{"pitcher"});
  CHECK(parse_dataset("", TaskKind::kCaption).empty());
  CHECK(code_of([] { parse_dataset(R"({"image_id":"i1","captions":[]})", TaskKind::kCaption); }) ==
        ErrorCode::kMissingField);
  CHECK(code_of([] { parse_dataset("{\"image_id\":\"a\",\"captions\":[\"x\"]}\n{oops", TaskKind::kCaption); }) ==
        ErrorCode::kParseError);
  try {
    parse_dataset("{\"image_id\":\"a\",\"captions\":[\"x\"]}\n{oops", TaskKind::kCaption);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
  CHECK(code_of([] {
          parse_dataset(R"({"image_id":"i","label":"cat","candidate_labels":["dog"]})", TaskKind::kClassify);
        }) == ErrorCode::kMissingField);
}

TEST_CASE("dataset write/read preserves order") {
  std::vector<VLExample> ex = {{"b", CaptionPayload{{"two"}}}, {"a", CaptionPayload{{"one", "uno"}}}};
  const auto p = temp_file("fewvlm_ds.jsonl");
  write_dataset(ex, p);
  const auto back = read_dataset(p, TaskKind::kCaption);
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_id == "b");
  CHECK(std::get<CaptionPayload>(back[1].payload).captions.size() == 2);
  std::filesystem::remove(p);
}
