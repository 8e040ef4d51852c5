#include <map>

#include "doctest.h"
#include "fewvlm/error.hpp"
#include "fewvlm/objectives.hpp"

using namespace fewvlm;

namespace {

Vocab vocab() {
  std::vector<std::string> texts = {"a small black dog standing over a plate of food"};
  return Vocab::build(texts, 16);
}

TokenSeq random_text(Rng& rng, const Vocab& v, std::size_t min_len, std::size_t max_len) {
  const auto n = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
  const auto words = v.words();
  TokenSeq out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(v.id(words[rng.below(words.size())]));
  return out;
}

}  // namespace

TEST_CASE("forced single-token mask") {
  const auto v = vocab();
  const auto text = tokenize("a small black dog standing over a plate", v);
  const std::vector<std::size_t> at = {3};
  const auto pair = mask_positions(text, v, at);
  CHECK(detokenize(pair.input, v) == "a small black <text_0> standing over a plate");
  CHECK(detokenize(pair.target, v) == "<text_0> dog");
}

TEST_CASE("adjacent masks merge into one span") {
  const auto v = vocab();
  const auto text = tokenize("a small black dog standing over a plate", v);
  const std::vector<std::size_t> at = {1, 2, 6};
  const auto pair = mask_positions(text, v, at);
  CHECK(detokenize(pair.input, v) == "a <text_0> dog standing over <text_1> plate");
  CHECK(detokenize(pair.target, v) == "<text_0> small black <text_1> a");
}

TEST_CASE("masking needs two tokens") {
  const auto v = vocab();
  Rng rng(1);
  CHECK_THROWS_AS(mask_spans(TokenSeq{v.id("dog")}, v, rng), Error);
  CHECK_THROWS_AS(prefix_split(TokenSeq{v.id("dog")}, rng), Error);
  try {
    prefix_split(TokenSeq{}, rng);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTooShort);
  }
}

TEST_CASE("masked pairs reconstruct and number sentinels from zero") {
  const auto v = vocab();
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const auto text = random_text(rng, v, 2, 20);
    const auto pair = mask_spans(text, v, rng);
    CHECK(merge_spans(pair.input, pair.target, v) == text);
    TokenSeq in_s, tg_s;
    for (auto t : pair.input)
      if (v.is_sentinel(t)) in_s.push_back(t);
    for (auto t : pair.target)
      if (v.is_sentinel(t)) tg_s.push_back(t);
    REQUIRE(!in_s.empty());
    CHECK(in_s == tg_s);
    for (std::size_t k = 0; k < in_s.size(); ++k) CHECK(in_s[k] == v.sentinel(k));
  }
}

TEST_CASE("mask rate is close to the requested rate") {
  const auto v = vocab();
  Rng rng(3);
  std::size_t masked = 0, total = 0;
  while (total < 20000) {
    const auto text = random_text(rng, v, 20, 20);
    const auto pair = mask_spans(text, v, rng);
    for (auto t : pair.target) masked += v.is_sentinel(t) ? 0 : 1;
    total += text.size();
  }
  const double rate = static_cast<double>(masked) / static_cast<double>(total);
  CHECK(rate >= 0.14);
  CHECK(rate <= 0.16);
}

TEST_CASE("prefix split examples") {
  const auto v = vocab();
  Rng rng(4);
  const auto two = tokenize("black dog", v);
  const auto p = prefix_split(two, rng);
  CHECK(p.input.size() == 1);
  CHECK(p.target.size() == 1);
  const auto text = tokenize("a small black dog standing over a plate of food", v);
  const auto q = prefix_split_at(text, 4);
  CHECK(detokenize(q.input, v) == "a small black dog");
  CHECK(detokenize(q.target, v) == "standing over a plate of food");
  CHECK_THROWS_AS(prefix_split_at(text, 0), Error);
  CHECK_THROWS_AS(prefix_split_at(text, text.size()), Error);
}

TEST_CASE("prefix split index is uniform") {
  const auto v = vocab();
  Rng rng(5);
  const auto text = tokenize("a small black dog standing over a plate of food", v);
  REQUIRE(text.size() == 10);
  std::map<std::size_t, int> counts;
  for (int i = 0; i < 10000; ++i) {
    const auto p = prefix_split(text, rng);
    TokenSeq joined = p.input;
    joined.insert(joined.end(), p.target.begin(), p.target.end());
    REQUIRE(joined == text);
    ++counts[p.input.size()];
  }
  CHECK(counts.size() == 9);
  for (const auto& [idx, n] : counts) {
    CAPTURE(idx);
    CHECK(n / 10000.0 >= 0.09);
    CHECK(n / 10000.0 <= 0.13);
  }
}

TEST_CASE("batch building") {
  const auto v = vocab();
  std::vector<TokenizedItem> corpus;
  Rng gen(6);
  for (int i = 0; i < 10000; ++i) corpus.push_back({"img" + std::to_string(i), random_text(gen, v, 2, 8)});
  Rng rng(7);
  auto count_masked = [](const std::vector<PretrainBatch>& batches) {
    std::size_t m = 0, n = 0;
    for (const auto& b : batches)
      for (const auto& p : b) {
        m += p.objective == Objective::kMasked;
        ++n;
      }
    return std::pair{m, n};
  };
  auto [m1, n1] = count_masked(build_pretrain_batches(corpus, v, 1.0, 64, rng));
  CHECK(m1 == n1);
  auto [m0, n0] = count_masked(build_pretrain_batches(corpus, v, 0.0, 64, rng));
  CHECK(m0 == 0);
  CHECK(n0 == corpus.size());
  auto [mh, nh] = count_masked(build_pretrain_batches(corpus, v, 0.5, 64, rng));
  CHECK(static_cast<double>(mh) / nh >= 0.48);
  CHECK(static_cast<double>(mh) / nh <= 0.52);
  CHECK_THROWS_AS(build_pretrain_batches(std::span<const TokenizedItem>{}, v, 0.5, 4, rng), Error);
}

TEST_CASE("every item appears once per epoch and streams are reproducible") {
  const auto v = vocab();
  std::vector<TokenizedItem> corpus;
  Rng gen(8);
  for (int i = 0; i < 37; ++i) corpus.push_back({"img" + std::to_string(i), random_text(gen, v, 2, 8)});
  Rng rng(9);
  const auto batches = build_pretrain_batches(corpus, v, 0.5, 8, rng);
  CHECK(batches.size() == 5);
  std::map<std::string, int> seen;
  for (const auto& b : batches)
    for (const auto& p : b) ++seen[p.image_id];
  CHECK(seen.size() == 37);
  for (const auto& [id, n] : seen) CHECK(n == 1);

  PretrainStream a(corpus, v, 0.5, 8, 42), b(corpus, v, 0.5, 8, 42);
  for (int i = 0; i < 12; ++i) {
    const auto& x = a.next();
    const auto& y = b.next();
    REQUIRE(x.size() == y.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      CHECK(x[k].input == y[k].input);
      CHECK(x[k].target == y[k].target);
      CHECK(x[k].image_id == y[k].image_id);
    }
  }
  CHECK(a.epoch() == 2);
}

TEST_CASE("objective names") {
  CHECK(objective_mix("masked") == 1.0);
  CHECK(objective_mix("prefix") == 0.0);
  CHECK(objective_mix("both") == 0.5);
  CHECK_THROWS_AS(objective_mix("neither"), Error);
}
