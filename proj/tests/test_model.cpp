#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fewvlm/error.hpp"
#include "fewvlm/model.hpp"
#include "fewvlm/optim.hpp"
#include "op_suite.hpp"
#include "oracles.hpp"

using namespace fewvlm;
using nn::Graph;

namespace {

ModelConfig small_config() {
  auto c = opsuite::toy_config();
  c.hidden_dim = 16;
  c.n_heads = 4;
  c.ff_dim = 32;
  c.dropout = 0.1;
  return c;
}

}  // namespace

TEST_CASE("encoder output shape is regions plus text") {
  Rng rng(1);
  ModelConfig c = small_config();
  c.n_regions = 36;
  c.feature_dim = 12;
  Model m(c, 1);
  const auto rf = opsuite::toy_regions(rng, 36, 12);
  Graph<float> g(false);
  const auto states = m.encode(g, rf, std::vector<TokenId>{5, 6, 7, 8, 9, 5, 6, 7});
  CHECK(states.shape() == nn::Shape{44, 16});
  const auto bare = m.encode(g, rf, std::vector<TokenId>{});
  CHECK(bare.shape() == nn::Shape{36, 16});
}

TEST_CASE("encode validates its inputs") {
  Rng rng(2);
  Model m(small_config(), 1);
  const auto rf = opsuite::toy_regions(rng, 3, 7);
  Graph<float> g(false);
  try {
    m.encode(g, rf, std::vector<TokenId>{5});
    FAIL("expected FeatureDimMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kFeatureDimMismatch);
  }
  const auto ok = opsuite::toy_regions(rng);
  try {
    m.encode(g, ok, TokenSeq(9, 5));
    FAIL("expected SequenceTooLong");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSequenceTooLong);
  }
  try {
    m.nll_loss(g, ok, TokenSeq{5}, TokenSeq{});
    FAIL("expected EmptyTarget");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyTarget);
  }
}

TEST_CASE("perturbing an unmasked region changes the encoding") {
  Rng rng(3);
  Model m(small_config(), 2);
  auto rf = opsuite::toy_regions(rng);
  Graph<float> g(false);
  const auto a = m.encode(g, rf, std::vector<TokenId>{5, 6});
  rf.features[1 * 5 + 2] += 0.5f;
  const auto b = m.encode(g, rf, std::vector<TokenId>{5, 6});
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, double(std::abs(a.values()[i] - b.values()[i])));
  CHECK(diff > 1e-4);
}

TEST_CASE("uniform logits give L ln V") {
  Rng rng(4);
  auto c = small_config();
  FewVLMModel<double> m(c, 3);
  // Zero token embeddings make every logit zero.
  for (auto& p : m.parameters())
    if (p.name == "embed.tokens") std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
  const auto rf = opsuite::toy_regions(rng);
  Graph<double> g(false);
  const auto loss = m.nll_loss(g, rf, std::vector<TokenId>{5}, std::vector<TokenId>{6, 7, 4});
  CHECK(loss.item() == doctest::Approx(3.0 * std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("loss equals a scalar re-computation from the logits") {
  Rng rng(5);
  FewVLMModel<double> m(small_config(), 4);
  const auto rf = opsuite::toy_regions(rng);
  std::vector<SeqExample> ex = {{&rf, {5, 6}, {7, 4}}};
  Graph<double> g(false);
  const auto enc = m.encode(g, m.make_encoder_batch(ex));
  const auto dec = m.make_decoder_batch(ex);
  CHECK(dec.input_ids == std::vector<TokenId>{m.config().bos_id, 7});
  const auto logits = m.decode(g, enc, dec.input_ids, dec.valid, dec.length);
  CHECK(logits.shape() == nn::Shape{2, 10});
  std::vector<std::vector<double>> rows(2, std::vector<double>(10));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 10; ++c) rows[r][c] = logits.at(r, c);
  const double want = oracle::nll(rows, {7, 4});
  CHECK(m.nll_loss(g, ex).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("batched loss is the sum of per-example losses") {
  Rng rng(6);
  FewVLMModel<double> m(small_config(), 5);
  auto r1 = opsuite::toy_regions(rng), r2 = opsuite::toy_regions(rng), r3 = opsuite::toy_regions(rng, 2);
  std::vector<SeqExample> ex = {{&r1, {5, 6, 7}, {8, 4}}, {&r2, {9}, {5, 6, 7, 4}}, {&r3, {}, {6, 4}}};
  Graph<double> g(false);
  double separate = 0.0;
  for (const auto& e : ex) separate += m.nll_loss(g, std::span<const SeqExample>(&e, 1)).item();
  CHECK(m.nll_loss(g, ex).item() == doctest::Approx(separate).epsilon(1e-10));
  std::vector<SeqExample> rev(ex.rbegin(), ex.rend());
  CHECK(m.nll_loss(g, rev).item() == doctest::Approx(separate).epsilon(1e-10));
}

TEST_CASE("padded region slots do not affect the loss") {
  Rng rng(7);
  FewVLMModel<double> m(small_config(), 6);
  auto rf = opsuite::toy_regions(rng, 4);
  std::fill(rf.features.begin() + 15, rf.features.end(), 0.0f);
  std::fill(rf.boxes.begin() + 12, rf.boxes.end(), 0.0f);
  auto shorter = rf;
  shorter.n_regions = 3;
  shorter.features.resize(15);
  shorter.boxes.resize(12);
  Graph<double> g(false);
  const double a = m.nll_loss(g, rf, std::vector<TokenId>{5}, std::vector<TokenId>{6, 4}).item();
  const double b = m.nll_loss(g, shorter, std::vector<TokenId>{5}, std::vector<TokenId>{6, 4}).item();
  CHECK(std::abs(a - b) < 1e-5);
}

TEST_CASE("a small gradient step lowers the loss") {
  Rng rng(8);
  Model m(small_config(), 7);
  const auto rf = opsuite::toy_regions(rng);
  auto loss_of = [&] {
    Graph<float> g(false);
    return m.nll_loss(g, rf, std::vector<TokenId>{5, 6}, std::vector<TokenId>{7, 8, 4}).item();
  };
  const double before = loss_of();
  nn::AdamConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_fraction = 0.0;
  nn::Adam<float> opt(m.parameters(), cfg);
  Graph<float> g(true);
  auto loss = m.nll_loss(g, rf, std::vector<TokenId>{5, 6}, std::vector<TokenId>{7, 8, 4});
  g.backward(loss);
  opt.step();
  CHECK(loss_of() < before);
}

TEST_CASE("generation") {
  Rng rng(9);
  Model m(small_config(), 8);
  const auto rf = opsuite::toy_regions(rng);
  const std::vector<TokenId> in = {5, 6};
  const auto one = m.generate(rf, in, 1);
  CHECK(one.size() <= 1);
  const auto a = m.generate(rf, in, 6), b = m.generate(rf, in, 6);
  CHECK(a == b);
  CHECK(m.generate(rf, in, 6, DecodeStrategy::beam(1)) == a);
  std::vector<SeqExample> ex = {{&rf, in, {}}, {&rf, {7}, {}}};
  const auto batch = m.generate_batch(ex, 6);
  CHECK(batch[0] == a);
  CHECK(batch[1] == m.generate(rf, std::vector<TokenId>{7}, 6));
}

TEST_CASE("max_len of one yields exactly one token unless it is eos") {
  Rng rng(10);
  auto c = small_config();
  Model m(c, 9);
  // Push eos far down so the first token is never eos.
  for (auto& p : m.parameters())
    if (p.name == "embed.tokens")
      for (std::size_t k = 0; k < c.hidden_dim; ++k) p.tensor.values()[c.eos_id * c.hidden_dim + k] = 0.0f;
  const auto rf = opsuite::toy_regions(rng);
  CHECK(m.generate(rf, std::vector<TokenId>{5}, 1).size() == 1);
}

TEST_CASE("beam search keeps the most probable sequence") {
  Rng rng(11);
  Model m(small_config(), 10);
  const auto rf = opsuite::toy_regions(rng);
  const std::vector<TokenId> in = {5};
  auto score = [&](TokenSeq seq, bool ended) {
    if (ended) seq.push_back(m.config().eos_id);
    Graph<float> g(false);
    return -static_cast<double>(m.nll_loss(g, rf, in, seq).item());
  };
  const auto greedy = m.generate(rf, in, 4);
  const auto beam = m.generate(rf, in, 4, DecodeStrategy::beam(4));
  CHECK(score(beam, beam.size() < 4) >= score(greedy, greedy.size() < 4) - 1e-4);
}

TEST_CASE("checkpoint save and load") {
  Model m(small_config(), 11);
  const auto path = std::filesystem::temp_directory_path() / "fewvlm_model.ckpt";
  m.save(path, {{"vocab", {"x", "y"}}});
  nlohmann::json extra;
  const auto back = Model::load(path, &extra);
  CHECK(extra["vocab"][1] == "y");
  CHECK(back.config().to_json() == m.config().to_json());
  const auto pa = m.parameters(), pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::equal(pa[i].tensor.values().begin(), pa[i].tensor.values().end(), pb[i].tensor.values().begin()));
  }
  std::filesystem::remove(path);
}

TEST_CASE("clone does not share storage") {
  Model m(small_config(), 12);
  auto c = m.clone();
  c.parameters()[0].tensor.values()[0] += 1.0f;
  CHECK(c.parameters()[0].tensor.values()[0] != m.parameters()[0].tensor.values()[0]);
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.head_dim = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(c.to_json()["head_dim"] == 3);
  std::vector<std::string> texts = {"a b"};
  const auto v = Vocab::build(texts, 2);
  CHECK_NOTHROW(ModelConfig::base(v).validate());
  CHECK(ModelConfig::desk(v).hidden_dim == 128);
}
