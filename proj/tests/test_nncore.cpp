#include <cmath>

#include "doctest.h"
#include "fewvlm/checkpoint.hpp"
#include "fewvlm/error.hpp"
#include "fewvlm/optim.hpp"
#include "op_suite.hpp"

using namespace fewvlm;
using nn::Graph;
using nn::Tensor;

TEST_CASE("every op passes the finite-difference check") {
  for (const auto& c : opsuite::op_cases()) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      CAPTURE(c.name);
      CAPTURE(seed);
      CHECK(c.run(seed) < 1e-4);
    }
  }
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(4);
  auto x = gradcheck::random_tensor({5, 7}, rng, false, 10.0);
  Graph<double> g(false);
  auto y = nn::softmax(g, x);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += y.at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("identity matmul") {
  Rng rng(5);
  auto a = gradcheck::random_tensor({4, 3}, rng, false);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  Graph<double> g(false);
  auto y = nn::matmul(g, Tensor<double>::from({4, 4}, eye), a);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(y.values()[i] == a.values()[i]);
}

TEST_CASE("matmul rejects mismatched shapes") {
  Graph<float> g(false);
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 3});
  try {
    nn::matmul(g, a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShapeMismatch);
  }
}

TEST_CASE("attention over a single position returns its value") {
  Rng rng(6);
  auto q = gradcheck::random_tensor({1, 4}, rng, false);
  auto k = gradcheck::random_tensor({1, 4}, rng, false);
  auto v = gradcheck::random_tensor({1, 4}, rng, false);
  Graph<double> g(false);
  auto out = nn::attention(g, q, k, v, nn::AttentionMask::all(1, 1, 1), 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.values()[i] == doctest::Approx(v.values()[i]).epsilon(1e-12));
}

TEST_CASE("a row with one visible key puts all weight on it") {
  Rng rng(7);
  auto q = gradcheck::random_tensor({2, 2}, rng, false);
  auto k = gradcheck::random_tensor({3, 2}, rng, false);
  auto v = gradcheck::random_tensor({3, 2}, rng, false);
  std::vector<std::uint8_t> valid = {0, 1, 0};
  Graph<double> g(false);
  auto out = nn::attention(g, q, k, v, nn::AttentionMask::key_padding(1, 2, 3, valid), 1);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) CHECK(out.at(r, c) == doctest::Approx(v.at(1, c)).epsilon(1e-12));
}

TEST_CASE("masked positions do not influence attention output") {
  Rng rng(8);
  auto q = gradcheck::random_tensor({3, 4}, rng, false);
  auto k = gradcheck::random_tensor({4, 4}, rng, false);
  auto v = gradcheck::random_tensor({4, 4}, rng, false);
  std::vector<std::uint8_t> valid = {1, 1, 0, 1};
  const auto mask = nn::AttentionMask::key_padding(1, 3, 4, valid);
  Graph<double> g(false);
  auto before = nn::attention(g, q, k, v, mask, 2);
  for (std::size_t c = 0; c < 4; ++c) {
    k.values()[2 * 4 + c] += 100.0;
    v.values()[2 * 4 + c] -= 50.0;
  }
  auto after = nn::attention(g, q, k, v, mask, 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < before.numel(); ++i) worst = std::max(worst, std::abs(before.values()[i] - after.values()[i]));
  CHECK(worst < 1e-5);
}

TEST_CASE("dropout is the identity outside training") {
  Rng rng(9);
  auto x = gradcheck::random_tensor({3, 4}, rng, false);
  Graph<double> g(false);
  auto y = nn::dropout(g, x, 0.5);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("backward reaches every parameter") {
  Rng rng(10);
  FewVLMModel<double> model(opsuite::toy_config(), 3);
  auto rf = opsuite::toy_regions(rng);
  Graph<double> g(true);
  auto loss = model.nll_loss(g, rf, std::vector<TokenId>{5, 6}, std::vector<TokenId>{7, 4});
  g.backward(loss);
  for (const auto& p : model.parameters()) {
    CAPTURE(p.name);
    REQUIRE(p.tensor.has_grad());
    for (double v : p.tensor.grad()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("warmup is linear then constant") {
  CHECK(nn::warmup_lr(1e-3, 25, 1000, 0.05) == doctest::Approx(0.5e-3));
  CHECK(nn::warmup_lr(1e-3, 50, 1000, 0.05) == doctest::Approx(1e-3));
  CHECK(nn::warmup_lr(1e-3, 700, 1000, 0.05) == doctest::Approx(1e-3));
  CHECK(nn::warmup_lr(1e-3, 1, 1000, 0.0) == doctest::Approx(1e-3));
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  auto w = Tensor<float>::from({3}, {1.0f, -2.0f, 0.5f}, true);
  nn::AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.total_steps = 10;
  nn::Adam<float> opt({{"w", w}}, cfg);
  w.mutable_grad();  // all zeros
  opt.step();
  CHECK(w.values()[0] == 1.0f);
  CHECK(w.values()[1] == -2.0f);
  CHECK(w.values()[2] == 0.5f);
  CHECK(opt.step_count() == 1);
}

TEST_CASE("one adam step on w^2 decreases it") {
  auto w = Tensor<double>::from({1}, {1.0}, true);
  nn::AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.warmup_fraction = 0.0;
  cfg.total_steps = 1;
  nn::Adam<double> opt({{"w", w}}, cfg);
  Graph<double> g(true);
  auto loss = nn::sum(g, nn::mul(g, w, w));
  g.backward(loss);
  opt.step();
  CHECK(w.item() * w.item() < 1.0);
}

TEST_CASE("adam rejects a non-positive learning rate") {
  auto w = Tensor<float>::from({1}, {1.0f}, true);
  nn::AdamConfig cfg;
  cfg.lr = 0.0;
  CHECK_THROWS_AS(nn::Adam<float>({{"w", w}}, cfg), Error);
}

TEST_CASE("checkpoint container round-trips") {
  const auto path = std::filesystem::temp_directory_path() / "fewvlm_ck_test.bin";
  std::vector<std::pair<std::string, Tensor<float>>> tensors = {
      {"a", Tensor<float>::from({2, 2}, {1.f, 2.f, 3.f, 4.f})}, {"b", Tensor<float>::from({3}, {-1.f, 0.5f, 9.f})}};
  nn::save_checkpoint(path, {{"k", 3}}, tensors);
  const auto ck = nn::load_checkpoint(path);
  CHECK(ck.config["k"] == 3);
  REQUIRE(ck.tensors.size() == 2);
  CHECK(ck.tensors.at("a").shape() == nn::Shape{2, 2});
  CHECK(ck.tensors.at("b").values()[2] == 9.f);
  std::filesystem::remove(path);
}
