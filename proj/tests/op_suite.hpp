#pragma once

// Gradient-check cases for every differentiable op plus the full model loss.

#include <string>
#include <utility>
#include <vector>

#include "fewvlm/model.hpp"
#include "gradcheck.hpp"

namespace opsuite {

using gradcheck::random_tensor;
using gradcheck::relative_error;
using gradcheck::TensorD;
using gradcheck::weighted_sum;
using fewvlm::Rng;
using fewvlm::nn::Graph;
namespace nn = fewvlm::nn;

struct Case {
  std::string name;
  std::function<double(std::uint64_t seed)> run;
};

inline std::vector<Case> op_cases() {
  std::vector<Case> c;
  c.push_back({"matmul", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({4, 5}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::matmul(g, x[0], x[1]), s + 1);
                                       });
               }});
  c.push_back({"matmul_transposed", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({5, 4}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::matmul_transposed(g, x[0], x[1]), s + 1);
                                       });
               }});
  c.push_back({"linear", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({4, 2}, r), random_tensor({2}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::linear(g, x[0], x[1], x[2]), s + 1);
                                       });
               }});
  c.push_back({"add", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::add(g, x[0], x[1]), s + 1);
                                       });
               }});
  c.push_back({"add_broadcast", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({4}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::add(g, x[0], x[1]), s + 1);
                                       });
               }});
  c.push_back({"mul", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::mul(g, x[0], x[1]), s + 1);
                                       });
               }});
  c.push_back({"scale", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r)}, [s](Graph<double>& g, const std::vector<TensorD>& x) {
                   return weighted_sum(g, nn::scale(g, x[0], 0.37), s + 1);
                 });
               }});
  c.push_back({"softmax", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r)}, [s](Graph<double>& g, const std::vector<TensorD>& x) {
                   return weighted_sum(g, nn::softmax(g, x[0]), s + 1);
                 });
               }});
  c.push_back({"layer_norm", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r), random_tensor({4}, r), random_tensor({4}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::layer_norm(g, x[0], x[1], x[2]), s + 1);
                                       });
               }});
  c.push_back({"gelu", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r)}, [s](Graph<double>& g, const std::vector<TensorD>& x) {
                   return weighted_sum(g, nn::gelu(g, x[0]), s + 1);
                 });
               }});
  c.push_back({"embedding_lookup", [](std::uint64_t s) {
                 Rng r(s);
                 std::vector<fewvlm::TokenId> ids = {2, 0, 2, 1};
                 return relative_error({random_tensor({3, 4}, r)}, [s, ids](Graph<double>& g,
                                                                           const std::vector<TensorD>& x) {
                   return weighted_sum(g, nn::embedding_lookup(g, x[0], ids), s + 1);
                 });
               }});
  c.push_back({"dropout", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error(
                     {random_tensor({3, 4}, r)},
                     [s](Graph<double>& g, const std::vector<TensorD>& x) {
                       return weighted_sum(g, nn::dropout(g, x[0], 0.3), s + 1);
                     },
                     1e-5, s, true);
               }});
  c.push_back({"concat_sequences", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({4, 3}, r), random_tensor({6, 3}, r)},
                                       [s](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::concat_sequences(g, x[0], x[1], 2), s + 1);
                                       });
               }});
  c.push_back({"attention", [](std::uint64_t s) {
                 Rng r(s);
                 // batch 2, 3 queries, 4 keys, 2 heads of width 2; one key masked per batch.
                 std::vector<std::uint8_t> valid = {1, 1, 1, 0, 1, 0, 1, 1};
                 auto mask = nn::AttentionMask::key_padding(2, 3, 4, valid);
                 return relative_error({random_tensor({6, 4}, r), random_tensor({8, 4}, r), random_tensor({8, 4}, r)},
                                       [s, mask](Graph<double>& g, const std::vector<TensorD>& x) {
                                         return weighted_sum(g, nn::attention(g, x[0], x[1], x[2], mask, 2), s + 1);
                                       });
               }});
  c.push_back({"multi_head_attention", [](std::uint64_t s) {
                 Rng r(s);
                 auto mask = nn::AttentionMask::all(1, 3, 3);
                 mask.causal();
                 std::vector<TensorD> in = {random_tensor({3, 4}, r)};
                 for (int i = 0; i < 4; ++i) {
                   in.push_back(random_tensor({4, 4}, r, true, 0.5));
                   in.push_back(random_tensor({4}, r, true, 0.1));
                 }
                 return relative_error(in, [s, mask](Graph<double>& g, const std::vector<TensorD>& x) {
                   nn::AttentionParams<double> p{{x[1], x[2]}, {x[3], x[4]}, {x[5], x[6]}, {x[7], x[8]}};
                   return weighted_sum(g, nn::multi_head_attention(g, x[0], x[0], x[0], p, mask, 2), s + 1);
                 });
               }});
  c.push_back({"cross_entropy", [](std::uint64_t s) {
                 Rng r(s);
                 std::vector<fewvlm::TokenId> targets = {1, 3, 0};
                 std::vector<double> weights = {1.0, 0.0, 1.0};
                 return relative_error({random_tensor({3, 4}, r)}, [targets, weights](Graph<double>& g,
                                                                                     const std::vector<TensorD>& x) {
                   return nn::cross_entropy<double>(g, x[0], targets, weights);
                 });
               }});
  c.push_back({"sum", [](std::uint64_t s) {
                 Rng r(s);
                 return relative_error({random_tensor({3, 4}, r)}, [s](Graph<double>& g, const std::vector<TensorD>& x) {
                   return nn::scale(g, nn::sum(g, nn::gelu(g, x[0])), 1.5);
                 });
               }});
  return c;
}

// A 2+2-layer toy model small enough for a full finite-difference sweep.
inline fewvlm::ModelConfig toy_config() {
  fewvlm::ModelConfig c;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.hidden_dim = 8;
  c.ff_dim = 12;
  c.n_heads = 2;
  c.head_dim = 4;
  c.vocab_size = 10;
  c.max_text_len = 8;
  c.n_regions = 3;
  c.feature_dim = 5;
  c.dropout = 0.0;
  c.pad_id = 2;
  c.bos_id = 3;
  c.eos_id = 4;
  return c;
}

inline fewvlm::RegionFeatures toy_regions(Rng& r, std::size_t n = 3, std::size_t dim = 5) {
  fewvlm::RegionFeatures f;
  f.n_regions = n;
  f.dim = dim;
  for (std::size_t i = 0; i < n * dim; ++i) f.features.push_back(static_cast<float>(r.normal()));
  for (std::size_t i = 0; i < n; ++i) {
    const float x = static_cast<float>(r.uniform() * 0.5), y = static_cast<float>(r.uniform() * 0.5);
    f.boxes.insert(f.boxes.end(), {x, y, x + 0.25f, y + 0.4f});
  }
  return f;
}

// Gradient of the summed NLL w.r.t. every model parameter, batched over two
// examples of different lengths so padding paths are exercised.
inline double model_loss_error(std::uint64_t seed) {
  Rng r(seed);
  fewvlm::FewVLMModel<double> model(toy_config(), seed);
  // Scale up the init so the check is not dominated by tiny gradients.
  auto params = model.parameters();
  for (auto& p : params)
    for (auto& v : p.tensor.values()) v *= 8.0;
  auto rf1 = toy_regions(r);
  auto rf2 = toy_regions(r);
  std::fill(rf2.features.begin() + 10, rf2.features.end(), 0.0f);  // last region is padding
  std::fill(rf2.boxes.begin() + 8, rf2.boxes.end(), 0.0f);
  std::vector<fewvlm::SeqExample> batch = {{&rf1, {5, 0, 6}, {7, 1, 4}}, {&rf2, {8}, {9, 4}}};
  std::vector<TensorD> inputs;
  for (auto& p : params) inputs.push_back(p.tensor);
  return relative_error(inputs, [&](Graph<double>& g, const std::vector<TensorD>&) {
    return model.nll_loss(g, batch);
  });
}

}  // namespace opsuite
