#pragma once

// Central finite differences against the tape's analytic gradients, in double.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fewvlm/rng.hpp"
#include "fewvlm/tensor.hpp"

namespace gradcheck {

using fewvlm::nn::Graph;
using TensorD = fewvlm::nn::Tensor<double>;
using LossFn = std::function<TensorD(Graph<double>&, const std::vector<TensorD>&)>;

inline TensorD random_tensor(fewvlm::nn::Shape shape, fewvlm::Rng& rng, bool requires_grad = true,
                             double scale = 1.0) {
  std::vector<double> v(fewvlm::nn::shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return TensorD::from(std::move(shape), std::move(v), requires_grad);
}

// sum(x * r) for a fixed random r, so every output coordinate matters.
inline TensorD weighted_sum(Graph<double>& g, const TensorD& x, std::uint64_t seed) {
  fewvlm::Rng rng(seed);
  auto r = random_tensor(x.shape(), rng, false);
  return fewvlm::nn::sum(g, fewvlm::nn::mul(g, x, r));
}

// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all inputs
// that require gradients; `graph_seed` fixes any dropout masks.
inline double relative_error(std::vector<TensorD> inputs, const LossFn& loss_fn, double eps = 1e-5,
                             std::uint64_t graph_seed = 0, bool training = false) {
  auto eval = [&](bool record) {
    Graph<double> g(record);
    g.set_training(training);
    g.seed(graph_seed);
    auto loss = loss_fn(g, inputs);
    if (record) g.backward(loss);
    return loss.item();
  };
  for (auto& t : inputs)
    if (t.requires_grad()) t.zero_grad();
  eval(true);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.values()[i];
      t.values()[i] = orig + eps;
      const double up = eval(false);
      t.values()[i] = orig - eps;
      const double down = eval(false);
      t.values()[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-12);
  return std::sqrt(diff2) / denom;
}

}  // namespace gradcheck
