#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fewvlm/tensor.hpp"

namespace fewvlm::nn {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedTensor<T>>;

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 1;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

// Linear ramp from 0 to `lr` over the first warmup_fraction * total_steps
// updates, constant afterwards. `step` counts updates from 1.
double warmup_lr(double lr, std::size_t step, std::size_t total_steps, double warmup_fraction);

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::size_t step = 0;
};

// One Adam update of `params` in place. `schedule_step` is the 1-based index
// of this update within the schedule.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const AdamConfig& cfg, std::size_t schedule_step);

template <typename T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamConfig cfg);

  // Applies one update from the accumulated gradients, then clears them.
  // Parameters without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();
  std::size_t step_count() const { return step_; }
  double current_lr() const;
  const AdamConfig& config() const { return cfg_; }

 private:
  ParameterList<T> params_;
  std::vector<AdamState<T>> states_;
  AdamConfig cfg_;
  std::size_t step_ = 0;
};

double global_grad_norm(std::span<const NamedTensor<float>> params);

}  // namespace fewvlm::nn
