#include "fewvlm/optim.hpp"

#include <cmath>

#include "fewvlm/error.hpp"

namespace fewvlm::nn {

double warmup_lr(double lr, std::size_t step, std::size_t total_steps, double warmup_fraction) {
  const double warmup_steps = warmup_fraction * static_cast<double>(total_steps);
  if (warmup_steps <= 0.0 || static_cast<double>(step) >= warmup_steps) return lr;
  return lr * static_cast<double>(step) / warmup_steps;
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state,
               const AdamConfig& cfg, std::size_t schedule_step) {
  if (params.size() != grads.size()) {
    fail(ErrorCode::kShapeMismatch, "adam_step: " + std::to_string(params.size()) + " params vs " +
                                        std::to_string(grads.size()) + " grads");
  }
  if (!(cfg.lr > 0.0)) fail(ErrorCode::kInvalidArgument, "adam_step: learning rate must be > 0");
  if (state.m.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  if (state.m.size() != params.size()) fail(ErrorCode::kShapeMismatch, "adam_step: state size mismatch");
  ++state.step;
  const double lr = warmup_lr(cfg.lr, schedule_step, cfg.total_steps, cfg.warmup_fraction);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T gi = grads[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * gi;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * gi * gi;
    params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps);
  }
}

template <typename T>
Adam<T>::Adam(ParameterList<T> params, AdamConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) fail(ErrorCode::kInvalidArgument, "Adam: learning rate must be > 0");
  if (cfg_.warmup_fraction < 0.0 || cfg_.warmup_fraction >= 1.0) {
    fail(ErrorCode::kInvalidArgument, "Adam: warmup fraction must lie in [0, 1)");
  }
}

template <typename T>
double Adam<T>::current_lr() const {
  return warmup_lr(cfg_.lr, step_ + 1, cfg_.total_steps, cfg_.warmup_fraction);
}

template <typename T>
void Adam<T>::step() {
  ++step_;
  T clip = T(1);
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (auto& p : params_)
      for (T gv : p.tensor.grad()) sq += static_cast<double>(gv) * static_cast<double>(gv);
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip = static_cast<T>(cfg_.clip_norm / norm);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    auto grad = t.mutable_grad();
    if (clip != T(1))
      for (T& gv : grad) gv *= clip;
    adam_step<T>(t.values(), grad, states_[i], cfg_, step_);
    t.zero_grad();
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double global_grad_norm(std::span<const NamedTensor<float>> params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (float gv : p.tensor.grad()) sq += static_cast<double>(gv) * gv;
  return std::sqrt(sq);
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&,
                               const AdamConfig&, std::size_t);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&,
                                const AdamConfig&, std::size_t);
template class Adam<float>;
template class Adam<double>;

}  // namespace fewvlm::nn
