#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fewvlm/data.hpp"
#include "fewvlm/rng.hpp"

// Dense tensors with tape-based reverse-mode differentiation.
//
// Tensors are 2-D for every op below: `rows()` is the product of all
// leading dimensions and `cols()` the trailing one. The scalar type is a
// template parameter; `float` is the training default and `double` backs
// the finite-difference gradient checks.
namespace fewvlm::nn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// 64-byte aligned storage. Large blocks are recycled through a per-thread
// cache since every training step allocates the same activation sizes again.
void* buffer_acquire(std::size_t bytes);
void buffer_release(void* p, std::size_t bytes) noexcept;

// Eigen picks its vectorized summation order from the buffer address, so
// every buffer gets the same alignment to keep float results reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(buffer_acquire(n * sizeof(T))); }
  void deallocate(T* p, std::size_t n) noexcept { buffer_release(p, n * sizeof(T)); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // allocated on first accumulation
  bool requires_grad = false;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  T item() const { return node_->value.at(0); }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy that shares nothing with the graph that produced *this.
  Tensor clone() const;
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Append-only tape. Ops push their backward closure in creation order, which
// is a topological order of the DAG; backward() replays it in reverse so each
// node is visited exactly once after all of its consumers.
template <typename T>
class Graph {
 public:
  explicit Graph(bool enabled = true) : enabled_(enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool enabled() const { return enabled_; }
  // Dropout is active only in training graphs.
  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }
  Rng& rng() { return rng_; }
  void seed(std::uint64_t s) { rng_ = Rng(s); }

  // True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const;
  void record(std::function<void()> backward_fn) { tape_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return tape_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs the tape backwards. `loss` must hold a
  // single value. Gradients accumulate into every reachable leaf.
  void backward(Tensor<T>& loss);

 private:
  bool enabled_;
  bool training_ = false;
  Rng rng_{0};
  std::vector<std::function<void()>> tape_;
};

// Boolean mask over attention scores of shape (batch, q_len, k_len);
// 1 keeps a score, 0 removes it.
struct AttentionMask {
  std::size_t batch = 0, q_len = 0, k_len = 0;
  std::vector<std::uint8_t> keep;

  static AttentionMask all(std::size_t batch, std::size_t q_len, std::size_t k_len);
  // key_valid has batch*k_len entries.
  static AttentionMask key_padding(std::size_t batch, std::size_t q_len, std::size_t k_len,
                                   std::span<const std::uint8_t> key_valid);
  // Adds the lower-triangular constraint (requires q_len == k_len).
  AttentionMask& causal();
  bool at(std::size_t b, std::size_t i, std::size_t j) const {
    return keep[(b * q_len + i) * k_len + j] != 0;
  }
};

template <typename T> Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
// a (m x k) times b^T where b is (n x k).
template <typename T> Tensor<T> matmul_transposed(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
// x (m x in) * w (in x out) + bias (out); bias may be undefined.
template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
// Same shapes, or b with cols(a) values broadcast over the rows of a.
template <typename T> Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T factor);
template <typename T> Tensor<T> softmax(Graph<T>& g, const Tensor<T>& a);
template <typename T>
Tensor<T> layer_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6));
template <typename T> Tensor<T> gelu(Graph<T>& g, const Tensor<T>& x);
template <typename T>
Tensor<T> embedding_lookup(Graph<T>& g, const Tensor<T>& table, std::span<const TokenId> ids);
template <typename T> Tensor<T> dropout(Graph<T>& g, const Tensor<T>& x, double p);
template <typename T> Tensor<T> sum(Graph<T>& g, const Tensor<T>& x);
// Per batch item, rows of `a` (la each) followed by rows of `b` (lb each).
template <typename T>
Tensor<T> concat_sequences(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b, std::size_t batch);
// Multi-head scaled dot-product attention on already-projected inputs.
// q: (batch*q_len, d); k, v: (batch*k_len, d). Masked scores get weight 0;
// a row with every key masked produces zeros.
template <typename T>
Tensor<T> attention(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionMask& mask, std::size_t n_heads);
// Sum over rows of weight[i] * -log softmax(logits[i])[target[i]].
template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& logits, std::span<const TokenId> targets,
                        std::span<const T> weights);

}  // namespace fewvlm::nn
