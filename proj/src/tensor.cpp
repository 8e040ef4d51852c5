#include "fewvlm/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "fewvlm/error.hpp"

namespace fewvlm::nn {

namespace {

constexpr std::size_t kAlign = 64;
constexpr std::size_t kCacheMin = std::size_t{1} << 16;
constexpr std::size_t kCacheLimit = std::size_t{1} << 29;

// Rounds up to one of eight classes per power of two so that batches with
// slightly different lengths still reuse blocks.
std::size_t size_class(std::size_t bytes) {
  if (bytes < kCacheMin) return bytes;
  std::size_t top = kCacheMin;
  while (top * 2 <= bytes) top *= 2;
  const std::size_t step = top / 8;
  return (bytes + step - 1) / step * step;
}

struct BlockCache {
  std::multimap<std::size_t, void*> free;
  std::size_t held = 0;
  ~BlockCache() {
    for (auto& [bytes, p] : free) ::operator delete(p, std::align_val_t{kAlign});
  }
};

BlockCache& block_cache() {
  thread_local BlockCache cache;
  return cache;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> as_matrix(Buffer<T>& buf, std::size_t rows, std::size_t cols) {
  return MatMap<T>(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
std::shared_ptr<TensorNode<T>> make_node(Shape shape, bool requires_grad) {
  auto node = std::make_shared<TensorNode<T>>();
  node->value.assign(shape_numel(shape), T(0));
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return node;
}

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  fail(ErrorCode::kShapeMismatch, op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) fail(ErrorCode::kInvalidArgument, std::string(op) + ": undefined tensor");
}

}  // namespace

void* buffer_acquire(std::size_t bytes) {
  const std::size_t cls = size_class(bytes);
  if (cls >= kCacheMin) {
    auto& cache = block_cache();
    auto it = cache.free.find(cls);
    if (it != cache.free.end()) {
      void* p = it->second;
      cache.free.erase(it);
      cache.held -= cls;
      return p;
    }
  }
  return ::operator new(cls, std::align_val_t{kAlign});
}

void buffer_release(void* p, std::size_t bytes) noexcept {
  if (!p) return;
  const std::size_t cls = size_class(bytes);
  if (cls >= kCacheMin) {
    auto& cache = block_cache();
    if (cache.held + cls <= kCacheLimit) {
      try {
        cache.free.emplace(cls, p);
        cache.held += cls;
        return;
      } catch (...) {
      }
    }
  }
  ::operator delete(p, std::align_val_t{kAlign});
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_node<T>(std::move(shape), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    fail(ErrorCode::kShapeMismatch, "value count " + std::to_string(values.size()) +
                                        " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
bool Graph<T>::tracks(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!enabled_) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void Graph<T>::backward(Tensor<T>& loss) {
  if (loss.numel() != 1) {
    fail(ErrorCode::kShapeMismatch, "backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  tape_.clear();
}

AttentionMask AttentionMask::all(std::size_t batch, std::size_t q_len, std::size_t k_len) {
  AttentionMask m{batch, q_len, k_len, {}};
  m.keep.assign(batch * q_len * k_len, 1);
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t batch, std::size_t q_len, std::size_t k_len,
                                         std::span<const std::uint8_t> key_valid) {
  if (key_valid.size() != batch * k_len) {
    fail(ErrorCode::kShapeMismatch, "key padding mask has wrong length");
  }
  AttentionMask m{batch, q_len, k_len, {}};
  m.keep.resize(batch * q_len * k_len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < q_len; ++i)
      std::copy_n(key_valid.begin() + static_cast<std::ptrdiff_t>(b * k_len), k_len,
                  m.keep.begin() + static_cast<std::ptrdiff_t>((b * q_len + i) * k_len));
  return m;
}

AttentionMask& AttentionMask::causal() {
  if (q_len != k_len) fail(ErrorCode::kShapeMismatch, "causal mask needs a square score matrix");
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < q_len; ++i)
      for (std::size_t j = i + 1; j < k_len; ++j) keep[(b * q_len + i) * k_len + j] = 0;
  return *this;
}

// --- ops -------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  const bool track = g.tracks({&a, &b});
  auto out = make_node<T>({a.rows(), b.cols()}, track);
  as_matrix(out->value, a.rows(), b.cols()).noalias() = as_matrix(a) * as_matrix(b);
  if (track) {
    g.record([a, b, out] {
      if (out->grad.empty()) return;
      auto dout = as_matrix(out->grad, a.rows(), b.cols());
      if (a.requires_grad())
        as_matrix(a.node()->ensure_grad(), a.rows(), a.cols()).noalias() += dout * as_matrix(b).transpose();
      if (b.requires_grad())
        as_matrix(b.node()->ensure_grad(), b.rows(), b.cols()).noalias() += as_matrix(a).transpose() * dout;
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> matmul_transposed(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul_transposed");
  require_defined(b, "matmul_transposed");
  if (a.cols() != b.cols()) shape_error("matmul_transposed", a.shape(), b.shape());
  const bool track = g.tracks({&a, &b});
  auto out = make_node<T>({a.rows(), b.rows()}, track);
  as_matrix(out->value, a.rows(), b.rows()).noalias() = as_matrix(a) * as_matrix(b).transpose();
  if (track) {
    g.record([a, b, out] {
      if (out->grad.empty()) return;
      auto dout = as_matrix(out->grad, a.rows(), b.rows());
      if (a.requires_grad())
        as_matrix(a.node()->ensure_grad(), a.rows(), a.cols()).noalias() += dout * as_matrix(b);
      if (b.requires_grad())
        as_matrix(b.node()->ensure_grad(), b.rows(), b.cols()).noalias() += dout.transpose() * as_matrix(a);
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  if (x.cols() != w.rows()) shape_error("linear", x.shape(), w.shape());
  if (bias.defined() && bias.numel() != w.cols()) shape_error("linear bias", w.shape(), bias.shape());
  const bool track = g.tracks({&x, &w, &bias});
  const std::size_t m = x.rows(), n = w.cols();
  auto out = make_node<T>({m, n}, track);
  auto y = as_matrix(out->value, m, n);
  y.noalias() = as_matrix(x) * as_matrix(w);
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data(), static_cast<Eigen::Index>(n));
    y.rowwise() += bv;
  }
  if (track) {
    g.record([x, w, bias, out, m, n] {
      if (out->grad.empty()) return;
      auto dy = as_matrix(out->grad, m, n);
      if (x.requires_grad())
        as_matrix(x.node()->ensure_grad(), m, x.cols()).noalias() += dy * as_matrix(w).transpose();
      if (w.requires_grad())
        as_matrix(w.node()->ensure_grad(), w.rows(), n).noalias() += as_matrix(x).transpose() * dy;
      if (bias.defined() && bias.requires_grad()) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bias.node()->ensure_grad().data(),
                                                          static_cast<Eigen::Index>(n));
        db += dy.colwise().sum();
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const bool same = a.numel() == b.numel() && a.rows() == b.rows();
  const bool broadcast = !same && b.numel() == a.cols();
  if (!same && !broadcast) shape_error("add", a.shape(), b.shape());
  const bool track = g.tracks({&a, &b});
  auto out = make_node<T>(a.shape(), track);
  const std::size_t n = a.numel(), cols = a.cols();
  const T* av = a.data();
  const T* bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = av[i] + bv[broadcast ? i % cols : i];
  if (track) {
    g.record([a, b, out, broadcast, n, cols] {
      if (out->grad.empty()) return;
      const auto& dy = out->grad;
      if (a.requires_grad()) {
        auto& da = a.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto& db = b.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) db[broadcast ? i % cols : i] += dy[i];
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  const bool track = g.tracks({&a, &b});
  auto out = make_node<T>(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a.data()[i] * b.data()[i];
  if (track) {
    g.record([a, b, out, n] {
      if (out->grad.empty()) return;
      const auto& dy = out->grad;
      if (a.requires_grad()) {
        auto& da = a.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& db = b.node()->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * a.data()[i];
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T factor) {
  require_defined(a, "scale");
  const bool track = g.tracks({&a});
  auto out = make_node<T>(a.shape(), track);
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out->value[i] = a.data()[i] * factor;
  if (track) {
    g.record([a, out, n, factor] {
      if (out->grad.empty()) return;
      auto& da = a.node()->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) da[i] += out->grad[i] * factor;
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& a) {
  require_defined(a, "softmax");
  const bool track = g.tracks({&a});
  auto out = make_node<T>(a.shape(), track);
  const std::size_t rows = a.rows(), cols = a.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * cols;
    T* y = out->value.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  if (track) {
    g.record([a, out, rows, cols] {
      if (out->grad.empty()) return;
      auto& da = a.node()->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = out->value.data() + r * cols;
        const T* dy = out->grad.data() + r * cols;
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) da[r * cols + c] += y[c] * (dy[c] - dot);
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> layer_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps) {
  require_defined(x, "layer_norm");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || bias.numel() != cols) shape_error("layer_norm", x.shape(), gain.shape());
  const bool track = g.tracks({&x, &gain, &bias});
  auto out = make_node<T>(x.shape(), track);
  Buffer<T> xhat(x.numel());
  Buffer<T> inv_std(rows);
  const auto X = as_matrix(x).array();
  auto H = as_matrix(xhat, rows, cols).array();
  const auto G = ConstMatMap<T>(gain.data(), 1, static_cast<Eigen::Index>(cols)).array();
  const auto B = ConstMatMap<T>(bias.data(), 1, static_cast<Eigen::Index>(cols)).array();
  auto Y = as_matrix(out->value, rows, cols).array();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    const T mean = X.row(i).mean();
    H.row(i) = X.row(i) - mean;
    inv_std[r] = T(1) / std::sqrt(H.row(i).square().mean() + eps);
    H.row(i) *= inv_std[r];
    Y.row(i) = H.row(i) * G + B;
  }
  if (track) {
    g.record([x, gain, bias, out, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      if (out->grad.empty()) return;
      const auto dY = as_matrix(out->grad, rows, cols).array();
      const auto H = as_matrix(xhat, rows, cols).array();
      const auto c = static_cast<Eigen::Index>(cols);
      if (gain.requires_grad()) {
        MatMap<T>(gain.node()->ensure_grad().data(), 1, c).array() += (dY * H).colwise().sum();
      }
      if (bias.requires_grad()) {
        MatMap<T>(bias.node()->ensure_grad().data(), 1, c).array() += dY.colwise().sum();
      }
      if (x.requires_grad()) {
        auto dX = as_matrix(x.node()->ensure_grad(), rows, cols).array();
        const auto G = ConstMatMap<T>(gain.data(), 1, c).array();
        for (std::size_t r = 0; r < rows; ++r) {
          const auto i = static_cast<Eigen::Index>(r);
          const Eigen::Array<T, 1, Eigen::Dynamic> d = dY.row(i) * G;
          const T mean_d = d.mean();
          const T mean_dh = (d * H.row(i)).mean();
          dX.row(i) += inv_std[r] * (d - mean_d - H.row(i) * mean_dh);
        }
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> gelu(Graph<T>& g, const Tensor<T>& x) {
  require_defined(x, "gelu");
  const bool track = g.tracks({&x});
  auto out = make_node<T>(x.shape(), track);
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T c3 = T(0.044715);
  const std::size_t n = x.numel();
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto v = Eigen::Map<const Arr>(x.data(), static_cast<Eigen::Index>(n));
  Buffer<T> tanh_buf(n);
  auto t = Eigen::Map<Arr>(tanh_buf.data(), static_cast<Eigen::Index>(n));
  t = (k * (v + c3 * v.cube())).tanh();
  Eigen::Map<Arr>(out->value.data(), static_cast<Eigen::Index>(n)) = T(0.5) * v * (T(1) + t);
  if (track) {
    g.record([x, out, n, k, c3, tanh_buf = std::move(tanh_buf)] {
      if (out->grad.empty()) return;
      const auto len = static_cast<Eigen::Index>(n);
      const auto v = Eigen::Map<const Arr>(x.data(), len);
      const auto t = Eigen::Map<const Arr>(tanh_buf.data(), len);
      const auto dy = Eigen::Map<const Arr>(out->grad.data(), len);
      auto dx = Eigen::Map<Arr>(x.node()->ensure_grad().data(), len);
      const auto dt = (T(1) - t.square()) * k * (T(1) + T(3) * c3 * v.square());
      dx += dy * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> embedding_lookup(Graph<T>& g, const Tensor<T>& table, std::span<const TokenId> ids) {
  require_defined(table, "embedding_lookup");
  const std::size_t dim = table.cols(), vocab = table.rows();
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      fail(ErrorCode::kInvalidId, "embedding id " + std::to_string(id) + " outside table of " +
                                      std::to_string(vocab) + " rows");
    }
  }
  const bool track = g.tracks({&table});
  auto out = make_node<T>({ids.size(), dim}, track);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * dim, dim, out->value.data() + i * dim);
  }
  if (track) {
    g.record([table, out, dim, idx = std::vector<TokenId>(ids.begin(), ids.end())] {
      if (out->grad.empty()) return;
      auto& dt = table.node()->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = dt.data() + static_cast<std::size_t>(idx[i]) * dim;
        const T* src = out->grad.data() + i * dim;
        for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> dropout(Graph<T>& g, const Tensor<T>& x, double p) {
  require_defined(x, "dropout");
  if (!g.training() || p <= 0.0) return x;
  if (p >= 1.0) fail(ErrorCode::kInvalidArgument, "dropout probability must be < 1");
  const bool track = g.tracks({&x});
  auto out = make_node<T>(x.shape(), track);
  const std::size_t n = x.numel();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Buffer<T> mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = g.rng().uniform() < p ? T(0) : keep_scale;
    out->value[i] = x.data()[i] * mask[i];
  }
  if (track) {
    g.record([x, out, n, mask = std::move(mask)] {
      if (out->grad.empty()) return;
      auto& dx = x.node()->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) dx[i] += out->grad[i] * mask[i];
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  require_defined(x, "sum");
  const bool track = g.tracks({&x});
  auto out = make_node<T>({1}, track);
  T total = 0;
  for (T v : x.values()) total += v;
  out->value[0] = total;
  if (track) {
    g.record([x, out] {
      if (out->grad.empty()) return;
      auto& dx = x.node()->ensure_grad();
      for (auto& d : dx) d += out->grad[0];
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> concat_sequences(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b, std::size_t batch) {
  require_defined(a, "concat_sequences");
  require_defined(b, "concat_sequences");
  if (batch == 0 || a.cols() != b.cols() || a.rows() % batch != 0 || b.rows() % batch != 0) {
    shape_error("concat_sequences", a.shape(), b.shape());
  }
  const std::size_t la = a.rows() / batch, lb = b.rows() / batch, d = a.cols();
  const bool track = g.tracks({&a, &b});
  auto out = make_node<T>({batch * (la + lb), d}, track);
  for (std::size_t i = 0; i < batch; ++i) {
    T* dst = out->value.data() + i * (la + lb) * d;
    std::copy_n(a.data() + i * la * d, la * d, dst);
    std::copy_n(b.data() + i * lb * d, lb * d, dst + la * d);
  }
  if (track) {
    g.record([a, b, out, batch, la, lb, d] {
      if (out->grad.empty()) return;
      for (std::size_t i = 0; i < batch; ++i) {
        const T* src = out->grad.data() + i * (la + lb) * d;
        if (a.requires_grad()) {
          T* da = a.node()->ensure_grad().data() + i * la * d;
          for (std::size_t j = 0; j < la * d; ++j) da[j] += src[j];
        }
        if (b.requires_grad()) {
          T* db = b.node()->ensure_grad().data() + i * lb * d;
          for (std::size_t j = 0; j < lb * d; ++j) db[j] += src[la * d + j];
        }
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> attention(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const AttentionMask& mask, std::size_t n_heads) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  const std::size_t d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    fail(ErrorCode::kShapeMismatch, "attention: width " + std::to_string(d) + " not divisible by " +
                                        std::to_string(n_heads) + " heads");
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) shape_error("attention", q.shape(), k.shape());
  const std::size_t batch = mask.batch, lq = mask.q_len, lk = mask.k_len;
  if (batch == 0 || q.rows() != batch * lq || k.rows() != batch * lk || mask.keep.size() != batch * lq * lk) {
    fail(ErrorCode::kShapeMismatch, "attention: mask (" + std::to_string(batch) + ", " + std::to_string(lq) +
                                        ", " + std::to_string(lk) + ") does not match q " +
                                        shape_string(q.shape()) + " / k " + shape_string(k.shape()));
  }
  const std::size_t dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const bool track = g.tracks({&q, &k, &v});
  auto out = make_node<T>({batch * lq, d}, track);
  // Attention weights per (batch, head): lq x lk.
  Buffer<T> probs(batch * n_heads * lq * lk, T(0));
  const auto ld = static_cast<Eigen::Index>(d);
  const auto eq = static_cast<Eigen::Index>(lq), ek = static_cast<Eigen::Index>(lk),
             eh = static_cast<Eigen::Index>(dh);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      ConstStridedMap<T> qm(q.data() + b * lq * d + h * dh, eq, eh, Eigen::OuterStride<>(ld));
      ConstStridedMap<T> km(k.data() + b * lk * d + h * dh, ek, eh, Eigen::OuterStride<>(ld));
      ConstStridedMap<T> vm(v.data() + b * lk * d + h * dh, ek, eh, Eigen::OuterStride<>(ld));
      StridedMap<T> om(out->value.data() + b * lq * d + h * dh, eq, eh, Eigen::OuterStride<>(ld));
      T* p = probs.data() + (b * n_heads + h) * lq * lk;
      MatMap<T> pm(p, eq, ek);
      pm.noalias() = (qm * km.transpose()) * inv_sqrt;
      for (std::size_t i = 0; i < lq; ++i) {
        T* row = p + i * lk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lk; ++j)
          if (mask.at(b, i, j)) mx = std::max(mx, row[j]);
        if (mx == -std::numeric_limits<T>::infinity()) {
          std::fill_n(row, lk, T(0));
          continue;
        }
        T total = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          row[j] = mask.at(b, i, j) ? std::exp(row[j] - mx) : T(0);
          total += row[j];
        }
        for (std::size_t j = 0; j < lk; ++j) row[j] /= total;
      }
      om.noalias() = pm * vm;
    }
  }

  if (track) {
    g.record([q, k, v, out, probs = std::move(probs), batch, n_heads, lq, lk, d, dh, inv_sqrt] {
      if (out->grad.empty()) return;
      const auto ld = static_cast<Eigen::Index>(d);
      const auto eq = static_cast<Eigen::Index>(lq), ek = static_cast<Eigen::Index>(lk),
                 eh = static_cast<Eigen::Index>(dh);
      T* dq = q.requires_grad() ? q.node()->ensure_grad().data() : nullptr;
      T* dk = k.requires_grad() ? k.node()->ensure_grad().data() : nullptr;
      T* dv = v.requires_grad() ? v.node()->ensure_grad().data() : nullptr;
      RowMat<T> dp(eq, ek);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t qoff = b * lq * d + h * dh, koff = b * lk * d + h * dh;
          ConstStridedMap<T> qm(q.data() + qoff, eq, eh, Eigen::OuterStride<>(ld));
          ConstStridedMap<T> km(k.data() + koff, ek, eh, Eigen::OuterStride<>(ld));
          ConstStridedMap<T> vm(v.data() + koff, ek, eh, Eigen::OuterStride<>(ld));
          ConstStridedMap<T> dom(out->grad.data() + qoff, eq, eh, Eigen::OuterStride<>(ld));
          ConstMatMap<T> pm(probs.data() + (b * n_heads + h) * lq * lk, eq, ek);
          if (dv) {
            StridedMap<T> dvm(dv + koff, ek, eh, Eigen::OuterStride<>(ld));
            dvm.noalias() += pm.transpose() * dom;
          }
          if (!dq && !dk) continue;
          dp.noalias() = dom * vm.transpose();
          // softmax backward; masked entries have p = 0 and drop out.
          for (Eigen::Index i = 0; i < eq; ++i) {
            const T dot = (dp.row(i).array() * pm.row(i).array()).sum();
            dp.row(i) = (pm.row(i).array() * (dp.row(i).array() - dot)) * inv_sqrt;
          }
          if (dq) {
            StridedMap<T> dqm(dq + qoff, eq, eh, Eigen::OuterStride<>(ld));
            dqm.noalias() += dp * km;
          }
          if (dk) {
            StridedMap<T> dkm(dk + koff, ek, eh, Eigen::OuterStride<>(ld));
            dkm.noalias() += dp.transpose() * qm;
          }
        }
      }
    });
  }
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& logits, std::span<const TokenId> targets,
                        std::span<const T> weights) {
  require_defined(logits, "cross_entropy");
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows || weights.size() != rows) {
    fail(ErrorCode::kShapeMismatch, "cross_entropy: " + std::to_string(rows) + " logit rows but " +
                                        std::to_string(targets.size()) + " targets");
  }
  const bool track = g.tracks({&logits});
  auto out = make_node<T>({1}, track);
  Buffer<T> probs(rows * cols);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = logits.data() + r * cols;
    T* p = probs.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (p[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    if (weights[r] == T(0)) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= cols) {
      fail(ErrorCode::kInvalidId, "cross_entropy target " + std::to_string(t) + " out of range");
    }
    total += weights[r] * (mx + std::log(z) - x[t]);
  }
  out->value[0] = total;
  if (track) {
    g.record([logits, out, rows, cols, probs = std::move(probs),
              tg = std::vector<TokenId>(targets.begin(), targets.end()),
              w = std::vector<T>(weights.begin(), weights.end())] {
      if (out->grad.empty()) return;
      auto& dx = logits.node()->ensure_grad();
      const T dl = out->grad[0];
      for (std::size_t r = 0; r < rows; ++r) {
        if (w[r] == T(0)) continue;
        const T s = dl * w[r];
        for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += s * probs[r * cols + c];
        dx[r * cols + static_cast<std::size_t>(tg[r])] -= s;
      }
    });
  }
  return Tensor<T>(out);
}

#define FEWVLM_INSTANTIATE_OPS(T)                                                                   \
  template class Tensor<T>;                                                                         \
  template class Graph<T>;                                                                          \
  template Tensor<T> matmul(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> matmul_transposed(Graph<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> linear(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> add(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mul(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> scale(Graph<T>&, const Tensor<T>&, T);                                         \
  template Tensor<T> softmax(Graph<T>&, const Tensor<T>&);                                          \
  template Tensor<T> layer_norm(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> gelu(Graph<T>&, const Tensor<T>&);                                             \
  template Tensor<T> embedding_lookup(Graph<T>&, const Tensor<T>&, std::span<const TokenId>);       \
  template Tensor<T> dropout(Graph<T>&, const Tensor<T>&, double);                                  \
  template Tensor<T> sum(Graph<T>&, const Tensor<T>&);                                              \
  template Tensor<T> concat_sequences(Graph<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template Tensor<T> attention(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                               const AttentionMask&, std::size_t);                                  \
  template Tensor<T> cross_entropy(Graph<T>&, const Tensor<T>&, std::span<const TokenId>,           \
                                   std::span<const T>);

FEWVLM_INSTANTIATE_OPS(float)
FEWVLM_INSTANTIATE_OPS(double)

}  // namespace fewvlm::nn
