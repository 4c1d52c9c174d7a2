#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "adfp/common.hpp"

namespace adfp {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);

// Disables graph recording inside its scope (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();

 private:
  bool prev_;
};

namespace detail {

template <typename T>
struct Node;

}  // namespace detail

// Dense row-major tensor with optional reverse-mode gradient. Values are
// immutable once the tensor participates in a graph; raw() is for builders.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T value);
  static TensorT from_data(Shape shape, std::vector<T> data);
  static TensorT randn(Shape shape, Rng& rng);
  static TensorT uniform(Shape shape, Rng& rng, T lo, T hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  int64_t dim(int axis) const;  // negative axes allowed
  int rank() const;

  std::span<const T> data() const;
  std::span<T> raw();
  T item() const;

  bool requires_grad() const;
  TensorT& set_requires_grad(bool flag);

  bool has_grad() const;
  TensorT grad() const;  // zeros if no gradient has been accumulated
  std::span<const T> grad_data() const;
  void zero_grad();
  void accumulate_grad(std::span<const T> values);

  TensorT detach() const;  // shares the value buffer, drops the graph
  TensorT clone() const;   // deep copy of values, no graph

  std::shared_ptr<detail::Node<T>>& node() { return node_; }
  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

  explicit TensorT(std::shared_ptr<detail::Node<T>> node)
      : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---- elementwise, with right-aligned broadcasting ----
template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> add(const TensorT<T>& a, T scalar);
template <typename T> TensorT<T> mul(const TensorT<T>& a, T scalar);
template <typename T> TensorT<T> neg(const TensorT<T>& a);

// ---- elementwise unary ----
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> silu(const TensorT<T>& a);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& a);
template <typename T> TensorT<T> tanh(const TensorT<T>& a);
template <typename T> TensorT<T> exp(const TensorT<T>& a);
template <typename T> TensorT<T> log(const TensorT<T>& a);
template <typename T> TensorT<T> sqrt(const TensorT<T>& a);

// ---- linear algebra / convolution ----
template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride = 1,
                  int pad = 0);
template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k, int stride = 0);
template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k, int stride = 0);
template <typename T>
TensorT<T> upsample_nearest2d(const TensorT<T>& x, int factor);

// ---- shape ----
template <typename T> TensorT<T> reshape(const TensorT<T>& x, Shape shape);
template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int64_t start, int64_t len);
template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis);

// ---- reductions / normalization ----
template <typename T> TensorT<T> sum(const TensorT<T>& x);
template <typename T>
TensorT<T> sum(const TensorT<T>& x, std::vector<int> axes, bool keepdims);
template <typename T> TensorT<T> mean(const TensorT<T>& x);
template <typename T>
TensorT<T> mean(const TensorT<T>& x, std::vector<int> axes, bool keepdims);
template <typename T> TensorT<T> softmax(const TensorT<T>& x, int axis = -1);
template <typename T> TensorT<T> log_softmax(const TensorT<T>& x, int axis = -1);

// ---- fused losses ----
// Mean cross-entropy over rows of [B, K] logits.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::span<const int> labels);
// Mean binary cross-entropy on a single logit per sample ([B] or [B,1]).
template <typename T>
TensorT<T> bce_with_logits(const TensorT<T>& logits, std::span<const T> targets);
// Per-sample z_y - max_{i != y} z_i on [B, K] logits.
template <typename T>
TensorT<T> margin_loss(const TensorT<T>& logits, std::span<const int> labels);
// Per-sample difference-of-logits-ratio (z_y - max_{i!=y} z_i)/(z_p1 - z_p3);
// needs >= 3 classes, rejects all-equal top/third logits.
template <typename T>
TensorT<T> dlr_loss(const TensorT<T>& logits, std::span<const int> labels);

// Plain-probability BCE, used for metric/property checks (not a graph op).
double bce_reference(std::span<const double> probs, std::span<const double> targets);

// Reverse-mode sweep from a scalar loss. May be invoked multiple times on the
// same graph with different roots; gradients accumulate until zeroed.
template <typename T> void backward(const TensorT<T>& loss);

}  // namespace adfp
