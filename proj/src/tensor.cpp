#include "adfp/tensor.hpp"

#include <algorithm>
#include <array>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <unordered_set>

extern "C" void openblas_set_num_threads(int);

namespace adfp {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

namespace {

// Outer parallelism happens at batch/chunk level; BLAS stays single-threaded
// so results are identical for any ADFP_THREADS value.
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
} g_blas_init;

thread_local bool g_no_grad = false;

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = prev_; }
bool NoGradGuard::active() { return g_no_grad; }

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool finite_checked = false;
  std::vector<TensorT<T>> parents;
  std::function<void(Node<T>&)> backward_fn;

  int64_t size() const { return static_cast<int64_t>(value->size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), T(0));
  }
};

}  // namespace detail

namespace {

using detail::Node;

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::vector<T> data) {
  auto n = std::make_shared<Node<T>>();
  if (numel(shape) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("tensor: shape " + format_shape(shape) +
                                " does not match buffer of " +
                                std::to_string(data.size()) + " elements");
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<T>>(std::move(data));
  return n;
}

template <typename T>
void check_defined(const char* op, const TensorT<T>& t) {
  if (!t.defined())
    throw std::invalid_argument(std::string(op) + ": undefined tensor operand");
}

template <typename T>
void check_finite(const char* op, const TensorT<T>& t) {
  auto& node = *t.node();
  if (node.finite_checked) return;
  for (const T v : *node.value) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument(std::string(op) + ": non-finite input value");
  }
  node.finite_checked = true;
}

template <typename T>
bool tracked(const TensorT<T>& t) {
  return !NoGradGuard::active() && t.node()->requires_grad;
}

template <typename T>
TensorT<T> wrap_output(Shape shape, std::vector<T> data) {
  return TensorT<T>(make_node(std::move(shape), std::move(data)));
}

template <typename T, class Fn>
void attach(TensorT<T>& out, std::vector<TensorT<T>> parents, Fn fn) {
  bool any = false;
  for (const auto& p : parents) any = any || tracked(p);
  if (!any) return;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents = std::move(parents);
  node.backward_fn = std::move(fn);
}

// ---------- broadcasting ----------

struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;
  int64_t n = 0;
  bool same = false;
};

std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    st[static_cast<size_t>(d)] = acc;
    acc *= s[static_cast<size_t>(d)];
  }
  return st;
}

BroadcastPlan make_broadcast_plan(const char* op, const Shape& a,
                                  const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.n = numel(a);
    p.same = true;
    return p;
  }
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int rank = std::max(ra, rb);
  p.out.resize(static_cast<size_t>(rank));
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  p.stride_a.assign(static_cast<size_t>(rank), 0);
  p.stride_b.assign(static_cast<size_t>(rank), 0);
  for (int d = 0; d < rank; ++d) {
    const int da = d - (rank - ra), db = d - (rank - rb);
    const int64_t la = da >= 0 ? a[static_cast<size_t>(da)] : 1;
    const int64_t lb = db >= 0 ? b[static_cast<size_t>(db)] : 1;
    if (la != lb && la != 1 && lb != 1)
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  format_shape(a) + " vs " + format_shape(b));
    p.out[static_cast<size_t>(d)] = std::max(la, lb);
    if (da >= 0 && la != 1) p.stride_a[static_cast<size_t>(d)] = sa[static_cast<size_t>(da)];
    if (db >= 0 && lb != 1) p.stride_b[static_cast<size_t>(d)] = sb[static_cast<size_t>(db)];
  }
  p.n = numel(p.out);
  return p;
}

template <class Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn fn) {
  if (p.same) {
    for (int64_t i = 0; i < p.n; ++i) fn(i, i, i);
    return;
  }
  const int rank = static_cast<int>(p.out.size());
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t ai = 0, bi = 0;
  for (int64_t oi = 0; oi < p.n; ++oi) {
    fn(oi, ai, bi);
    for (int d = rank - 1; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      ai += p.stride_a[du];
      bi += p.stride_b[du];
      if (idx[du] < p.out[du]) break;
      idx[du] = 0;
      ai -= p.stride_a[du] * p.out[du];
      bi -= p.stride_b[du] * p.out[du];
    }
  }
}

template <typename T, class F, class DFA, class DFB>
TensorT<T> binary_op(const char* op, const TensorT<T>& a, const TensorT<T>& b,
                     F f, DFA dfa, DFB dfb) {
  check_defined(op, a);
  check_defined(op, b);
  check_finite(op, a);
  check_finite(op, b);
  auto plan = make_broadcast_plan(op, a.shape(), b.shape());
  std::vector<T> out(static_cast<size_t>(plan.n));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for_each_broadcast(plan, [&](int64_t oi, int64_t ai, int64_t bi) {
    out[static_cast<size_t>(oi)] = f(av[ai], bv[bi]);
  });
  TensorT<T> result = wrap_output(plan.out, std::move(out));
  attach(result, {a, b}, [plan, a, b, dfa, dfb](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    const bool wa = a.node()->requires_grad;
    const bool wb = b.node()->requires_grad;
    if (wa) a.node()->ensure_grad();
    if (wb) b.node()->ensure_grad();
    T* ga = wa ? a.node()->grad.data() : nullptr;
    T* gb = wb ? b.node()->grad.data() : nullptr;
    for_each_broadcast(plan, [&](int64_t oi, int64_t ai, int64_t bi) {
      const T gv = g[oi];
      if (ga) ga[ai] += gv * dfa(av[ai], bv[bi]);
      if (gb) gb[bi] += gv * dfb(av[ai], bv[bi]);
    });
  });
  return result;
}

template <typename T, class F, class DF>
TensorT<T> unary_op(const char* op, const TensorT<T>& a, F f, DF df) {
  check_defined(op, a);
  check_finite(op, a);
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  TensorT<T> result = wrap_output(a.shape(), std::move(out));
  attach(result, {a}, [a, df](Node<T>& self) {
    a.node()->ensure_grad();
    T* ga = a.node()->grad.data();
    const T* g = self.grad.data();
    const T* av = a.data().data();
    const T* yv = self.value->data();
    const int64_t n = self.size();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * df(av[i], yv[i]);
  });
  return result;
}

// ---------- gemm ----------

void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const float* a,
          int64_t lda, const float* b, int64_t ldb, float beta, float* c,
          int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0f, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

// f64 path is test-only; plain ordered loops keep it bit-reproducible and
// identical to the naive oracles.
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a,
          int64_t lda, const double* b, int64_t ldb, double beta, double* c,
          int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        const double va = ta ? a[p * lda + i] : a[i * lda + p];
        const double vb = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += va * vb;
      }
      c[i * ldc + j] = beta == 0.0 ? acc : beta * c[i * ldc + j] + acc;
    }
  }
}

// ---------- im2col ----------

template <typename T>
void im2col(const T* img, int64_t C, int64_t H, int64_t W, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t OH, int64_t OW,
            T* col) {
  const int64_t ohw = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        T* dst = col + ((c * kh + i) * kw + j) * ohw;
        for (int64_t oy = 0; oy < OH; ++oy) {
          const int64_t y = oy * stride - pad + i;
          if (y < 0 || y >= H) {
            std::fill(dst, dst + OW, T(0));
            dst += OW;
            continue;
          }
          const T* src = img + (c * H + y) * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t x = ox * stride - pad + j;
            *dst++ = (x >= 0 && x < W) ? src[x] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t OH, int64_t OW,
                T* img) {
  const int64_t ohw = OH * OW;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const T* src = col + ((c * kh + i) * kw + j) * ohw;
        for (int64_t oy = 0; oy < OH; ++oy, src += OW) {
          const int64_t y = oy * stride - pad + i;
          if (y < 0 || y >= H) continue;
          T* dst = img + (c * H + y) * W;
          for (int64_t ox = 0; ox < OW; ++ox) {
            const int64_t x = ox * stride - pad + j;
            if (x >= 0 && x < W) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

std::vector<int> normalize_axes(const char* op, std::vector<int> axes,
                                int rank) {
  for (int& a : axes) {
    if (a < 0) a += rank;
    if (a < 0 || a >= rank)
      throw std::invalid_argument(std::string(op) + ": axis out of range");
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  return axes;
}

}  // namespace

// ---------- TensorT members ----------

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  const auto n = static_cast<size_t>(numel(shape));
  return TensorT(make_node(std::move(shape), std::vector<T>(n, T(0))));
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  const auto n = static_cast<size_t>(numel(shape));
  return TensorT(make_node(std::move(shape), std::vector<T>(n, value)));
}

template <typename T>
TensorT<T> TensorT<T>::from_data(Shape shape, std::vector<T> data) {
  return TensorT(make_node(std::move(shape), std::move(data)));
}

template <typename T>
TensorT<T> TensorT<T>::randn(Shape shape, Rng& rng) {
  std::vector<T> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.normal());
  return TensorT(make_node(std::move(shape), std::move(d)));
}

template <typename T>
TensorT<T> TensorT<T>::uniform(Shape shape, Rng& rng, T lo, T hi) {
  std::vector<T> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
  return TensorT(make_node(std::move(shape), std::move(d)));
}

template <typename T>
const Shape& TensorT<T>::shape() const {
  check_defined("shape", *this);
  return node_->shape;
}

template <typename T>
int64_t TensorT<T>::size() const {
  check_defined("size", *this);
  return node_->size();
}

template <typename T>
int64_t TensorT<T>::dim(int axis) const {
  const auto& s = shape();
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("dim: axis out of range for " + format_shape(s));
  return s[static_cast<size_t>(axis)];
}

template <typename T>
int TensorT<T>::rank() const {
  return static_cast<int>(shape().size());
}

template <typename T>
std::span<const T> TensorT<T>::data() const {
  check_defined("data", *this);
  return {node_->value->data(), node_->value->size()};
}

template <typename T>
std::span<T> TensorT<T>::raw() {
  check_defined("raw", *this);
  node_->finite_checked = false;
  return {node_->value->data(), node_->value->size()};
}

template <typename T>
T TensorT<T>::item() const {
  if (size() != 1)
    throw std::invalid_argument("item: tensor " + format_shape(shape()) +
                                " is not scalar");
  return (*node_->value)[0];
}

template <typename T>
bool TensorT<T>::requires_grad() const {
  check_defined("requires_grad", *this);
  return node_->requires_grad;
}

template <typename T>
TensorT<T>& TensorT<T>::set_requires_grad(bool flag) {
  check_defined("set_requires_grad", *this);
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
bool TensorT<T>::has_grad() const {
  check_defined("has_grad", *this);
  return !node_->grad.empty();
}

template <typename T>
TensorT<T> TensorT<T>::grad() const {
  check_defined("grad", *this);
  if (node_->grad.empty()) return zeros(node_->shape);
  return from_data(node_->shape, node_->grad);
}

template <typename T>
std::span<const T> TensorT<T>::grad_data() const {
  check_defined("grad_data", *this);
  node_->ensure_grad();
  return {node_->grad.data(), node_->grad.size()};
}

template <typename T>
void TensorT<T>::zero_grad() {
  check_defined("zero_grad", *this);
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void TensorT<T>::accumulate_grad(std::span<const T> values) {
  check_defined("accumulate_grad", *this);
  if (static_cast<int64_t>(values.size()) != size())
    throw std::invalid_argument("accumulate_grad: size mismatch");
  node_->ensure_grad();
  for (size_t i = 0; i < values.size(); ++i) node_->grad[i] += values[i];
}

template <typename T>
TensorT<T> TensorT<T>::detach() const {
  check_defined("detach", *this);
  auto n = std::make_shared<Node<T>>();
  n->shape = node_->shape;
  n->value = node_->value;  // shares the buffer
  n->finite_checked = node_->finite_checked;
  return TensorT(std::move(n));
}

template <typename T>
TensorT<T> TensorT<T>::clone() const {
  check_defined("clone", *this);
  return from_data(node_->shape, *node_->value);
}

// ---------- elementwise ----------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, T scalar) {
  return unary_op<T>(
      "add_scalar", a, [scalar](T x) { return x + scalar; },
      [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, T scalar) {
  return unary_op<T>(
      "mul_scalar", a, [scalar](T x) { return x * scalar; },
      [scalar](T, T) { return scalar; });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  return mul(a, T(-1));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  return unary_op<T>(
      "sigmoid", a,
      [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
  return unary_op<T>(
      "silu", a,
      [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& a) {
  return unary_op<T>(
      "tanh", a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
  return unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); },
      [](T, T y) { return y; });
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
  return unary_op<T>(
      "log", a, [](T x) { return std::log(x); },
      [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorT<T> sqrt(const TensorT<T>& a) {
  return unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(1) / (T(2) * y); });
}

// ---------- matmul ----------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  check_defined("matmul", a);
  check_defined("matmul", b);
  check_finite("matmul", a);
  check_finite("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " +
                                format_shape(a.shape()) + " vs " +
                                format_shape(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  gemm(false, false, m, n, k, a.data().data(), k, b.data().data(), n, T(0),
       out.data(), n);
  TensorT<T> result = wrap_output({m, n}, std::move(out));
  attach(result, {a, b}, [a, b, m, k, n](Node<T>& self) {
    const T* g = self.grad.data();
    if (a.node()->requires_grad) {
      a.node()->ensure_grad();
      gemm(false, true, m, k, n, g, n, b.data().data(), n, T(1),
           a.node()->grad.data(), k);
    }
    if (b.node()->requires_grad) {
      b.node()->ensure_grad();
      gemm(true, false, k, n, m, a.data().data(), k, g, n, T(1),
           b.node()->grad.data(), n);
    }
  });
  return result;
}

// ---------- conv2d ----------

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int stride,
                  int pad) {
  check_defined("conv2d", x);
  check_defined("conv2d", w);
  check_finite("conv2d", x);
  check_finite("conv2d", w);
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv2d: shape mismatch input " +
                                format_shape(x.shape()) + " vs kernel " +
                                format_shape(w.shape()));
  if (stride < 1 || pad < 0)
    throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel " + format_shape(w.shape()) +
                                " larger than padded input " +
                                format_shape(x.shape()));
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  const int64_t K = C * kh * kw, OHW = OH * OW;

  std::vector<T> out(static_cast<size_t>(N * O * OHW));
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  if constexpr (std::is_same_v<T, float>) {
    std::vector<T> col(static_cast<size_t>(K * OHW));
    for (int64_t n = 0; n < N; ++n) {
      im2col(xv + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
             col.data());
      gemm(false, false, O, OHW, K, wv, K, col.data(), OHW, T(0),
           out.data() + n * O * OHW, OHW);
    }
  } else {
    // direct loop, ascending (c, i, j): matches the sliding-window oracle
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t o = 0; o < O; ++o) {
        for (int64_t oy = 0; oy < OH; ++oy) {
          for (int64_t ox = 0; ox < OW; ++ox) {
            T acc = T(0);
            for (int64_t c = 0; c < C; ++c) {
              for (int64_t i = 0; i < kh; ++i) {
                const int64_t y = oy * stride - pad + i;
                if (y < 0 || y >= H) continue;
                for (int64_t j = 0; j < kw; ++j) {
                  const int64_t xx = ox * stride - pad + j;
                  if (xx < 0 || xx >= W) continue;
                  acc += xv[((n * C + c) * H + y) * W + xx] *
                         wv[((o * C + c) * kh + i) * kw + j];
                }
              }
            }
            out[static_cast<size_t>(((n * O + o) * OH + oy) * OW + ox)] = acc;
          }
        }
      }
    }
  }
  TensorT<T> result = wrap_output({N, O, OH, OW}, std::move(out));
  attach(result, {x, w},
         [x, w, stride, pad, N, C, H, W, O, kh, kw, OH, OW, K,
          OHW](Node<T>& self) {
           const T* g = self.grad.data();
           const T* xv = x.data().data();
           const T* wv = w.data().data();
           const bool wx = x.node()->requires_grad;
           const bool ww = w.node()->requires_grad;
           if (wx) x.node()->ensure_grad();
           if (ww) w.node()->ensure_grad();
           T* gx = wx ? x.node()->grad.data() : nullptr;
           T* gw = ww ? w.node()->grad.data() : nullptr;
           if constexpr (std::is_same_v<T, float>) {
             std::vector<T> col(static_cast<size_t>(K * OHW));
             std::vector<T> dcol(static_cast<size_t>(K * OHW));
             for (int64_t n = 0; n < N; ++n) {
               const T* gn = g + n * O * OHW;
               if (ww) {
                 im2col(xv + n * C * H * W, C, H, W, kh, kw, stride, pad, OH,
                        OW, col.data());
                 gemm(false, true, O, K, OHW, gn, OHW, col.data(), OHW, T(1),
                      gw, K);
               }
               if (wx) {
                 gemm(true, false, K, OHW, O, wv, K, gn, OHW, T(0), dcol.data(),
                      OHW);
                 col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                            gx + n * C * H * W);
               }
             }
           } else {
             for (int64_t n = 0; n < N; ++n) {
               for (int64_t o = 0; o < O; ++o) {
                 for (int64_t oy = 0; oy < OH; ++oy) {
                   for (int64_t ox = 0; ox < OW; ++ox) {
                     const T gv =
                         g[((n * O + o) * OH + oy) * OW + ox];
                     for (int64_t c = 0; c < C; ++c) {
                       for (int64_t i = 0; i < kh; ++i) {
                         const int64_t y = oy * stride - pad + i;
                         if (y < 0 || y >= H) continue;
                         for (int64_t j = 0; j < kw; ++j) {
                           const int64_t xx = ox * stride - pad + j;
                           if (xx < 0 || xx >= W) continue;
                           const int64_t xi = ((n * C + c) * H + y) * W + xx;
                           const int64_t wi = ((o * C + c) * kh + i) * kw + j;
                           if (gx) gx[xi] += gv * wv[wi];
                           if (gw) gw[wi] += gv * xv[xi];
                         }
                       }
                     }
                   }
                 }
               }
             }
           }
         });
  return result;
}

// ---------- pooling / upsample ----------

template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k, int stride) {
  check_defined("avg_pool2d", x);
  check_finite("avg_pool2d", x);
  if (stride <= 0) stride = k;
  if (x.rank() != 4 || k < 1 || x.dim(2) < k || x.dim(3) < k)
    throw std::invalid_argument("avg_pool2d: bad window " + std::to_string(k) +
                                " for input " + format_shape(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
  std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
  const T* xv = x.data().data();
  const T inv = T(1) / static_cast<T>(k * k);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* img = xv + nc * H * W;
    T* dst = out.data() + nc * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        T acc = T(0);
        for (int64_t i = 0; i < k; ++i)
          for (int64_t j = 0; j < k; ++j)
            acc += img[(oy * stride + i) * W + ox * stride + j];
        dst[oy * OW + ox] = acc * inv;
      }
  }
  TensorT<T> result = wrap_output({N, C, OH, OW}, std::move(out));
  attach(result, {x}, [x, k, stride, N, C, H, W, OH, OW](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    const T inv = T(1) / static_cast<T>(k * k);
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* dst = gx + nc * H * W;
      const T* gsrc = g + nc * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          const T gv = gsrc[oy * OW + ox] * inv;
          for (int64_t i = 0; i < k; ++i)
            for (int64_t j = 0; j < k; ++j)
              dst[(oy * stride + i) * W + ox * stride + j] += gv;
        }
    }
  });
  return result;
}

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k, int stride) {
  check_defined("max_pool2d", x);
  check_finite("max_pool2d", x);
  if (stride <= 0) stride = k;
  if (x.rank() != 4 || k < 1 || x.dim(2) < k || x.dim(3) < k)
    throw std::invalid_argument("max_pool2d: bad window " + std::to_string(k) +
                                " for input " + format_shape(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
  std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const T* xv = x.data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* img = xv + nc * H * W;
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        int64_t bi = 0;
        for (int64_t i = 0; i < k; ++i)
          for (int64_t j = 0; j < k; ++j) {
            const int64_t p = (oy * stride + i) * W + ox * stride + j;
            if (img[p] > best) {
              best = img[p];
              bi = p;
            }
          }
        const auto oidx = static_cast<size_t>((nc * OH + oy) * OW + ox);
        out[oidx] = best;
        (*argmax)[oidx] = nc * H * W + bi;
      }
  }
  TensorT<T> result = wrap_output({N, C, OH, OW}, std::move(out));
  attach(result, {x}, [x, argmax](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    for (size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += g[i];
  });
  return result;
}

template <typename T>
TensorT<T> upsample_nearest2d(const TensorT<T>& x, int factor) {
  check_defined("upsample_nearest2d", x);
  check_finite("upsample_nearest2d", x);
  if (x.rank() != 4 || factor < 1)
    throw std::invalid_argument("upsample_nearest2d: need NCHW input, factor >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = H * factor, OW = W * factor;
  std::vector<T> out(static_cast<size_t>(N * C * OH * OW));
  const T* xv = x.data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* img = xv + nc * H * W;
    T* dst = out.data() + nc * OH * OW;
    for (int64_t y = 0; y < OH; ++y) {
      const T* row = img + (y / factor) * W;
      for (int64_t xq = 0; xq < OW; ++xq) dst[y * OW + xq] = row[xq / factor];
    }
  }
  TensorT<T> result = wrap_output({N, C, OH, OW}, std::move(out));
  attach(result, {x}, [x, factor, N, C, H, W, OH, OW](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* dst = gx + nc * H * W;
      const T* gs = g + nc * OH * OW;
      for (int64_t y = 0; y < OH; ++y)
        for (int64_t xq = 0; xq < OW; ++xq)
          dst[(y / factor) * W + xq / factor] += gs[y * OW + xq];
    }
  });
  return result;
}

// ---------- shape ops ----------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  check_defined("reshape", x);
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " +
                                format_shape(x.shape()) + " as " +
                                format_shape(shape));
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = x.node()->value;  // zero-copy view
  n->finite_checked = x.node()->finite_checked;
  TensorT<T> result(std::move(n));
  attach(result, {x}, [x](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    const int64_t n = self.size();
    for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
  });
  return result;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int64_t start, int64_t len) {
  check_defined("slice", x);
  const auto& s = x.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument("slice: axis out of range for " +
                                format_shape(s));
  const int64_t d = s[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > d)
    throw std::invalid_argument("slice: range [" + std::to_string(start) +
                                ", " + std::to_string(start + len) +
                                ") exceeds axis of size " + std::to_string(d));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s[static_cast<size_t>(i)];
  Shape oshape = s;
  oshape[static_cast<size_t>(axis)] = len;
  std::vector<T> out(static_cast<size_t>(outer * len * inner));
  const T* xv = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner,
                xv + (o * d + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  TensorT<T> result = wrap_output(std::move(oshape), std::move(out));
  attach(result, {x}, [x, outer, inner, d, start, len](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      T* dst = gx + (o * d + start) * inner;
      const T* src = g + o * len * inner;
      for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  });
  return result;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  for (const auto& p : parts) {
    check_defined("concat", p);
    check_finite("concat", p);
  }
  const auto& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument("concat: axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (static_cast<int>(s.size()) != rank)
      throw std::invalid_argument("concat: rank mismatch " + format_shape(s0) +
                                  " vs " + format_shape(s));
    for (int i = 0; i < rank; ++i)
      if (i != axis && s[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch " +
                                    format_shape(s0) + " vs " +
                                    format_shape(s));
    total += s[static_cast<size_t>(axis)];
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s0[static_cast<size_t>(i)];
  Shape oshape = s0;
  oshape[static_cast<size_t>(axis)] = total;
  std::vector<T> out(static_cast<size_t>(outer * total * inner));
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t len = p.shape()[static_cast<size_t>(axis)];
    const T* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total + offset) * inner,
                  src + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(T));
    offset += len;
  }
  TensorT<T> result = wrap_output(std::move(oshape), std::move(out));
  attach(result, parts, [parts, axis, outer, inner, total](Node<T>& self) {
    const T* g = self.grad.data();
    int64_t offset = 0;
    for (const auto& p : parts) {
      const int64_t len = p.shape()[static_cast<size_t>(axis)];
      if (p.node()->requires_grad) {
        p.node()->ensure_grad();
        T* gp = p.node()->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = g + (o * total + offset) * inner;
          T* dst = gp + o * len * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      }
      offset += len;
    }
  });
  return result;
}

// ---------- reductions ----------

namespace {

// Iterates input linearly, yielding the mapped output offset.
template <typename T, class Fn>
void for_each_reduced(const Shape& in, const std::vector<int>& axes, Fn fn) {
  const int rank = static_cast<int>(in.size());
  std::vector<bool> reduced(static_cast<size_t>(rank), false);
  for (int a : axes) reduced[static_cast<size_t>(a)] = true;
  // output strides per input dim (0 on reduced dims)
  std::vector<int64_t> ostride(static_cast<size_t>(rank), 0);
  int64_t acc = 1;
  for (int d = rank - 1; d >= 0; --d) {
    const auto du = static_cast<size_t>(d);
    if (!reduced[du]) {
      ostride[du] = acc;
      acc *= in[du];
    }
  }
  const int64_t n = numel(in);
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t oi = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, oi);
    for (int d = rank - 1; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      oi += ostride[du];
      if (idx[du] < in[du]) break;
      idx[du] = 0;
      oi -= ostride[du] * in[du];
    }
  }
}

template <typename T>
TensorT<T> reduce_impl(const char* op, const TensorT<T>& x,
                       std::vector<int> axes, bool keepdims, bool take_mean) {
  check_defined(op, x);
  check_finite(op, x);
  const auto& s = x.shape();
  const int rank = static_cast<int>(s.size());
  axes = normalize_axes(op, std::move(axes), rank);
  if (axes.empty()) {
    axes.resize(static_cast<size_t>(rank));
    std::iota(axes.begin(), axes.end(), 0);
  }
  Shape oshape;
  for (int d = 0; d < rank; ++d) {
    const bool red =
        std::find(axes.begin(), axes.end(), d) != axes.end();
    if (!red)
      oshape.push_back(s[static_cast<size_t>(d)]);
    else if (keepdims)
      oshape.push_back(1);
  }
  int64_t count = 1;
  for (int a : axes) count *= s[static_cast<size_t>(a)];
  std::vector<T> out(static_cast<size_t>(numel(oshape)), T(0));
  const T* xv = x.data().data();
  for_each_reduced<T>(s, axes, [&](int64_t i, int64_t oi) {
    out[static_cast<size_t>(oi)] += xv[i];
  });
  if (take_mean) {
    const T inv = T(1) / static_cast<T>(count);
    for (auto& v : out) v *= inv;
  }
  TensorT<T> result = wrap_output(std::move(oshape), std::move(out));
  const T scale = take_mean ? T(1) / static_cast<T>(count) : T(1);
  attach(result, {x}, [x, axes, scale](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    for_each_reduced<T>(x.shape(), axes, [&](int64_t i, int64_t oi) {
      gx[i] += g[oi] * scale;
    });
  });
  return result;
}

}  // namespace

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  return reduce_impl<T>("sum", x, {}, false, false);
}

template <typename T>
TensorT<T> sum(const TensorT<T>& x, std::vector<int> axes, bool keepdims) {
  return reduce_impl<T>("sum", x, std::move(axes), keepdims, false);
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  return reduce_impl<T>("mean", x, {}, false, true);
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x, std::vector<int> axes, bool keepdims) {
  return reduce_impl<T>("mean", x, std::move(axes), keepdims, true);
}

// ---------- softmax family ----------

namespace {

struct AxisRows {
  int64_t outer, len, inner;
};

AxisRows axis_rows(const char* op, const Shape& s, int axis) {
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument(std::string(op) + ": axis out of range for " +
                                format_shape(s));
  AxisRows r{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) r.inner *= s[static_cast<size_t>(i)];
  return r;
}

}  // namespace

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  check_defined("softmax", x);
  check_finite("softmax", x);
  const auto r = axis_rows("softmax", x.shape(), axis);
  std::vector<T> out(static_cast<size_t>(x.size()));
  const T* xv = x.data().data();
  for (int64_t o = 0; o < r.outer; ++o)
    for (int64_t in = 0; in < r.inner; ++in) {
      const int64_t base = o * r.len * r.inner + in;
      T m = xv[base];
      for (int64_t t = 1; t < r.len; ++t)
        m = std::max(m, xv[base + t * r.inner]);
      T z = T(0);
      for (int64_t t = 0; t < r.len; ++t) {
        const T e = std::exp(xv[base + t * r.inner] - m);
        out[static_cast<size_t>(base + t * r.inner)] = e;
        z += e;
      }
      for (int64_t t = 0; t < r.len; ++t)
        out[static_cast<size_t>(base + t * r.inner)] /= z;
    }
  TensorT<T> result = wrap_output(x.shape(), std::move(out));
  attach(result, {x}, [x, r](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    const T* y = self.value->data();
    for (int64_t o = 0; o < r.outer; ++o)
      for (int64_t in = 0; in < r.inner; ++in) {
        const int64_t base = o * r.len * r.inner + in;
        T dot = T(0);
        for (int64_t t = 0; t < r.len; ++t) {
          const int64_t p = base + t * r.inner;
          dot += g[p] * y[p];
        }
        for (int64_t t = 0; t < r.len; ++t) {
          const int64_t p = base + t * r.inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
  });
  return result;
}

template <typename T>
TensorT<T> log_softmax(const TensorT<T>& x, int axis) {
  check_defined("log_softmax", x);
  check_finite("log_softmax", x);
  const auto r = axis_rows("log_softmax", x.shape(), axis);
  std::vector<T> out(static_cast<size_t>(x.size()));
  const T* xv = x.data().data();
  for (int64_t o = 0; o < r.outer; ++o)
    for (int64_t in = 0; in < r.inner; ++in) {
      const int64_t base = o * r.len * r.inner + in;
      T m = xv[base];
      for (int64_t t = 1; t < r.len; ++t)
        m = std::max(m, xv[base + t * r.inner]);
      T z = T(0);
      for (int64_t t = 0; t < r.len; ++t)
        z += std::exp(xv[base + t * r.inner] - m);
      const T lse = m + std::log(z);
      for (int64_t t = 0; t < r.len; ++t)
        out[static_cast<size_t>(base + t * r.inner)] =
            xv[base + t * r.inner] - lse;
    }
  TensorT<T> result = wrap_output(x.shape(), std::move(out));
  attach(result, {x}, [x, r](Node<T>& self) {
    x.node()->ensure_grad();
    T* gx = x.node()->grad.data();
    const T* g = self.grad.data();
    const T* y = self.value->data();
    for (int64_t o = 0; o < r.outer; ++o)
      for (int64_t in = 0; in < r.inner; ++in) {
        const int64_t base = o * r.len * r.inner + in;
        T gsum = T(0);
        for (int64_t t = 0; t < r.len; ++t) gsum += g[base + t * r.inner];
        for (int64_t t = 0; t < r.len; ++t) {
          const int64_t p = base + t * r.inner;
          gx[p] += g[p] - std::exp(y[p]) * gsum;
        }
      }
  });
  return result;
}

// ---------- fused losses ----------

namespace {

template <typename T>
void check_logit_rows(const char* op, const TensorT<T>& logits,
                      std::span<const int> labels, int64_t min_classes) {
  check_defined(op, logits);
  check_finite(op, logits);
  if (logits.rank() != 2)
    throw std::invalid_argument(std::string(op) + ": logits must be [B, K], got " +
                                format_shape(logits.shape()));
  const int64_t B = logits.dim(0), K = logits.dim(1);
  if (K < min_classes)
    throw std::invalid_argument(std::string(op) + ": needs >= " +
                                std::to_string(min_classes) + " classes, got " +
                                std::to_string(K));
  if (static_cast<int64_t>(labels.size()) != B)
    throw std::invalid_argument(std::string(op) + ": batch " + std::to_string(B) +
                                " vs " + std::to_string(labels.size()) +
                                " labels");
  for (int64_t b = 0; b < B; ++b)
    if (labels[static_cast<size_t>(b)] < 0 ||
        labels[static_cast<size_t>(b)] >= K)
      throw std::invalid_argument(std::string(op) + ": label out of range at row " +
                                  std::to_string(b));
}

}  // namespace

template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::span<const int> labels) {
  check_logit_rows("cross_entropy", logits, labels, 2);
  const int64_t B = logits.dim(0), K = logits.dim(1);
  const T* z = logits.data().data();
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(B * K));
  T loss = T(0);
  for (int64_t b = 0; b < B; ++b) {
    const T* row = z + b * K;
    T m = row[0];
    for (int64_t i = 1; i < K; ++i) m = std::max(m, row[i]);
    T zsum = T(0);
    for (int64_t i = 0; i < K; ++i) {
      const T e = std::exp(row[i] - m);
      (*probs)[static_cast<size_t>(b * K + i)] = e;
      zsum += e;
    }
    for (int64_t i = 0; i < K; ++i)
      (*probs)[static_cast<size_t>(b * K + i)] /= zsum;
    loss += m + std::log(zsum) - row[labels[static_cast<size_t>(b)]];
  }
  loss /= static_cast<T>(B);
  std::vector<int> ycopy(labels.begin(), labels.end());
  TensorT<T> result = wrap_output(Shape{}, std::vector<T>{loss});
  attach(result, {logits}, [logits, probs, ycopy, B, K](Node<T>& self) {
    logits.node()->ensure_grad();
    T* gz = logits.node()->grad.data();
    const T g = self.grad[0] / static_cast<T>(B);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t i = 0; i < K; ++i)
        gz[b * K + i] += g * (*probs)[static_cast<size_t>(b * K + i)];
      gz[b * K + ycopy[static_cast<size_t>(b)]] -= g;
    }
  });
  return result;
}

template <typename T>
TensorT<T> bce_with_logits(const TensorT<T>& logits, std::span<const T> targets) {
  check_defined("bce_with_logits", logits);
  check_finite("bce_with_logits", logits);
  if (!(logits.rank() == 1 || (logits.rank() == 2 && logits.dim(1) == 1)))
    throw std::invalid_argument("bce_with_logits: logits must be [B] or [B,1], got " +
                                format_shape(logits.shape()));
  const int64_t B = logits.dim(0);
  if (static_cast<int64_t>(targets.size()) != B)
    throw std::invalid_argument("bce_with_logits: batch " + std::to_string(B) +
                                " vs " + std::to_string(targets.size()) +
                                " targets");
  const T* z = logits.data().data();
  T loss = T(0);
  for (int64_t b = 0; b < B; ++b) {
    const T zb = z[b], t = targets[static_cast<size_t>(b)];
    loss += std::max(zb, T(0)) - zb * t + std::log1p(std::exp(-std::abs(zb)));
  }
  loss /= static_cast<T>(B);
  std::vector<T> tcopy(targets.begin(), targets.end());
  TensorT<T> result = wrap_output(Shape{}, std::vector<T>{loss});
  attach(result, {logits}, [logits, tcopy, B](Node<T>& self) {
    logits.node()->ensure_grad();
    T* gz = logits.node()->grad.data();
    const T* z = logits.data().data();
    const T g = self.grad[0] / static_cast<T>(B);
    for (int64_t b = 0; b < B; ++b) {
      const T s = T(1) / (T(1) + std::exp(-z[b]));
      gz[b] += g * (s - tcopy[static_cast<size_t>(b)]);
    }
  });
  return result;
}

template <typename T>
TensorT<T> margin_loss(const TensorT<T>& logits, std::span<const int> labels) {
  check_logit_rows("margin_loss", logits, labels, 2);
  const int64_t B = logits.dim(0), K = logits.dim(1);
  const T* z = logits.data().data();
  auto runner_up = std::make_shared<std::vector<int>>(static_cast<size_t>(B));
  std::vector<T> out(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    const T* row = z + b * K;
    int m = y == 0 ? 1 : 0;
    for (int64_t i = 0; i < K; ++i)
      if (i != y && row[i] > row[m]) m = static_cast<int>(i);
    (*runner_up)[static_cast<size_t>(b)] = m;
    out[static_cast<size_t>(b)] = row[y] - row[m];
  }
  std::vector<int> ycopy(labels.begin(), labels.end());
  TensorT<T> result = wrap_output({B}, std::move(out));
  attach(result, {logits}, [logits, runner_up, ycopy, K](Node<T>& self) {
    logits.node()->ensure_grad();
    T* gz = logits.node()->grad.data();
    const T* g = self.grad.data();
    const int64_t B = static_cast<int64_t>(ycopy.size());
    for (int64_t b = 0; b < B; ++b) {
      gz[b * K + ycopy[static_cast<size_t>(b)]] += g[b];
      gz[b * K + (*runner_up)[static_cast<size_t>(b)]] -= g[b];
    }
  });
  return result;
}

template <typename T>
TensorT<T> dlr_loss(const TensorT<T>& logits, std::span<const int> labels) {
  check_logit_rows("dlr_loss", logits, labels, 3);
  const int64_t B = logits.dim(0), K = logits.dim(1);
  const T* z = logits.data().data();
  struct RowCtx {
    int y, m, p1, p3;
    T num, den;
  };
  auto ctx = std::make_shared<std::vector<RowCtx>>(static_cast<size_t>(B));
  std::vector<T> out(static_cast<size_t>(B));
  std::vector<int> order(static_cast<size_t>(K));
  for (int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    const T* row = z + b * K;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [row](int i, int j) {
      return row[i] != row[j] ? row[i] > row[j] : i < j;
    });
    const int p1 = order[0], p3 = order[2];
    const T den = row[p1] - row[p3];
    if (den == T(0))
      throw std::invalid_argument(
          "dlr_loss: degenerate logits (z_pi1 == z_pi3) at row " +
          std::to_string(b));
    int m = y == 0 ? 1 : 0;
    for (int64_t i = 0; i < K; ++i)
      if (i != y && row[i] > row[m]) m = static_cast<int>(i);
    const T num = row[y] - row[m];
    (*ctx)[static_cast<size_t>(b)] = {y, m, p1, p3, num, den};
    out[static_cast<size_t>(b)] = num / den;
  }
  TensorT<T> result = wrap_output({B}, std::move(out));
  attach(result, {logits}, [logits, ctx, K](Node<T>& self) {
    logits.node()->ensure_grad();
    T* gz = logits.node()->grad.data();
    const T* g = self.grad.data();
    const int64_t B = static_cast<int64_t>(ctx->size());
    for (int64_t b = 0; b < B; ++b) {
      const auto& c = (*ctx)[static_cast<size_t>(b)];
      const T gb = g[b];
      gz[b * K + c.y] += gb / c.den;
      gz[b * K + c.m] -= gb / c.den;
      gz[b * K + c.p1] -= gb * c.num / (c.den * c.den);
      gz[b * K + c.p3] += gb * c.num / (c.den * c.den);
    }
  });
  return result;
}

double bce_reference(std::span<const double> probs,
                     std::span<const double> targets) {
  if (probs.size() != targets.size())
    throw std::invalid_argument("bce_reference: size mismatch");
  double loss = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i], t = targets[i];
    const double a = t > 0.0 ? t * std::log(p) : 0.0;
    const double b = t < 1.0 ? (1.0 - t) * std::log(1.0 - p) : 0.0;
    loss -= a + b;
  }
  return loss;
}

// ---------- backward ----------

template <typename T>
void backward(const TensorT<T>& loss) {
  check_defined("backward", loss);
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                format_shape(loss.shape()));
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw std::invalid_argument("backward: loss is non-finite");

  // iterative post-order DFS
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<T>* p = f.node->parents[f.next_parent++].node().get();
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  // fresh interior gradients for this sweep; leaf grads accumulate across
  // sweeps until the caller zeroes them
  for (Node<T>* n : order)
    if (n->backward_fn && n != loss.node().get())
      std::fill(n->grad.begin(), n->grad.end(), T(0));
  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------- explicit instantiations ----------

#define ADFP_INSTANTIATE(T)                                                    \
  template class TensorT<T>;                                                   \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> add(const TensorT<T>&, T);                               \
  template TensorT<T> mul(const TensorT<T>&, T);                               \
  template TensorT<T> neg(const TensorT<T>&);                                  \
  template TensorT<T> relu(const TensorT<T>&);                                 \
  template TensorT<T> silu(const TensorT<T>&);                                 \
  template TensorT<T> sigmoid(const TensorT<T>&);                              \
  template TensorT<T> tanh(const TensorT<T>&);                                 \
  template TensorT<T> exp(const TensorT<T>&);                                  \
  template TensorT<T> log(const TensorT<T>&);                                  \
  template TensorT<T> sqrt(const TensorT<T>&);                                 \
  template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);            \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&, int, int);  \
  template TensorT<T> avg_pool2d(const TensorT<T>&, int, int);                 \
  template TensorT<T> max_pool2d(const TensorT<T>&, int, int);                 \
  template TensorT<T> upsample_nearest2d(const TensorT<T>&, int);              \
  template TensorT<T> reshape(const TensorT<T>&, Shape);                       \
  template TensorT<T> slice(const TensorT<T>&, int, int64_t, int64_t);         \
  template TensorT<T> concat(const std::vector<TensorT<T>>&, int);             \
  template TensorT<T> sum(const TensorT<T>&);                                  \
  template TensorT<T> sum(const TensorT<T>&, std::vector<int>, bool);          \
  template TensorT<T> mean(const TensorT<T>&);                                 \
  template TensorT<T> mean(const TensorT<T>&, std::vector<int>, bool);         \
  template TensorT<T> softmax(const TensorT<T>&, int);                         \
  template TensorT<T> log_softmax(const TensorT<T>&, int);                     \
  template TensorT<T> cross_entropy(const TensorT<T>&, std::span<const int>);  \
  template TensorT<T> bce_with_logits(const TensorT<T>&, std::span<const T>);  \
  template TensorT<T> margin_loss(const TensorT<T>&, std::span<const int>);    \
  template TensorT<T> dlr_loss(const TensorT<T>&, std::span<const int>);       \
  template void backward(const TensorT<T>&);

ADFP_INSTANTIATE(float)
ADFP_INSTANTIATE(double)

#undef ADFP_INSTANTIATE

}  // namespace adfp
