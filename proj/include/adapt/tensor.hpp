#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace adapt {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multiply-add accounting. Only the op classes below are billed; everything
// else (adds, elementwise products, reductions, data movement) bills zero.
// These constants are the contract shared with the analytic cost model;
// changing them is a versioned change.
// ---------------------------------------------------------------------------
namespace flop_cost {
constexpr unsigned long long kSoftmaxPerElem = 5;     // softmax / log-softmax
constexpr unsigned long long kNormPerElem = 8;        // layer norm / group norm, incl. affine
constexpr unsigned long long kActivationPerElem = 4;  // GELU / ELU

inline unsigned long long matmul(size_t m, size_t k, size_t n) {
  return 2ull * m * k * n;
}
}  // namespace flop_cost

struct FlopCounter {
  unsigned long long total = 0;
};

inline FlopCounter*& active_flop_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}

inline void count_flops(unsigned long long f) {
  if (FlopCounter* c = active_flop_counter()) c->total += f;
}

// Attaches a counter to all forward ops run on this thread while in scope.
struct FlopCounterScope {
  explicit FlopCounterScope(FlopCounter& c) : prev_(active_flop_counter()) {
    active_flop_counter() = &c;
  }
  ~FlopCounterScope() { active_flop_counter() = prev_; }
  FlopCounterScope(const FlopCounterScope&) = delete;
  FlopCounterScope& operator=(const FlopCounterScope&) = delete;

 private:
  FlopCounter* prev_;
};

inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables tape recording (inference / evaluation).
struct NoGradScope {
  NoGradScope() : prev_(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradScope() { grad_recording_flag() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor: shared node holding values, an optional gradient buffer, and the
// recorded parents + backward closure for reverse-mode replay. Values are
// immutable once created except for gradient accumulation and explicit
// optimizer updates on leaves.
// ---------------------------------------------------------------------------
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return full(std::move(shape), T(0));
  }

  static Tensor full(Shape shape, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from_values(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_to_string(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from_values({}, {v}); }

  static Tensor wrap(std::shared_ptr<TensorNode<T>> n) { return Tensor(std::move(n)); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  size_t rank() const { return n_->shape.size(); }
  size_t numel() const { return n_->value.size(); }
  size_t dim(size_t i) const { return n_->shape[i]; }

  const std::vector<T>& values() const { return n_->value; }
  // Leaf mutation hook for optimizers; never call on tensors inside a live graph.
  std::vector<T>& values_mut() { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (n_->grad.empty()) throw std::logic_error("Tensor::grad: no gradient accumulated");
    return n_->grad;
  }
  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), T(0)); }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return n_->value[0];
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}
  std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

// Builds a result node; parents and the backward closure are recorded only
// when the tape is live and some parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> parents,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_recording_flag()) {
    for (const auto& p : parents) needs = needs || p.node()->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::wrap(std::move(n));
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch (" + shape_to_string(a) +
                              " vs " + shape_to_string(b) + ")");
}

// Right-aligned broadcast result shape (numpy rules).
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    size_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    size_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `s` when broadcast against shape `out` (0 on broadcast axes).
inline std::vector<size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<size_t> st(out.size(), 0);
  size_t stride = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    size_t ax = s.size() - 1 - i;
    size_t oax = out.size() - 1 - i;
    st[oax] = (s[ax] == 1 && out[oax] != 1) ? 0 : stride;
    stride *= s[ax];
  }
  return st;
}

// Odometer walk over `out_shape`, yielding the linear offsets of both
// broadcast operands for every output element.
template <typename F>
void broadcast_walk(const Shape& out_shape, const std::vector<size_t>& sa,
                    const std::vector<size_t>& sb, F&& f) {
  const size_t total = shape_numel(out_shape);
  const size_t rank = out_shape.size();
  std::vector<size_t> idx(rank, 0);
  size_t ia = 0, ib = 0;
  for (size_t lin = 0; lin < total; ++lin) {
    f(lin, ia, ib);
    for (size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      idx[d] = 0;
      ia -= sa[d] * (out_shape[d] - 1);
      ib -= sb[d] * (out_shape[d] - 1);
    }
  }
}

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_broadcast_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                              Fwd fwd, BwdA da_of, BwdB db_of) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  std::vector<T> out;
  Shape os;
  if (sa == sb) {  // same-shape fast path
    os = sa;
    out.resize(a.numel());
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    os = broadcast_shape(name, sa, sb);
    out.resize(shape_numel(os));
    auto sta = broadcast_strides(sa, os);
    auto stb = broadcast_strides(sb, os);
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.data();
    broadcast_walk(os, sta, stb,
                   [&](size_t lin, size_t ia, size_t ib) { po[lin] = fwd(pa[ia], pb[ib]); });
  }
  Shape out_shape = os;
  return make_result<T>(
      std::move(os), std::move(out),
      {a, b},
      [out_shape, da_of, db_of](TensorNode<T>& o) {
        auto accumulate = [&](const std::shared_ptr<TensorNode<T>>& p, auto dfn, size_t other) {
          if (!p->requires_grad) return;
          p->ensure_grad();
          const auto& ps = p->shape;
          const auto& qs = o.parents[other]->shape;
          const T* pv = p->value.data();
          const T* qv = o.parents[other]->value.data();
          const T* g = o.grad.data();
          if (ps == out_shape && qs == out_shape) {
            T* pg = p->grad.data();
            for (size_t i = 0; i < o.grad.size(); ++i) pg[i] += dfn(g[i], pv[i], qv[i]);
          } else {
            auto stp = broadcast_strides(ps, out_shape);
            auto stq = broadcast_strides(qs, out_shape);
            T* pg = p->grad.data();
            broadcast_walk(out_shape, stp, stq, [&](size_t lin, size_t ip, size_t iq) {
              pg[ip] += dfn(g[lin], pv[ip], qv[iq]);
            });
          }
        };
        accumulate(o.parents[0], da_of, 1);
        accumulate(o.parents[1], db_of, 0);
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T other) { return g * other; }, [](T g, T, T other) { return g * other; });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const T* pa = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * s;
  });
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  const T* pa = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + s;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix product (rank-2), Eigen-backed
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;
}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    detail::shape_error("matmul", a.shape(), b.shape());
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  {
    detail::ECMap<T> A(a.values().data(), m, k), B(b.values().data(), k, n);
    detail::EMap<T> C(out.data(), m, n);
    C.noalias() = A * B;
  }
  count_flops(flop_cost::matmul(m, k, n));
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    detail::ECMap<T> G(o.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::ECMap<T> B(pb.value.data(), k, n);
      detail::EMap<T> GA(pa.grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::ECMap<T> A(pa.value.data(), m, k);
      detail::EMap<T> GB(pb.grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expected rank-2 tensor, got " +
                                                 shape_to_string(a.shape()));
  const size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const T* pa = a.values().data();
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  return detail::make_result<T>({n, m}, std::move(out), {a}, [m, n](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) p.grad[i * n + j] += o.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    detail::shape_error("reshape", a.shape(), shape);
  std::vector<T> out = a.values();
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Concatenation / slicing / gathering
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range");
  Shape os = s0;
  size_t axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) detail::shape_error("concat", s0, s);
    for (size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != s0[d]) detail::shape_error("concat", s0, s);
    axis_total += s[axis];
  }
  os[axis] = axis_total;

  size_t outer = 1, inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<T> out(shape_numel(os));
  std::vector<size_t> offsets;  // start column-block (in elements of axis*inner) per part
  {
    size_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const size_t block = p.shape()[axis] * inner;
      const T* pv = p.values().data();
      for (size_t r = 0; r < outer; ++r)
        std::copy(pv + r * block, pv + (r + 1) * block, out.data() + r * axis_total * inner + off);
      off += block;
    }
  }

  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(os);
  n->value = std::move(out);
  bool needs = false;
  if (grad_recording_flag())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    const size_t row = axis_total * inner;
    n->backward_fn = [outer, inner, row, offsets](TensorNode<T>& o) {
      for (size_t pi = 0; pi < o.parents.size(); ++pi) {
        auto& p = *o.parents[pi];
        if (!p.requires_grad) continue;
        p.ensure_grad();
        const size_t pblock = p.value.size() / outer;
        for (size_t r = 0; r < outer; ++r) {
          const T* g = o.grad.data() + r * row + offsets[pi];
          T* pg = p.grad.data() + r * pblock;
          for (size_t i = 0; i < pblock; ++i) pg[i] += g[i];
        }
      }
    };
  }
  return Tensor<T>::wrap(std::move(n));
}

// Columns [c0, c1) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, size_t c0, size_t c1) {
  if (a.rank() == 0) throw std::invalid_argument("slice_last: scalar input");
  const size_t last = a.shape().back();
  if (c0 >= c1 || c1 > last)
    throw std::invalid_argument("slice_last: range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") out of " + std::to_string(last));
  const size_t rows = a.numel() / last, width = c1 - c0;
  Shape os = a.shape();
  os.back() = width;
  std::vector<T> out(rows * width);
  const T* pa = a.values().data();
  for (size_t r = 0; r < rows; ++r)
    std::copy(pa + r * last + c0, pa + r * last + c1, out.data() + r * width);
  return detail::make_result<T>(std::move(os), std::move(out), {a},
                                [rows, last, c0, width](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t r = 0; r < rows; ++r) {
                                    const T* g = o.grad.data() + r * width;
                                    T* pg = p.grad.data() + r * last + c0;
                                    for (size_t i = 0; i < width; ++i) pg[i] += g[i];
                                  }
                                });
}

// Row selection on a rank-2 tensor (index_select over axis 0, repeats allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<size_t> idx) {
  if (a.rank() != 2) throw std::invalid_argument("gather_rows: expected rank-2 tensor, got " +
                                                 shape_to_string(a.shape()));
  const size_t rows = a.dim(0), cols = a.dim(1);
  for (size_t i : idx)
    if (i >= rows)
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of " +
                                  std::to_string(rows) + " rows");
  std::vector<T> out(idx.size() * cols);
  const T* pa = a.values().data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(pa + idx[r] * cols, pa + (idx[r] + 1) * cols, out.data() + r * cols);
  Shape os{idx.size(), cols};
  return detail::make_result<T>(std::move(os), std::move(out), {a},
                                [idx = std::move(idx), cols](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t r = 0; r < idx.size(); ++r) {
                                    const T* g = o.grad.data() + r * cols;
                                    T* pg = p.grad.data() + idx[r] * cols;
                                    for (size_t c = 0; c < cols; ++c) pg[c] += g[c];
                                  }
                                });
}

// Tiles a vector (C) into (n, C).
template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& v, size_t n) {
  if (v.rank() != 1) throw std::invalid_argument("repeat_rows: expected rank-1 tensor, got " +
                                                 shape_to_string(v.shape()));
  const size_t c = v.dim(0);
  std::vector<T> out(n * c);
  for (size_t r = 0; r < n; ++r)
    std::copy(v.values().begin(), v.values().end(), out.begin() + r * c);
  return detail::make_result<T>({n, c}, std::move(out), {v}, [n, c](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < n; ++r)
      for (size_t i = 0; i < c; ++i) p.grad[i] += o.grad[r * c + i];
  });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() == 0) throw std::invalid_argument("softmax: scalar input");
  const size_t cols = a.shape().back(), rows = a.numel() / cols;
  std::vector<T> out(a.numel());
  const T* x = a.values().data();
  for (size_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    T* yi = out.data() + r * cols;
    T mx = xi[0];
    for (size_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    T sum = 0;
    for (size_t j = 0; j < cols; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    const T inv = T(1) / sum;
    for (size_t j = 0; j < cols; ++j) yi[j] *= inv;
  }
  count_flops(flop_cost::kSoftmaxPerElem * a.numel());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [rows, cols](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * cols;
      const T* g = o.grad.data() + r * cols;
      T* pg = p.grad.data() + r * cols;
      T dot = 0;
      for (size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
      for (size_t j = 0; j < cols; ++j) pg[j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  if (a.rank() == 0) throw std::invalid_argument("log_softmax: scalar input");
  const size_t cols = a.shape().back(), rows = a.numel() / cols;
  std::vector<T> out(a.numel());
  const T* x = a.values().data();
  for (size_t r = 0; r < rows; ++r) {
    const T* xi = x + r * cols;
    T* yi = out.data() + r * cols;
    T mx = xi[0];
    for (size_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
    T sum = 0;
    for (size_t j = 0; j < cols; ++j) sum += std::exp(xi[j] - mx);
    const T lse = mx + std::log(sum);
    for (size_t j = 0; j < cols; ++j) yi[j] = xi[j] - lse;
  }
  count_flops(flop_cost::kSoftmaxPerElem * a.numel());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [rows, cols](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * cols;
      const T* g = o.grad.data() + r * cols;
      T* pg = p.grad.data() + r * cols;
      T gsum = 0;
      for (size_t j = 0; j < cols; ++j) gsum += g[j];
      for (size_t j = 0; j < cols; ++j) pg[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization (affine handled by the caller via broadcast mul/add)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void normalize_span(const T* x, T* y, size_t n, T eps, T& inv_std_out) {
  T mean = 0;
  for (size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<T>(n);
  T var = 0;
  for (size_t j = 0; j < n; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(n);
  const T inv = T(1) / std::sqrt(var + eps);
  for (size_t j = 0; j < n; ++j) y[j] = (x[j] - mean) * inv;
  inv_std_out = inv;
}

template <typename T>
void normalize_span_backward(const T* y, const T* g, T* pg, size_t n, T inv_std) {
  T gmean = 0, gymean = 0;
  for (size_t j = 0; j < n; ++j) {
    gmean += g[j];
    gymean += g[j] * y[j];
  }
  gmean /= static_cast<T>(n);
  gymean /= static_cast<T>(n);
  for (size_t j = 0; j < n; ++j) pg[j] += (g[j] - gmean - y[j] * gymean) * inv_std;
}
}  // namespace detail

// Zero-mean unit-variance over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
  if (a.rank() == 0) throw std::invalid_argument("layer_norm: scalar input");
  const size_t cols = a.shape().back(), rows = a.numel() / cols;
  std::vector<T> out(a.numel());
  std::vector<T> inv_std(rows);
  for (size_t r = 0; r < rows; ++r)
    detail::normalize_span(a.values().data() + r * cols, out.data() + r * cols, cols, eps,
                           inv_std[r]);
  count_flops(flop_cost::kNormPerElem * a.numel());
  return detail::make_result<T>(a.shape(), std::move(out), {a},
                                [rows, cols, inv_std = std::move(inv_std)](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t r = 0; r < rows; ++r)
                                    detail::normalize_span_backward(
                                        o.value.data() + r * cols, o.grad.data() + r * cols,
                                        p.grad.data() + r * cols, cols, inv_std[r]);
                                });
}

// Per-row normalization inside `groups` equal channel groups of the last axis.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& a, size_t groups, T eps = T(1e-5)) {
  if (a.rank() == 0) throw std::invalid_argument("group_norm: scalar input");
  const size_t cols = a.shape().back(), rows = a.numel() / cols;
  if (groups == 0 || cols % groups != 0)
    throw std::invalid_argument("group_norm: " + std::to_string(groups) +
                                " groups do not divide " + std::to_string(cols) + " channels");
  const size_t gs = cols / groups;
  std::vector<T> out(a.numel());
  std::vector<T> inv_std(rows * groups);
  for (size_t r = 0; r < rows; ++r)
    for (size_t g = 0; g < groups; ++g)
      detail::normalize_span(a.values().data() + r * cols + g * gs,
                             out.data() + r * cols + g * gs, gs, eps, inv_std[r * groups + g]);
  count_flops(flop_cost::kNormPerElem * a.numel());
  return detail::make_result<T>(
      a.shape(), std::move(out), {a},
      [rows, cols, groups, gs, inv_std = std::move(inv_std)](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (size_t g = 0; g < groups; ++g)
            detail::normalize_span_backward(o.value.data() + r * cols + g * gs,
                                            o.grad.data() + r * cols + g * gs,
                                            p.grad.data() + r * cols + g * gs, gs,
                                            inv_std[r * groups + g]);
      });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  static const T s = std::sqrt(T(2) / T(M_PI));
  std::vector<T> out(a.numel());
  const T* x = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) {
    const T xi = x[i];
    out[i] = T(0.5) * xi * (T(1) + std::tanh(s * (xi + T(0.044715) * xi * xi * xi)));
  }
  count_flops(flop_cost::kActivationPerElem * a.numel());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* x = p.value.data();
    for (size_t i = 0; i < o.grad.size(); ++i) {
      const T xi = x[i];
      const T cube = T(0.044715) * xi * xi * xi;
      const T th = std::tanh(s * (xi + cube));
      const T sech2 = T(1) - th * th;
      const T local = T(0.5) * (T(1) + th) +
                      T(0.5) * xi * sech2 * s * (T(1) + T(3) * T(0.044715) * xi * xi);
      p.grad[i] += local * o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const T* x = a.values().data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = x[i] > T(0) ? x[i] : std::expm1(x[i]);
  count_flops(flop_cost::kActivationPerElem * a.numel());
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const T* x = p.value.data();
    const T* y = o.value.data();
    for (size_t i = 0; i < o.grad.size(); ++i)
      p.grad[i] += o.grad[i] * (x[i] > T(0) ? T(1) : y[i] + T(1));
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {
inline void axis_split(const Shape& s, size_t axis, size_t& outer, size_t& mid, size_t& inner) {
  if (axis >= s.size()) throw std::invalid_argument("reduction: axis out of range");
  outer = 1;
  inner = 1;
  for (size_t d = 0; d < axis; ++d) outer *= s[d];
  mid = s[axis];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
}

inline Shape drop_axis(const Shape& s, size_t axis) {
  Shape out;
  for (size_t d = 0; d < s.size(); ++d)
    if (d != axis) out.push_back(s[d]);
  return out;
}
}  // namespace detail

// Gradient flows only to the first maximal element along the axis.
template <typename T>
Tensor<T> max_over_axis(const Tensor<T>& a, size_t axis) {
  size_t outer, mid, inner;
  detail::axis_split(a.shape(), axis, outer, mid, inner);
  std::vector<T> out(outer * inner);
  std::vector<size_t> argmax(outer * inner);
  const T* x = a.values().data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      T best = x[o * mid * inner + i];
      size_t bj = 0;
      for (size_t j = 1; j < mid; ++j) {
        const T v = x[(o * mid + j) * inner + i];
        if (v > best) {
          best = v;
          bj = j;
        }
      }
      out[o * inner + i] = best;
      argmax[o * inner + i] = bj;
    }
  return detail::make_result<T>(detail::drop_axis(a.shape(), axis), std::move(out), {a},
                                [outer, mid, inner, argmax = std::move(argmax)](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t ou = 0; ou < outer; ++ou)
                                    for (size_t i = 0; i < inner; ++i) {
                                      const size_t j = argmax[ou * inner + i];
                                      p.grad[(ou * mid + j) * inner + i] += o.grad[ou * inner + i];
                                    }
                                });
}

template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& a, size_t axis) {
  size_t outer, mid, inner;
  detail::axis_split(a.shape(), axis, outer, mid, inner);
  std::vector<T> out(outer * inner, T(0));
  const T* x = a.values().data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t j = 0; j < mid; ++j)
      for (size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * mid + j) * inner + i];
  const T inv = T(1) / static_cast<T>(mid);
  for (T& v : out) v *= inv;
  return detail::make_result<T>(detail::drop_axis(a.shape(), axis), std::move(out), {a},
                                [outer, mid, inner, inv](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t ou = 0; ou < outer; ++ou)
                                    for (size_t j = 0; j < mid; ++j)
                                      for (size_t i = 0; i < inner; ++i)
                                        p.grad[(ou * mid + j) * inner + i] +=
                                            o.grad[ou * inner + i] * inv;
                                });
}

// Mean over the axis restricted to entries with a nonzero mask. With an
// all-true mask this is bit-identical to mean_over_axis (same summation order
// and a single final division).
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& a, const std::vector<uint8_t>& mask, size_t axis) {
  size_t outer, mid, inner;
  detail::axis_split(a.shape(), axis, outer, mid, inner);
  if (mask.size() != mid)
    throw std::invalid_argument("masked_mean: mask length " + std::to_string(mask.size()) +
                                " does not match axis size " + std::to_string(mid));
  size_t count = 0;
  for (uint8_t m : mask) count += m ? 1 : 0;
  if (count == 0) throw std::invalid_argument("masked_mean: mask is all false");
  std::vector<T> out(outer * inner, T(0));
  const T* x = a.values().data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t j = 0; j < mid; ++j) {
      if (!mask[j]) continue;
      for (size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * mid + j) * inner + i];
    }
  const T inv = T(1) / static_cast<T>(count);
  for (T& v : out) v *= inv;
  return detail::make_result<T>(detail::drop_axis(a.shape(), axis), std::move(out), {a},
                                [outer, mid, inner, inv, mask](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t ou = 0; ou < outer; ++ou)
                                    for (size_t j = 0; j < mid; ++j) {
                                      if (!mask[j]) continue;
                                      for (size_t i = 0; i < inner; ++i)
                                        p.grad[(ou * mid + j) * inner + i] +=
                                            o.grad[ou * inner + i] * inv;
                                    }
                                });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  return detail::make_result<T>({}, {s}, {a}, [](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scalar_mul(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// Single element of a rank-1 tensor as a scalar.
template <typename T>
Tensor<T> pick(const Tensor<T>& a, size_t index) {
  if (a.rank() != 1) throw std::invalid_argument("pick: expected rank-1 tensor, got " +
                                                 shape_to_string(a.shape()));
  if (index >= a.dim(0)) throw std::invalid_argument("pick: index out of range");
  return detail::make_result<T>({}, {a.values()[index]}, {a}, [index](TensorNode<T>& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    p.grad[index] += o.grad[0];
  });
}

// Forward takes the supplied hard values; the gradient passes to `soft`
// unchanged (hard + soft - detach(soft)).
template <typename T>
Tensor<T> straight_through(const Tensor<T>& soft, std::vector<T> hard_values) {
  if (hard_values.size() != soft.numel())
    throw std::invalid_argument("straight_through: hard values do not match soft shape " +
                                shape_to_string(soft.shape()));
  return detail::make_result<T>(soft.shape(), std::move(hard_values), {soft},
                                [](TensorNode<T>& o) {
                                  auto& p = *o.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (size_t i = 0; i < o.grad.size(); ++i)
                                    p.grad[i] += o.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Reverse-mode replay
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order over the recorded graph.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

}  // namespace adapt
