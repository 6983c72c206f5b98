#pragma once

// Dense reverse-mode automatic differentiation.
//
// A Tape records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep. Var is a cheap
// handle (tape, node id). Parameters live outside the tape as Tensors and are
// bound per forward pass with Tape::leaf(); their gradients are accumulated
// into a caller-owned sink at the end of backward().

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "terra/error.hpp"

namespace terra::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // same length as data iff requires_grad

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d, bool rg = false) : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    if (ad::numel(shape) != data.size()) throw ShapeError("tensor data does not match shape " + to_string(shape));
    if (rg) grad.assign(data.size(), T(0));
  }
  static Tensor zeros(Shape s, bool rg = false) {
    const auto n = ad::numel(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)), rg);
  }
  std::size_t numel() const { return data.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Shape& shape() const { return tape_->shape(id_); }
  std::size_t numel() const { return tape_->value(id_).size(); }
  std::span<const T> value() const { return tape_->value(id_); }
  std::span<const T> grad() const { return tape_->grad(id_); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar " + to_string(shape()));
    return value()[0];
  }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When enabled (default), every op output is scanned and a NumericError is
  /// raised on the first NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

  Var<T> constant(Shape shape, std::vector<T> value) {
    return emit("constant", std::move(shape), std::move(value), false, nullptr);
  }
  Var<T> constant(const Tensor<T>& t) { return constant(t.shape, t.data); }

  /// Trainable input. After backward() its gradient is added into `sink`
  /// (when non-null and sized like the value).
  Var<T> leaf(const Tensor<T>& t, std::vector<T>* sink) {
    auto v = emit("leaf", t.shape, t.data, true, nullptr);
    nodes_[v.id()].sink = sink;
    return v;
  }
  /// Binds a tensor whose own grad buffer receives the gradient.
  Var<T> param(Tensor<T>& t) { return leaf(t, t.requires_grad ? &t.grad : nullptr); }

  Var<T> emit(const char* op, Shape shape, std::vector<T> value, bool requires_grad, Backward backward) {
    if (numel(shape) != value.size()) throw ShapeError(std::string(op) + ": value does not match shape");
    if (check_finite_) {
      for (const T& x : value)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = requires_grad ? std::move(backward) : nullptr;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const T> value(std::uint32_t id) const { return nodes_[id].value; }
  std::span<const T> grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of a node, allocated on first use.
  std::vector<T>& grad_buffer(std::uint32_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  /// Reverse sweep from a scalar. Intermediate gradients are reset on every
  /// call; leaf sinks accumulate across calls until the caller zeroes them.
  void backward(Var<T> loss) {
    if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] = T(1);
    for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
    }
    for (auto& n : nodes_) {
      if (n.sink && !n.grad.empty()) {
        if (n.sink->size() != n.grad.size()) throw ShapeError("gradient sink size mismatch");
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*n.sink)[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Backward backward;
    std::vector<T>* sink = nullptr;
  };

  std::vector<Node> nodes_;
  bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// helpers

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

/// In-place exp through an aligned scratch buffer. Eigen runs the unaligned
/// head of a buffer through scalar code, and scalar and packet exp round
/// differently, so results would otherwise depend on the heap.
template <class T>
void exp_inplace(T* x, std::size_t n) {
  thread_local Eigen::Array<T, Eigen::Dynamic, 1> s;
  const auto en = static_cast<Eigen::Index>(n);
  s.resize(en);
  s = CArrMap<T>(x, en);
  s = s.exp();
  ArrMap<T>(x, en) = s;
}

/// Sum and dot product in a fixed association order. Eigen's reductions peel
/// to the buffer's alignment, which would make results depend on the heap.
template <class T>
T fixed_sum(const T* a, std::size_t n) {
  T acc[4] = {T(0), T(0), T(0), T(0)};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (std::size_t j = 0; j < 4; ++j) acc[j] += a[i + j];
  for (; i < n; ++i) acc[0] += a[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

template <class T>
T fixed_dot(const T* a, const T* b, std::size_t n) {
  T acc[4] = {T(0), T(0), T(0), T(0)};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    for (std::size_t j = 0; j < 4; ++j) acc[j] += a[i + j] * b[i + j];
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

template <class T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ShapeError("operands recorded on different tapes");
}

enum class Bcast { same, scalar, suffix };

/// How `b` broadcasts against `a`: equal shape, scalar, or trailing-dims suffix.
inline Bcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::same;
  if (numel(b) == 1) return Bcast::scalar;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return Bcast::suffix;
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline std::size_t last_dim(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(std::string(op) + ": needs at least one dimension");
  return s.back();
}

/// Shared implementation of elementwise binary ops with b broadcast to a.
/// df_da / df_db map (a_i, b_i, out_i) to local partials.
template <class T, class F, class DA, class DB>
Var<T> binary(const char* op, Var<T> a, Var<T> b, F f, DA df_da, DB df_db) {
  same_tape(a, b);
  if (numel(a.shape()) < numel(b.shape())) throw ShapeError(std::string(op) + ": broadcast operand must be second");
  const auto kind = broadcast_kind(a.shape(), b.shape(), op);
  const auto av = a.value();
  const auto bv = b.value();
  const std::size_t n = av.size(), m = bv.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[kind == Bcast::same ? i : i % m]);
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  const bool rg = tape.requires_grad(ia) || tape.requires_grad(ib);
  return tape.emit(op, a.shape(), std::move(out), rg, [=](Tape<T>& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto x = t.value(ia);
    const auto y = t.value(ib);
    const auto o = t.value(self);
    const std::size_t mm = y.size();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df_da(x[i], y[i % mm], o[i]);
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % mm] += g[i] * df_db(x[i], y[i % mm], o[i]);
    }
  });
}

template <class T, class F, class DF>
Var<T> unary(const char* op, Var<T> a, F f, DF df) {
  const auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto& tape = a.tape();
  const auto ia = a.id();
  return tape.emit(op, a.shape(), std::move(out), tape.requires_grad(ia), [=](Tape<T>& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto x = t.value(ia);
    const auto o = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], o[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  if (numel(a.shape()) < numel(b.shape())) std::swap(a, b);
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (numel(a.shape()) < numel(b.shape())) std::swap(a, b);
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

/// Multiplication by a constant.
template <class T>
Var<T> scale(Var<T> a, T c) {
  return detail::unary<T>("scale", a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  return detail::unary<T>("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> square(Var<T> a) {
  return detail::unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

/// Derivative at 0 is taken as 0 (a subgradient of |.| composed with sqrt(x²)).
template <class T>
Var<T> sqrt(Var<T> a) {
  return detail::unary<T>(
      "sqrt", a,
      [](T x) {
        if (x < T(0)) throw NumericError("sqrt of negative value");
        return std::sqrt(x);
      },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Var<T> atan(Var<T> a) {
  return detail::unary<T>("atan", a, [](T x) { return std::atan(x); }, [](T x, T) { return T(1) / (T(1) + x * x); });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  const auto av = a.value();
  const auto n = static_cast<Eigen::Index>(av.size());
  detail::CArrMap<T> x(av.data(), n);
  Eigen::Array<T, Eigen::Dynamic, 1> cdf = T(0.5) * (T(1) + (x * inv_sqrt2).erf());
  std::vector<T> out(av.size());
  detail::ArrMap<T>(out.data(), n) = x * cdf;
  auto& tape = a.tape();
  const auto ia = a.id();
  return tape.emit("gelu", a.shape(), std::move(out), tape.requires_grad(ia),
                   [=, cdf = std::move(cdf)](Tape<T>& t, std::uint32_t self) {
                     detail::CArrMap<T> g(t.grad(self).data(), n), xs(t.value(ia).data(), n);
                     // Aligned destinations keep the exp path independent of the heap.
                     Eigen::Array<T, Eigen::Dynamic, 1> pdf = (T(-0.5) * xs.square()).exp();
                     detail::ArrMap<T>(t.grad_buffer(ia).data(), n) += g * (cdf + xs * inv_sqrt2pi * pdf);
                   });
}

// ---------------------------------------------------------------------------
// reductions and reshapes

template <class T>
Var<T> sum(Var<T> a) {
  const auto v = a.value();
  T s = T(0);
  for (T x : v) s += x;
  auto& tape = a.tape();
  const auto ia = a.id();
  return tape.emit("sum", Shape{}, {s}, tape.requires_grad(ia), [=](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad(self)[0];
    for (auto& x : t.grad_buffer(ia)) x += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel(shape) != a.numel()) throw ShapeError("reshape: element count mismatch");
  auto& tape = a.tape();
  const auto ia = a.id();
  std::vector<T> v(a.value().begin(), a.value().end());
  return tape.emit("reshape", std::move(shape), std::move(v), tape.requires_grad(ia),
                   [=](Tape<T>& t, std::uint32_t self) {
                     const auto g = t.grad(self);
                     auto& ga = t.grad_buffer(ia);
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   });
}

/// Columns [start, start+len) of a 2-D tensor.
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t len) {
  const auto& s = a.shape();
  if (s.size() != 2 || start + len > s[1]) throw ShapeError("slice_cols: out of range on " + to_string(s));
  const std::size_t rows = s[0], cols = s[1];
  const auto v = a.value();
  std::vector<T> out(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(v.begin() + r * cols + start, len, out.begin() + r * len);
  auto& tape = a.tape();
  const auto ia = a.id();
  return tape.emit("slice_cols", Shape{rows, len}, std::move(out), tape.requires_grad(ia),
                   [=](Tape<T>& t, std::uint32_t self) {
                     const auto g = t.grad(self);
                     auto& ga = t.grad_buffer(ia);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < len; ++c) ga[r * cols + start + c] += g[r * len + c];
                   });
}

/// Horizontal concatenation of 2-D tensors with equal row counts.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape().at(0);
  std::size_t cols = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    if (p.shape().size() != 2 || p.shape()[0] != rows) throw ShapeError("concat_cols: row mismatch");
    ids.push_back(p.id());
    widths.push_back(p.shape()[1]);
    cols += p.shape()[1];
    rg = rg || p.tape().requires_grad(p.id());
  }
  std::vector<T> out(rows * cols);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.begin() + r * widths[k], widths[k], out.begin() + r * cols + off);
    off += widths[k];
  }
  return parts[0].tape().emit("concat_cols", Shape{rows, cols}, std::move(out), rg,
                              [=](Tape<T>& t, std::uint32_t self) {
                                const auto g = t.grad(self);
                                std::size_t o = 0;
                                for (std::size_t k = 0; k < ids.size(); ++k) {
                                  if (t.requires_grad(ids[k])) {
                                    auto& gk = t.grad_buffer(ids[k]);
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < widths[k]; ++c)
                                        gk[r * widths[k] + c] += g[r * cols + o + c];
                                  }
                                  o += widths[k];
                                }
                              });
}

// ---------------------------------------------------------------------------
// linear algebra

/// C = A·B for A [m,k], B [k,n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  const auto &sa = a.shape(), &sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " x " + to_string(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<T> out(m * n);
  using namespace detail;
  const auto ea = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n);
  MatMap<T>(out.data(), ea, en).noalias() = CMatMap<T>(a.value().data(), ea, ek) * CMatMap<T>(b.value().data(), ek, en);
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  const bool rg = tape.requires_grad(ia) || tape.requires_grad(ib);
  return tape.emit("matmul", Shape{m, n}, std::move(out), rg, [=](Tape<T>& t, std::uint32_t self) {
    CMatMap<T> g(t.grad(self).data(), ea, en);
    if (t.requires_grad(ia))
      MatMap<T>(t.grad_buffer(ia).data(), ea, ek).noalias() += g * CMatMap<T>(t.value(ib).data(), ek, en).transpose();
    if (t.requires_grad(ib))
      MatMap<T>(t.grad_buffer(ib).data(), ek, en).noalias() += CMatMap<T>(t.value(ia).data(), ea, ek).transpose() * g;
  });
}

/// C = alpha·A·Bᵀ for A [m,k], B [n,k].
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b, T alpha = T(1)) {
  detail::same_tape(a, b);
  const auto &sa = a.shape(), &sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw ShapeError("matmul_nt: incompatible shapes " + to_string(sa) + " x " + to_string(sb) + "^T");
  const std::size_t m = sa[0], k = sa[1], n = sb[0];
  std::vector<T> out(m * n);
  using namespace detail;
  const auto ea = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n);
  MatMap<T> c(out.data(), ea, en);
  c.noalias() = CMatMap<T>(a.value().data(), ea, ek) * CMatMap<T>(b.value().data(), en, ek).transpose();
  if (alpha != T(1)) c *= alpha;
  auto& tape = a.tape();
  const auto ia = a.id(), ib = b.id();
  const bool rg = tape.requires_grad(ia) || tape.requires_grad(ib);
  return tape.emit("matmul_nt", Shape{m, n}, std::move(out), rg, [=](Tape<T>& t, std::uint32_t self) {
    CMatMap<T> g(t.grad(self).data(), ea, en);
    if (t.requires_grad(ia))
      MatMap<T>(t.grad_buffer(ia).data(), ea, ek).noalias() += alpha * (g * CMatMap<T>(t.value(ib).data(), en, ek));
    if (t.requires_grad(ib))
      MatMap<T>(t.grad_buffer(ib).data(), en, ek).noalias() +=
          alpha * (g.transpose() * CMatMap<T>(t.value(ia).data(), ea, ek));
  });
}

/// Row-wise softmax over the last axis, max-subtracted.
template <class T>
Var<T> softmax(Var<T> a) {
  const std::size_t n = detail::last_dim(a.shape(), "softmax");
  const std::size_t rows = a.numel() / n;
  std::vector<T> out(a.value().begin(), a.value().end());
  using Row = Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>;
  for (std::size_t r = 0; r < rows; ++r) {
    Row row(out.data() + r * n, static_cast<Eigen::Index>(n));
    row -= row.maxCoeff();
    detail::exp_inplace(row.data(), n);
    row /= detail::fixed_sum(row.data(), n);
  }
  auto& tape = a.tape();
  const auto ia = a.id();
  return tape.emit("softmax", a.shape(), std::move(out), tape.requires_grad(ia), [=](Tape<T>& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    using CRow = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>;
    const auto en = static_cast<Eigen::Index>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      CRow gy(g.data() + r * n, en), yy(y.data() + r * n, en);
      const T dot = detail::fixed_dot(gy.data(), yy.data(), n);
      Row(ga.data() + r * n, en) += yy * (gy - dot);
    }
  });
}

/// Multi-head scaled dot-product self-attention over packed projections.
/// qkv is [N, 3D] laid out as [Q | K | V], each split into `heads` column
/// blocks; the result is [N, D] with heads concatenated. Only the softmax
/// weights are kept for the backward pass.
template <class T>
Var<T> attention(Var<T> qkv, std::size_t heads) {
  const auto& s = qkv.shape();
  if (s.size() != 2 || heads == 0 || s[1] % (3 * heads) != 0)
    throw ShapeError("attention: qkv shape " + to_string(s) + " incompatible with " + std::to_string(heads) + " heads");
  const std::size_t n = s[0], dim = s[1] / 3, hd = dim / heads;
  using namespace detail;
  using Stride = Eigen::OuterStride<>;
  using CBlock = Eigen::Map<const RowMat<T>, 0, Stride>;
  using Block = Eigen::Map<RowMat<T>, 0, Stride>;
  const auto en = static_cast<Eigen::Index>(n), eh = static_cast<Eigen::Index>(hd);
  const Stride in_stride(static_cast<Eigen::Index>(3 * dim)), out_stride(static_cast<Eigen::Index>(dim));
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  // Work proceeds in blocks of query rows so each block's scores stay in cache.
  constexpr Eigen::Index kRows = 64;
  std::shared_ptr<T[]> probs(new T[heads * n * n]);
  std::vector<T> out(n * dim);
  const T* x = qkv.value().data();
  for (std::size_t h = 0; h < heads; ++h) {
    MatMap<T> p(probs.get() + h * n * n, en, en);
    CBlock q(x + h * hd, en, eh, in_stride), k(x + dim + h * hd, en, eh, in_stride);
    CBlock v(x + 2 * dim + h * hd, en, eh, in_stride);
    Block o(out.data() + h * hd, en, eh, out_stride);
    for (Eigen::Index r0 = 0; r0 < en; r0 += kRows) {
      const Eigen::Index rows = std::min(kRows, en - r0);
      auto pb = p.middleRows(r0, rows);
      pb.noalias() = (q.middleRows(r0, rows) * scale) * k.transpose();
      for (Eigen::Index r = 0; r < rows; ++r) {
        auto row = pb.row(r).array();
        row -= row.maxCoeff();
        exp_inplace(&pb(r, 0), n);
        row /= fixed_sum(&pb(r, 0), n);
      }
      o.middleRows(r0, rows).noalias() = pb * v;
    }
  }

  auto& tape = qkv.tape();
  const auto iq = qkv.id();
  return tape.emit("attention", Shape{n, dim}, std::move(out), tape.requires_grad(iq),
                   [=](Tape<T>& t, std::uint32_t self) {
                     const T* xv = t.value(iq).data();
                     const T* g = t.grad(self).data();
                     T* gx = t.grad_buffer(iq).data();
                     RowMat<T> ds(kRows, en);
                     for (std::size_t h = 0; h < heads; ++h) {
                       CMatMap<T> p(probs.get() + h * n * n, en, en);
                       CBlock q(xv + h * hd, en, eh, in_stride), k(xv + dim + h * hd, en, eh, in_stride);
                       CBlock v(xv + 2 * dim + h * hd, en, eh, in_stride);
                       CBlock go(g + h * hd, en, eh, out_stride);
                       Block gq(gx + h * hd, en, eh, in_stride), gk(gx + dim + h * hd, en, eh, in_stride);
                       Block gv(gx + 2 * dim + h * hd, en, eh, in_stride);
                       for (Eigen::Index r0 = 0; r0 < en; r0 += kRows) {
                         const Eigen::Index rows = std::min(kRows, en - r0);
                         const auto pb = p.middleRows(r0, rows);
                         const auto gob = go.middleRows(r0, rows);
                         gv.noalias() += pb.transpose() * gob;
                         auto dsb = ds.topRows(rows);
                         dsb.noalias() = gob * v.transpose();
                         for (Eigen::Index r = 0; r < rows; ++r) {
                           const T dot = fixed_dot(&dsb(r, 0), pb.data() + r * en, n);
                           dsb.row(r).array() = pb.row(r).array() * (dsb.row(r).array() - dot) * scale;
                         }
                         gq.middleRows(r0, rows).noalias() += dsb * k;
                         gk.noalias() += dsb.transpose() * q.middleRows(r0, rows);
                       }
                     }
                   });
}

/// Per-row standardization over the last axis followed by gamma·x̂ + beta.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const std::size_t d = detail::last_dim(x.shape(), "layer_norm");
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.value(), gv = gamma.value(), bv = beta.value();
  std::vector<T> out(xv.size()), xhat(xv.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  auto& tape = x.tape();
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool rg = tape.requires_grad(ix) || tape.requires_grad(ig) || tape.requires_grad(ib);
  return tape.emit("layer_norm", x.shape(), std::move(out), rg,
                   [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::uint32_t self) {
                     const auto g = t.grad(self);
                     const auto gam = t.value(ig);
                     if (t.requires_grad(ig)) {
                       auto& gg = t.grad_buffer(ig);
                       for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                     }
                     if (t.requires_grad(ib)) {
                       auto& gb = t.grad_buffer(ib);
                       for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                     }
                     if (t.requires_grad(ix)) {
                       auto& gx = t.grad_buffer(ix);
                       for (std::size_t r = 0; r < rows; ++r) {
                         T mean_g = T(0), mean_gx = T(0);
                         for (std::size_t j = 0; j < d; ++j) {
                           const T gh = g[r * d + j] * gam[j];
                           mean_g += gh;
                           mean_gx += gh * xhat[r * d + j];
                         }
                         mean_g /= static_cast<T>(d);
                         mean_gx /= static_cast<T>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const T gh = g[r * d + j] * gam[j];
                           gx[r * d + j] += rstd[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// row routing

namespace detail {
inline void check_indices(std::span<const std::size_t> idx, std::size_t n, const char* op) {
  std::vector<std::uint8_t> seen(n, 0);
  for (auto i : idx) {
    if (i >= n) throw ShapeError(std::string(op) + ": index " + std::to_string(i) + " out of range");
    if (seen[i]) throw ShapeError(std::string(op) + ": duplicate index " + std::to_string(i));
    seen[i] = 1;
  }
}
}  // namespace detail

/// Rows of x [n,d] at `indices`, in index order.
template <class T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> indices) {
  const auto& s = x.shape();
  if (s.size() != 2) throw ShapeError("gather_rows: needs a 2-D tensor");
  const std::size_t n = s[0], d = s[1];
  detail::check_indices(indices, n, "gather_rows");
  const auto v = x.value();
  std::vector<T> out(indices.size() * d);
  for (std::size_t k = 0; k < indices.size(); ++k) std::copy_n(v.begin() + indices[k] * d, d, out.begin() + k * d);
  auto& tape = x.tape();
  const auto ix = x.id();
  const std::size_t k = indices.size();
  return tape.emit("gather_rows", Shape{k, d}, std::move(out), tape.requires_grad(ix),
                   [=, idx = std::move(indices)](Tape<T>& t, std::uint32_t self) {
                     const auto g = t.grad(self);
                     auto& gx = t.grad_buffer(ix);
                     for (std::size_t r = 0; r < idx.size(); ++r)
                       for (std::size_t j = 0; j < d; ++j) gx[idx[r] * d + j] += g[r * d + j];
                   });
}

/// Inverse of gather_rows: an [n,d] tensor with row indices[k] = x[k] and every
/// other row equal to `fill` [d].
template <class T>
Var<T> scatter_rows(Var<T> x, std::vector<std::size_t> indices, std::size_t n, Var<T> fill) {
  detail::same_tape(x, fill);
  const auto& s = x.shape();
  if (s.size() != 2 || s[0] != indices.size()) throw ShapeError("scatter_rows: rows do not match index count");
  const std::size_t d = s[1];
  if (fill.numel() != d) throw ShapeError("scatter_rows: fill row size mismatch");
  detail::check_indices(indices, n, "scatter_rows");
  std::vector<std::uint8_t> placed(n, 0);
  for (auto i : indices) placed[i] = 1;
  const auto v = x.value(), f = fill.value();
  std::vector<T> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    if (!placed[r]) std::copy_n(f.begin(), d, out.begin() + r * d);
  for (std::size_t k = 0; k < indices.size(); ++k) std::copy_n(v.begin() + k * d, d, out.begin() + indices[k] * d);
  auto& tape = x.tape();
  const auto ix = x.id(), iff = fill.id();
  const bool rg = tape.requires_grad(ix) || tape.requires_grad(iff);
  return tape.emit("scatter_rows", Shape{n, d}, std::move(out), rg,
                   [=, idx = std::move(indices), placed = std::move(placed)](Tape<T>& t, std::uint32_t self) {
                     const auto g = t.grad(self);
                     if (t.requires_grad(ix)) {
                       auto& gx = t.grad_buffer(ix);
                       for (std::size_t k = 0; k < idx.size(); ++k)
                         for (std::size_t j = 0; j < d; ++j) gx[k * d + j] += g[idx[k] * d + j];
                     }
                     if (t.requires_grad(iff)) {
                       auto& gf = t.grad_buffer(iff);
                       for (std::size_t r = 0; r < n; ++r)
                         if (!placed[r])
                           for (std::size_t j = 0; j < d; ++j) gf[j] += g[r * d + j];
                     }
                   });
}

// ---------------------------------------------------------------------------
// fixed 3x3 convolution

using Kernel3 = std::array<double, 9>;

inline constexpr Kernel3 kSobelX{-1, 0, 1, -2, 0, 2, -1, 0, 1};
inline constexpr Kernel3 kSobelY{-1, -2, -1, 0, 0, 0, 1, 2, 1};

/// Cross-correlation of x [H,W] with a constant 3×3 kernel, replicate padding.
/// Differentiable with respect to x only.
template <class T>
Var<T> conv2d_fixed(Var<T> x, const Kernel3& kernel) {
  const auto& s = x.shape();
  if (s.size() != 2) throw ShapeError("conv2d_fixed: needs [H,W]");
  const std::size_t h = s[0], w = s[1];
  const auto v = x.value();
  auto clampi = [](long i, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1)); };
  std::vector<T> out(h * w, T(0));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      T acc = T(0);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const T k = static_cast<T>(kernel[(dr + 1) * 3 + (dc + 1)]);
          if (k != T(0)) acc += k * v[clampi(static_cast<long>(r) + dr, h) * w + clampi(static_cast<long>(c) + dc, w)];
        }
      out[r * w + c] = acc;
    }
  auto& tape = x.tape();
  const auto ix = x.id();
  return tape.emit("conv2d_fixed", s, std::move(out), tape.requires_grad(ix), [=](Tape<T>& t, std::uint32_t self) {
    const auto g = t.grad(self);
    auto& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const T go = g[r * w + c];
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const T k = static_cast<T>(kernel[(dr + 1) * 3 + (dc + 1)]);
            if (k != T(0)) gx[clampi(static_cast<long>(r) + dr, h) * w + clampi(static_cast<long>(c) + dc, w)] += k * go;
          }
      }
  });
}

// ---------------------------------------------------------------------------
// composite

/// x·W + b for x [n,in], W [in,out], b [out].
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace terra::ad
