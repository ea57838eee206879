#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "aclip/common.hpp"

namespace aclip {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace nd {

// Reverse-mode autodiff is recorded as a DAG of nodes. Each op attaches a
// backward closure that pushes the node's gradient into its parents;
// Tensor::backward() walks the DAG in reverse topological order, visiting
// each node exactly once and accumulating gradients additively.

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor supports float32/float64");

 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on demand, same extent as value
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(Node&)> backward;
    std::int64_t id = detail::next_node_id();

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    void ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
  };

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->value = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)), T(0));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> d(static_cast<std::size_t>(shape_numel(shape)), v);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return node().shape; }
  std::int64_t numel() const { return node().numel(); }
  std::int64_t dim(int i) const {
    const auto& s = shape();
    if (i < 0) i += static_cast<int>(s.size());
    return s[static_cast<std::size_t>(i)];
  }
  int rank() const { return static_cast<int>(shape().size()); }
  bool requires_grad() const { return node().requires_grad; }
  static constexpr const char* dtype() {
    return std::is_same_v<T, float> ? "float32" : "float64";
  }

  std::vector<T>& data() { return node().value; }
  const std::vector<T>& data() const { return node().value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor is not a scalar");
    return node().value[0];
  }

  const std::vector<T>& grad() const {
    if (!node().requires_grad)
      throw StructuralError("gradient requested on a tensor that does not require it");
    if (node().grad.size() != node().value.size())
      throw StructuralError("gradient buffer not populated; call backward() first");
    return node().grad;
  }
  bool has_grad() const { return node().grad.size() == node().value.size(); }
  void zero_grad() { node().grad.clear(); }

  Node& node() const {
    if (!n_) throw StructuralError("use of an undefined tensor");
    return *n_;
  }
  Node* raw() const { return n_.get(); }

  // Runs reverse-mode accumulation from this scalar output.
  void backward() {
    Node& root = node();
    if (root.numel() != 1) throw ShapeError("backward() requires a scalar output");
    if (!root.requires_grad)
      throw StructuralError("backward() on a tensor with no recorded graph");

    // Depth-first topological order; each node visited exactly once.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(&root, 0);
    seen.insert(&root);
    while (!stack.empty()) {
      auto& [node_ptr, child] = stack.back();
      if (child < node_ptr->parents.size()) {
        Node* p = node_ptr->parents[child].raw();
        ++child;
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node_ptr);
        stack.pop_back();
      }
    }

    root.ensure_grad();
    root.grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* nptr = *it;
      if (nptr->backward) nptr->backward(*nptr);
    }
  }

 private:
  std::shared_ptr<Node> n_;
};

// --- op helpers -------------------------------------------------------------

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> parents,
                      std::function<void(typename Tensor<T>::Node&)> backward) {
  bool any = false;
  if (detail::grad_mode())
    for (const auto& p : parents) any = any || p.requires_grad();
  Tensor<T> out(std::move(shape), std::move(value), any);
  if (any) {
    out.node().parents = std::move(parents);
    out.node().backward = std::move(backward);
  }
  return out;
}

template <typename T>
void accumulate(typename Tensor<T>::Node& parent, const std::vector<T>& delta) {
  parent.ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) parent.grad[i] += delta[i];
}

inline int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ArgumentError("axis out of range");
  return axis;
}

// --- elementwise ------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd dfdx) {
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x;
  return make_result<T>(
      x.shape(), std::move(out), {x},
      [xn, dfdx](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        const auto& xv = pn.value;
        for (std::size_t i = 0; i < xv.size(); ++i)
          pn.grad[i] += self.grad[i] * dfdx(xv[i]);
      });
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + " differ");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a, bn = b;
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [an, bn](typename Tensor<T>::Node& self) {
                          if (an.requires_grad()) accumulate<T>(an.node(), self.grad);
                          if (bn.requires_grad()) accumulate<T>(bn.node(), self.grad);
                        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a, bn = b;
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [an, bn](typename Tensor<T>::Node& self) {
                          if (an.requires_grad()) accumulate<T>(an.node(), self.grad);
                          if (bn.requires_grad()) {
                            auto& pn = bn.node();
                            pn.ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              pn.grad[i] -= self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a, bn = b;
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](typename Tensor<T>::Node& self) {
        if (an.requires_grad()) {
          auto& pn = an.node();
          pn.ensure_grad();
          const auto& bv = bn.data();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pn.grad[i] += self.grad[i] * bv[i];
        }
        if (bn.requires_grad()) {
          auto& pn = bn.node();
          pn.ensure_grad();
          const auto& av = an.data();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pn.grad[i] += self.grad[i] * av[i];
        }
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "div");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  auto an = a, bn = b;
  return make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](typename Tensor<T>::Node& self) {
        const auto& av = an.data();
        const auto& bv = bn.data();
        if (an.requires_grad()) {
          auto& pn = an.node();
          pn.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pn.grad[i] += self.grad[i] / bv[i];
        }
        if (bn.requires_grad()) {
          auto& pn = bn.node();
          pn.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pn.grad[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return unary_op(
      x, [c](T v) { return v * c; }, [c](T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return unary_op(
      x, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::sqrt(v); },
      [](T v) { return T(0.5) / std::sqrt(v); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::tanh(v); },
      [](T v) {
        const T t = std::tanh(v);
        return T(1) - t * t;
      });
}

// tanh approximation; finite-difference oracles use this same definition
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return unary_op(
      x,
      [](T v) {
        const T inner = k * (v + c * v * v * v);
        return T(0.5) * v * (T(1) + std::tanh(inner));
      },
      [](T v) {
        const T inner = k * (v + c * v * v * v);
        const T t = std::tanh(inner);
        const T dinner = k * (T(1) + T(3) * c * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dinner;
      });
}

// Broadcast multiply by a single-element tensor (used for temperature scaling).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must have one element");
  const T sv = s.data()[0];
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
  auto xn = x, sn = s;
  return make_result<T>(
      x.shape(), std::move(out), {x, s}, [xn, sn](typename Tensor<T>::Node& self) {
        const T sv = sn.data()[0];
        if (xn.requires_grad()) {
          auto& pn = xn.node();
          pn.ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            pn.grad[i] += self.grad[i] * sv;
        }
        if (sn.requires_grad()) {
          auto& pn = sn.node();
          pn.ensure_grad();
          const auto& xv = xn.data();
          T acc = T(0);
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            acc += self.grad[i] * xv[i];
          pn.grad[0] += acc;
        }
      });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), x.data(), false);
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return T(1) / v; }, [](T v) { return T(-1) / (v * v); });
}

// Scales row r of x[R, n] by s[r].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& s) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  if (s.numel() != rows) throw ShapeError("scale_rows: one scale per row required");
  const auto& xv = x.data();
  const auto& sv = s.data();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < n; ++j)
      out[static_cast<std::size_t>(r * n + j)] =
          xv[static_cast<std::size_t>(r * n + j)] * sv[static_cast<std::size_t>(r)];
  auto xn = x, sn = s;
  return make_result<T>(
      x.shape(), std::move(out), {x, s}, [xn, sn, rows, n](typename Tensor<T>::Node& self) {
        const auto& xv = xn.data();
        const auto& sv = sn.data();
        if (xn.requires_grad()) {
          auto& pn = xn.node();
          pn.ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < n; ++j)
              pn.grad[static_cast<std::size_t>(r * n + j)] +=
                  self.grad[static_cast<std::size_t>(r * n + j)] *
                  sv[static_cast<std::size_t>(r)];
        }
        if (sn.requires_grad()) {
          auto& pn = sn.node();
          pn.ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            T acc = T(0);
            for (std::int64_t j = 0; j < n; ++j)
              acc += self.grad[static_cast<std::size_t>(r * n + j)] *
                     xv[static_cast<std::size_t>(r * n + j)];
            pn.grad[static_cast<std::size_t>(r)] += acc;
          }
        }
      });
}

// Tiles x to a leading batch axis; backward sums over the tile.
template <typename T>
Tensor<T> expand_dim0(const Tensor<T>& x, std::int64_t batch) {
  if (batch <= 0) throw ArgumentError("expand_dim0: batch must be positive");
  Shape out_shape;
  out_shape.push_back(batch);
  for (auto d : x.shape()) out_shape.push_back(d);
  const auto& xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(batch) * xv.size());
  for (std::int64_t b = 0; b < batch; ++b)
    std::copy(xv.begin(), xv.end(), out.begin() + b * static_cast<std::int64_t>(xv.size()));
  auto xn = x;
  return make_result<T>(std::move(out_shape), std::move(out), {x},
                        [xn, batch](typename Tensor<T>::Node& self) {
                          if (!xn.requires_grad()) return;
                          auto& pn = xn.node();
                          pn.ensure_grad();
                          const std::int64_t m = pn.numel();
                          for (std::int64_t b = 0; b < batch; ++b)
                            for (std::int64_t i = 0; i < m; ++i)
                              pn.grad[static_cast<std::size_t>(i)] +=
                                  self.grad[static_cast<std::size_t>(b * m + i)];
                        });
}

// Swaps axes 1 and 2 of a rank-4 tensor ([B, S, H, C] <-> [B, H, S, C]).
template <typename T>
Tensor<T> swap_axes12(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("swap_axes12: rank-4 tensor required");
  const std::int64_t B = x.dim(0), S = x.dim(1), H = x.dim(2), C = x.dim(3);
  Shape out_shape{B, H, S, C};
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < S; ++s)
      for (std::int64_t h = 0; h < H; ++h)
        std::copy(xv.data() + ((b * S + s) * H + h) * C,
                  xv.data() + ((b * S + s) * H + h + 1) * C,
                  out.data() + ((b * H + h) * S + s) * C);
  auto xn = x;
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, B, S, H, C](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t s = 0; s < S; ++s) {
              const T* g = self.grad.data() + ((b * H + h) * S + s) * C;
              T* dst = pn.grad.data() + ((b * S + s) * H + h) * C;
              for (std::int64_t c = 0; c < C; ++c) dst[c] += g[c];
            }
      });
}

// --- shape ops --------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  // one extent may be -1 and is inferred
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw ShapeError("reshape: cannot infer extent");
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) +
                     " -> " + shape_str(shape));
  auto xn = x;
  return make_result<T>(std::move(shape), x.data(), {x},
                        [xn](typename Tensor<T>::Node& self) {
                          if (xn.requires_grad()) accumulate<T>(xn.node(), self.grad);
                        });
}

// Swap the last two axes.
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last: rank must be >= 2");
  Shape s = x.shape();
  const std::int64_t m = s[s.size() - 2], n = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  const std::int64_t batch = x.numel() / (m * n);
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* src = xv.data() + b * m * n;
    T* dst = out.data() + b * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  auto xn = x;
  return make_result<T>(
      std::move(s), std::move(out), {x}, [xn, m, n, batch](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
          const T* g = self.grad.data() + b * m * n;
          T* dst = pn.grad.data() + b * m * n;
          for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t i = 0; i < m; ++i) dst[i * n + j] += g[j * m + i];
        }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const int rank = parts[0].rank();
  axis = normalize_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.shape()[static_cast<std::size_t>(d)] !=
                           out_shape[static_cast<std::size_t>(d)])
        throw ShapeError("concat: extent mismatch off the concat axis");
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets(parts.size());
  {
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      offsets[pi] = off;
      off += parts[pi].dim(axis);
    }
  }
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].data();
    const std::int64_t len = parts[pi].dim(axis);
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* src = pv.data() + o * len * inner;
      T* dst = out.data() + (o * total + offsets[pi]) * inner;
      std::copy(src, src + len * inner, dst);
    }
  }
  auto parents = parts;
  return make_result<T>(
      std::move(out_shape), std::move(out), parts,
      [parents, offsets, outer, inner, total](typename Tensor<T>::Node& self) {
        for (std::size_t pi = 0; pi < parents.size(); ++pi) {
          if (!parents[pi].requires_grad()) continue;
          auto& pn = parents[pi].node();
          pn.ensure_grad();
          const std::int64_t plen = pn.numel() / (outer * inner);
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* g = self.grad.data() + (o * total + offsets[pi]) * inner;
            T* dst = pn.grad.data() + o * plen * inner;
            for (std::int64_t i = 0; i < plen * inner; ++i) dst[i] += g[i];
          }
        }
      });
}

// Select slices along an axis. Indices may repeat; backward scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::int64_t>& indices,
                 int axis) {
  const int rank = x.rank();
  axis = normalize_axis(axis, rank);
  const std::int64_t extent = x.dim(axis);
  for (auto idx : indices)
    if (idx < 0 || idx >= extent)
      throw IndexError("gather: index " + std::to_string(idx) +
                       " out of range for extent " + std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] =
      static_cast<std::int64_t>(indices.size());
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);

  const auto& xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const std::int64_t k = static_cast<std::int64_t>(indices.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < k; ++i)
      std::copy(xv.data() + (o * extent + indices[static_cast<std::size_t>(i)]) * inner,
                xv.data() + (o * extent + indices[static_cast<std::size_t>(i)] + 1) * inner,
                out.data() + (o * k + i) * inner);
  auto xn = x;
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, indices, outer, inner, extent, k](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < k; ++i) {
            const T* g = self.grad.data() + (o * k + i) * inner;
            T* dst = pn.grad.data() +
                     (o * extent + indices[static_cast<std::size_t>(i)]) * inner;
            for (std::int64_t j = 0; j < inner; ++j) dst[j] += g[j];
          }
      });
}

// Per-batch-row gather along axis 1: x [B, N, ...] with indices[b] selecting
// rows of batch element b. All index lists must share one length.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x,
                      const std::vector<std::vector<int>>& indices) {
  if (x.rank() < 2) throw ShapeError("gather_rows: rank must be >= 2");
  const std::int64_t B = x.dim(0);
  if (static_cast<std::int64_t>(indices.size()) != B)
    throw ShapeError("gather_rows: one index list per batch row required");
  const std::int64_t N = x.dim(1);
  const std::int64_t inner = x.numel() / (B * N);
  const std::int64_t k = static_cast<std::int64_t>(indices[0].size());
  for (const auto& list : indices) {
    if (static_cast<std::int64_t>(list.size()) != k)
      throw ShapeError("gather_rows: ragged index lists");
    for (int idx : list)
      if (idx < 0 || idx >= N)
        throw IndexError("gather_rows: index " + std::to_string(idx) +
                         " out of range for extent " + std::to_string(N));
  }
  Shape out_shape = x.shape();
  out_shape[1] = k;
  const auto& xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < k; ++i)
      std::copy(xv.data() + (b * N + indices[static_cast<std::size_t>(b)]
                                           [static_cast<std::size_t>(i)]) * inner,
                xv.data() + (b * N + indices[static_cast<std::size_t>(b)]
                                           [static_cast<std::size_t>(i)] + 1) * inner,
                out.data() + (b * k + i) * inner);
  auto xn = x;
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, indices, B, N, inner, k](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t i = 0; i < k; ++i) {
            const T* g = self.grad.data() + (b * k + i) * inner;
            T* dst = pn.grad.data() + (b * N + indices[static_cast<std::size_t>(b)]
                                                      [static_cast<std::size_t>(i)]) * inner;
            for (std::int64_t j = 0; j < inner; ++j) dst[j] += g[j];
          }
      });
}

// --- reductions -------------------------------------------------------------

enum class Reduce { Sum, Mean, Max };

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, int axis, Reduce op) {
  const int rank = x.rank();
  axis = normalize_axis(axis, rank);
  const std::int64_t extent = x.dim(axis);
  Shape out_shape;
  for (int d = 0; d < rank; ++d)
    if (d != axis) out_shape.push_back(x.dim(d));
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);

  const auto& xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
  std::vector<std::int64_t> argmax;
  if (op == Reduce::Max) {
    argmax.assign(static_cast<std::size_t>(outer * inner), 0);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j < inner; ++j) {
        T best = xv[static_cast<std::size_t>((o * extent) * inner + j)];
        std::int64_t bi = 0;
        for (std::int64_t i = 1; i < extent; ++i) {
          const T v = xv[static_cast<std::size_t>((o * extent + i) * inner + j)];
          if (v > best) {
            best = v;
            bi = i;
          }
        }
        out[static_cast<std::size_t>(o * inner + j)] = best;
        argmax[static_cast<std::size_t>(o * inner + j)] = bi;
      }
  } else {
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < extent; ++i)
        for (std::int64_t j = 0; j < inner; ++j)
          out[static_cast<std::size_t>(o * inner + j)] +=
              xv[static_cast<std::size_t>((o * extent + i) * inner + j)];
    if (op == Reduce::Mean)
      for (auto& v : out) v /= static_cast<T>(extent);
  }

  auto xn = x;
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, op, outer, inner, extent, argmax](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        if (op == Reduce::Max) {
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t j = 0; j < inner; ++j) {
              const std::int64_t bi = argmax[static_cast<std::size_t>(o * inner + j)];
              pn.grad[static_cast<std::size_t>((o * extent + bi) * inner + j)] +=
                  self.grad[static_cast<std::size_t>(o * inner + j)];
            }
          return;
        }
        const T s = op == Reduce::Mean ? T(1) / static_cast<T>(extent) : T(1);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < extent; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
              pn.grad[static_cast<std::size_t>((o * extent + i) * inner + j)] +=
                  s * self.grad[static_cast<std::size_t>(o * inner + j)];
      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto flat = reshape(x, Shape{x.numel()});
  return reduce(flat, 0, Reduce::Sum);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  auto flat = reshape(x, Shape{x.numel()});
  return reduce(flat, 0, Reduce::Mean);
}

// --- matmul -----------------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n]; ikj order, deterministic accumulation.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      if (aip == T(0)) continue;
      T* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

inline Shape broadcast_batch(const Shape& a, const Shape& b) {
  Shape out;
  const std::size_t r = std::max(a.size(), b.size());
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("matmul: batch extents " + shape_str(a) + " vs " +
                       shape_str(b) + " not broadcastable");
    out.push_back(std::max(da, db));
  }
  return out;
}

}  // namespace detail

// Batched contraction over the last two axes; leading axes broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: both inputs need rank >= 2, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t m = a.dim(-2), ka = a.dim(-1);
  const std::int64_t kb = b.dim(-2), n = b.dim(-1);
  if (ka != kb)
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch = detail::broadcast_batch(abatch, bbatch);
  const std::int64_t nb = shape_numel(batch);
  const std::int64_t na_batch = shape_numel(abatch);
  const std::int64_t nb_batch = shape_numel(bbatch);
  // only full-broadcast (extent 1 vs equal) patterns occur with these shapes
  const bool a_bcast = na_batch != nb;
  const bool b_bcast = nb_batch != nb;
  if ((a_bcast && na_batch != 1) || (b_bcast && nb_batch != 1))
    throw ShapeError("matmul: unsupported partial batch broadcast");

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(nb * m * n), T(0));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::int64_t i = 0; i < nb; ++i)
    detail::gemm_nn(av.data() + (a_bcast ? 0 : i * m * ka),
                    bv.data() + (b_bcast ? 0 : i * ka * n), out.data() + i * m * n,
                    m, ka, n);

  auto an = a, bn = b;
  const std::int64_t k = ka;
  return make_result<T>(
      std::move(out_shape), std::move(out), {a, b},
      [an, bn, nb, m, n, k, a_bcast, b_bcast](typename Tensor<T>::Node& self) {
        if (an.requires_grad()) {
          auto& pn = an.node();
          pn.ensure_grad();
          // dA = dC * B^T
          for (std::int64_t i = 0; i < nb; ++i)
            detail::gemm_nt(self.grad.data() + i * m * n,
                            bn.data().data() + (b_bcast ? 0 : i * k * n),
                            pn.grad.data() + (a_bcast ? 0 : i * m * k), m, n, k);
        }
        if (bn.requires_grad()) {
          auto& pn = bn.node();
          pn.ensure_grad();
          // dB = A^T * dC
          for (std::int64_t i = 0; i < nb; ++i)
            detail::gemm_tn(an.data().data() + (a_bcast ? 0 : i * m * k),
                            self.grad.data() + i * m * n,
                            pn.grad.data() + (b_bcast ? 0 : i * k * n), m, k, n);
        }
      });
}

// --- softmax / log-sum-exp / layer norm -------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int rank = x.rank();
  axis = normalize_axis(axis, rank);
  const std::int64_t extent = x.dim(axis);
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);

  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < inner; ++j) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t i = 0; i < extent; ++i)
        mx = std::max(mx, xv[static_cast<std::size_t>((o * extent + i) * inner + j)]);
      T denom = T(0);
      for (std::int64_t i = 0; i < extent; ++i) {
        const T e = std::exp(xv[static_cast<std::size_t>((o * extent + i) * inner + j)] - mx);
        out[static_cast<std::size_t>((o * extent + i) * inner + j)] = e;
        denom += e;
      }
      for (std::int64_t i = 0; i < extent; ++i)
        out[static_cast<std::size_t>((o * extent + i) * inner + j)] /= denom;
    }

  auto xn = x;
  auto result = make_result<T>(
      x.shape(), std::move(out), {x},
      [xn, outer, inner, extent](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        const auto& y = self.value;
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t j = 0; j < inner; ++j) {
            T dot = T(0);
            for (std::int64_t i = 0; i < extent; ++i) {
              const auto idx = static_cast<std::size_t>((o * extent + i) * inner + j);
              dot += self.grad[idx] * y[idx];
            }
            for (std::int64_t i = 0; i < extent; ++i) {
              const auto idx = static_cast<std::size_t>((o * extent + i) * inner + j);
              pn.grad[idx] += y[idx] * (self.grad[idx] - dot);
            }
          }
      });
  return result;
}

template <typename T>
Tensor<T> log_sum_exp(const Tensor<T>& x, int axis) {
  const int rank = x.rank();
  axis = normalize_axis(axis, rank);
  const std::int64_t extent = x.dim(axis);
  Shape out_shape;
  for (int d = 0; d < rank; ++d)
    if (d != axis) out_shape.push_back(x.dim(d));
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);

  const auto& xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(outer * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < inner; ++j) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t i = 0; i < extent; ++i)
        mx = std::max(mx, xv[static_cast<std::size_t>((o * extent + i) * inner + j)]);
      T acc = T(0);
      for (std::int64_t i = 0; i < extent; ++i)
        acc += std::exp(xv[static_cast<std::size_t>((o * extent + i) * inner + j)] - mx);
      out[static_cast<std::size_t>(o * inner + j)] = mx + std::log(acc);
    }

  auto xn = x;
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [xn, outer, inner, extent](typename Tensor<T>::Node& self) {
        if (!xn.requires_grad()) return;
        auto& pn = xn.node();
        pn.ensure_grad();
        const auto& xv = pn.value;
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t j = 0; j < inner; ++j) {
            const T lse = self.value[static_cast<std::size_t>(o * inner + j)];
            const T g = self.grad[static_cast<std::size_t>(o * inner + j)];
            for (std::int64_t i = 0; i < extent; ++i) {
              const auto idx = static_cast<std::size_t>((o * extent + i) * inner + j);
              pn.grad[idx] += g * std::exp(xv[idx] - lse);
            }
          }
      });
}

// Normalizes each trailing-axis row to zero mean / unit variance, then
// applies the per-channel affine. Hand-derived backward.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  const std::int64_t n = x.dim(-1);
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: gain/bias must match the last extent");
  const std::int64_t rows = x.numel() / n;
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T mean = T(0);
    for (std::int64_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::int64_t j = 0; j < n; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * rs;
      xhat[static_cast<std::size_t>(r * n + j)] = h;
      out[static_cast<std::size_t>(r * n + j)] = h * gv[static_cast<std::size_t>(j)] +
                                                 bv[static_cast<std::size_t>(j)];
    }
  }
  auto xn = x, gn = gain, bn = bias;
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, rows, n, xhat = std::move(xhat),
       rstd = std::move(rstd)](typename Tensor<T>::Node& self) {
        const auto& gv = gn.data();
        if (gn.requires_grad()) {
          auto& pg = gn.node();
          pg.ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < n; ++j)
              pg.grad[static_cast<std::size_t>(j)] +=
                  self.grad[static_cast<std::size_t>(r * n + j)] *
                  xhat[static_cast<std::size_t>(r * n + j)];
        }
        if (bn.requires_grad()) {
          auto& pb = bn.node();
          pb.ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < n; ++j)
              pb.grad[static_cast<std::size_t>(j)] +=
                  self.grad[static_cast<std::size_t>(r * n + j)];
        }
        if (xn.requires_grad()) {
          auto& px = xn.node();
          px.ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r) {
            const T rs = rstd[static_cast<std::size_t>(r)];
            T sum_gy = T(0), sum_gyh = T(0);
            for (std::int64_t j = 0; j < n; ++j) {
              const T gy = self.grad[static_cast<std::size_t>(r * n + j)] *
                           gv[static_cast<std::size_t>(j)];
              sum_gy += gy;
              sum_gyh += gy * xhat[static_cast<std::size_t>(r * n + j)];
            }
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::int64_t j = 0; j < n; ++j) {
              const T gy = self.grad[static_cast<std::size_t>(r * n + j)] *
                           gv[static_cast<std::size_t>(j)];
              px.grad[static_cast<std::size_t>(r * n + j)] +=
                  rs * (gy - inv_n * sum_gy -
                        xhat[static_cast<std::size_t>(r * n + j)] * inv_n * sum_gyh);
            }
          }
        }
      });
}

// --- linear / embedding / bias ----------------------------------------------

// x[..., in] + b[in] with trailing broadcast.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const std::int64_t n = x.dim(-1);
  if (b.numel() != n) throw ShapeError("add_bias: bias must match the last extent");
  const std::int64_t rows = x.numel() / n;
  const auto& xv = x.data();
  const auto& bv = b.data();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < n; ++j)
      out[static_cast<std::size_t>(r * n + j)] =
          xv[static_cast<std::size_t>(r * n + j)] + bv[static_cast<std::size_t>(j)];
  auto xn = x, bn = b;
  return make_result<T>(x.shape(), std::move(out), {x, b},
                        [xn, bn, rows, n](typename Tensor<T>::Node& self) {
                          if (xn.requires_grad()) accumulate<T>(xn.node(), self.grad);
                          if (bn.requires_grad()) {
                            auto& pb = bn.node();
                            pb.ensure_grad();
                            for (std::int64_t r = 0; r < rows; ++r)
                              for (std::int64_t j = 0; j < n; ++j)
                                pb.grad[static_cast<std::size_t>(j)] +=
                                    self.grad[static_cast<std::size_t>(r * n + j)];
                          }
                        });
}

// x[..., in] W[in, out] + b[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto flat = reshape(x, Shape{-1, x.dim(-1)});
  auto y = matmul(flat, w);
  y = add_bias(y, b);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(-1);
  return reshape(y, std::move(out_shape));
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table,
                           const std::vector<std::int64_t>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be 2-d");
  return gather(table, ids, 0);
}

// --- grad check --------------------------------------------------------------
//
// Compares reverse-mode gradients against central differences for every
// element of every parameter; denominators floored at 1e-8. The finite
// differences touch only forward evaluations, so this path is independent of
// the backward implementations it validates.

template <typename T>
double grad_check(const std::function<Tensor<T>()>& f,
                  const std::vector<Tensor<T>>& params, T h = T(1e-5)) {
  static_assert(std::is_same_v<T, double>,
                "grad_check is specified for float64 verification");
  for (const auto& p : params) p.node().grad.clear();
  auto loss = f();
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw TrainingDivergence("grad_check: non-finite objective value");
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (!p.has_grad())
      analytic.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    else
      analytic.push_back(p.node().grad);
  }

  double worst = 0.0;
  NoGradGuard ng;  // finite-difference passes do not need graphs
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].node().value;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T saved = vals[i];
      vals[i] = saved + h;
      const double fp = static_cast<double>(f().item());
      vals[i] = saved - h;
      const double fm = static_cast<double>(f().item());
      vals[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw TrainingDivergence("grad_check: non-finite objective under perturbation");
      const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
      const double an = static_cast<double>(analytic[pi][i]);
      // both sides below the floor are indistinguishable from zero (the
      // central difference itself carries ~1e-12 cancellation noise)
      const double mx = std::max(std::abs(fd), std::abs(an));
      if (mx < 1e-8) continue;
      worst = std::max(worst, std::abs(fd - an) / std::max(mx, 1e-8));
    }
  }
  return worst;
}

}  // namespace nd
}  // namespace aclip
