#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a handle to a graph node. Operations record their parents and a
// backward closure; Tensor::backward() orders the reachable graph
// topologically and replays the adjoints exactly once per node. Leaves that
// require gradients accumulate into their grad buffer; intermediate buffers
// are reset on every backward pass so replay is deterministic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nova/errors.hpp"
#include "nova/parallel.hpp"

namespace nova {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<Real>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording for its lifetime (evaluation renders, metrics).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class Real>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<detail::Node<Real>>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<detail::Node<Real>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<Real>(n, value), requires_grad);
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return from(Shape{}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op() const { return node_->op; }

  std::span<const Real> data() const { return node_->data; }
  // Mutation is reserved for optimizers and initializers acting on leaves.
  std::span<Real> mutable_data() { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Real item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  Real operator[](std::size_t i) const { return node_->data[i]; }

  /// Same values, no history, no gradient.
  Tensor detach() const { return from(node_->shape, node_->data, false); }

  Tensor reshape(Shape s) const;

  /// Reverse pass from a scalar root.
  void backward() const {
    if (size() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
    if (!requires_grad()) return;
    auto order = topological_order();
    for (auto* n : order) {
      if (!n->is_leaf) n->grad.assign(n->data.size(), Real(0));
    }
    node_->ensure_grad()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      auto* n = *it;
      if (n->backward_fn) n->backward_fn(*n);
    }
    for (auto* n : order) {
      if (!n->is_leaf) std::vector<Real>().swap(n->grad);
    }
  }

  /// Nodes reachable from this tensor through gradient-carrying edges,
  /// parents before children.
  std::vector<detail::Node<Real>*> topological_order() const {
    std::vector<detail::Node<Real>*> order;
    std::unordered_set<detail::Node<Real>*> seen;
    std::vector<std::pair<detail::Node<Real>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        auto* p = n->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

namespace detail {

#ifdef NOVA_CHECK_FINITE
template <class Real>
inline void check_finite(const std::vector<Real>& v, const char* op) {
  for (auto x : v) {
    if (!std::isfinite(x)) throw EvaluationError(std::string("non-finite output from ") + op);
  }
}
#else
template <class Real>
inline void check_finite(const std::vector<Real>&, const char*) {}
#endif

/// Builds the output node of an op. `backward` receives the output node and
/// must accumulate into parents that require gradients.
template <class Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> data,
                         std::vector<Tensor<Real>> inputs,
                         std::function<void(Node<Real>&)> backward) {
  check_finite(data, op);
  auto n = std::make_shared<Node<Real>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->is_leaf = false;
  bool any = false;
  for (auto& t : inputs) any = any || t.requires_grad();
  if (any && grad_enabled()) {
    n->requires_grad = true;
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward);
  }
  return Tensor<Real>(std::move(n));
}

template <class Real>
inline Node<Real>& parent(Node<Real>& n, std::size_t i) {
  return *n.parents[i];
}

template <class Real>
inline void require_rank(const Tensor<Real>& t, std::size_t r, const char* what) {
  if (t.rank() != r) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

template <class Real>
inline void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

template <class Real>
Tensor<Real> Tensor<Real>::reshape(Shape s) const {
  if (shape_size(s) != size()) {
    throw DimensionError("reshape " + shape_str(shape()) + " -> " + shape_str(s));
  }
  return detail::make_result<Real>("reshape", std::move(s), node_->data, {*this},
                                    [](detail::Node<Real>& out) {
                                      auto& p = detail::parent(out, 0);
                                      if (!p.requires_grad) return;
                                      auto& g = p.ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                                    });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class Real, class Fwd, class Deriv>
Tensor<Real> unary(const char* op, const Tensor<Real>& a, Fwd f, Deriv df) {
  std::vector<Real> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<Real>(op, a.shape(), std::move(out), {a}, [df](Node<Real>& o) {
    auto& p = parent(o, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(p.data[i], o.data[i]);
  });
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<Real>("add", a.shape(), std::move(out), {a, b}, [](detail::Node<Real>& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = detail::parent(o, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<Real>("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<Real>& o) {
    auto& pa = detail::parent(o, 0);
    auto& pb = detail::parent(o, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<Real>("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<Real>& o) {
    auto& pa = detail::parent(o, 0);
    auto& pb = detail::parent(o, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.data[i];
    }
  });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  return detail::unary<Real>("scale", a, [s](Real x) { return s * x; },
                             [s](Real, Real) { return s; });
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real s) {
  return detail::unary<Real>("add_scalar", a, [s](Real x) { return x + s; },
                             [](Real, Real) { return Real(1); });
}

template <class Real>
Tensor<Real> square(const Tensor<Real>& a) {
  return detail::unary<Real>("square", a, [](Real x) { return x * x; },
                             [](Real x, Real) { return Real(2) * x; });
}

template <class Real>
Tensor<Real> abs(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "abs", a, [](Real x) { return std::abs(x); },
      [](Real x, Real) { return x > 0 ? Real(1) : (x < 0 ? Real(-1) : Real(0)); });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& a) {
  return detail::unary<Real>("exp", a, [](Real x) { return std::exp(x); },
                             [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> softplus(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "softplus", a,
      [](Real x) { return std::max(x, Real(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](Real x, Real) {
        return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
      });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary<Real>(
      "sigmoid", a,
      [](Real x) {
        return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> leaky_relu(const Tensor<Real>& a, Real slope) {
  return detail::unary<Real>("leaky_relu", a, [slope](Real x) { return x > 0 ? x : slope * x; },
                             [slope](Real x, Real) { return x > 0 ? Real(1) : slope; });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (auto x : a.data()) s += x;
  return detail::make_result<Real>("sum", Shape{}, {s}, {a}, [](detail::Node<Real>& o) {
    auto& p = detail::parent(o, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (auto& x : g) x += o.grad[0];
  });
}

template <class Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  if (a.size() == 0) return Tensor<Real>::scalar(0);
  return scale(sum(a), Real(1) / Real(a.size()));
}

/// Sum of a list of scalars in list order.
template <class Real>
Tensor<Real> add_n(const std::vector<Tensor<Real>>& terms) {
  if (terms.empty()) return Tensor<Real>::scalar(0);
  Tensor<Real> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// ---------------------------------------------------------------------------
// Matrix ops (rank-2, row-major)

/// out[i,j] = sum_k x[i,k] w[k,j] + b[j]
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  detail::require_rank(x, 2, "linear(x)");
  detail::require_rank(w, 2, "linear(w)");
  if (x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: inner dimensions disagree, x " + shape_str(x.shape()) + " w " +
                         shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(1);
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != dout)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match w " +
                         shape_str(w.shape()));
  }
  std::vector<Real> out(n * dout);
  {
    const Real* xp = x.data().data();
    const Real* wp = w.data().data();
    const Real* bp = has_bias ? b.data().data() : nullptr;
    parallel_for(n, 256, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        Real* o = out.data() + i * dout;
        for (std::size_t j = 0; j < dout; ++j) o[j] = bp ? bp[j] : Real(0);
        for (std::size_t k = 0; k < din; ++k) {
          const Real xv = xp[i * din + k];
          const Real* wr = wp + k * dout;
          for (std::size_t j = 0; j < dout; ++j) o[j] += xv * wr[j];
        }
      }
    });
  }
  std::vector<Tensor<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return detail::make_result<Real>(
      "linear", Shape{n, dout}, std::move(out), std::move(inputs),
      [n, din, dout, has_bias](detail::Node<Real>& o) {
        auto& px = detail::parent(o, 0);
        auto& pw = detail::parent(o, 1);
        const Real* gy = o.grad.data();
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          std::vector<Real> wt(din * dout);
          for (std::size_t k = 0; k < din; ++k)
            for (std::size_t j = 0; j < dout; ++j) wt[j * din + k] = pw.data[k * dout + j];
          parallel_for(n, 256, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
              Real* g = gx.data() + i * din;
              for (std::size_t j = 0; j < dout; ++j) {
                const Real gv = gy[i * dout + j];
                const Real* wr = wt.data() + j * din;
                for (std::size_t k = 0; k < din; ++k) g[k] += gv * wr[k];
              }
            }
          });
        }
        if (pw.requires_grad) {
          auto& gw = pw.ensure_grad();
          ordered_reduce(n, gw, [&](std::size_t lo, std::size_t hi, std::vector<Real>& acc) {
            for (std::size_t i = lo; i < hi; ++i) {
              for (std::size_t k = 0; k < din; ++k) {
                const Real xv = px.data[i * din + k];
                Real* a = acc.data() + k * dout;
                const Real* g = gy + i * dout;
                for (std::size_t j = 0; j < dout; ++j) a[j] += xv * g[j];
              }
            }
          });
        }
        if (has_bias) {
          auto& pb = detail::parent(o, 2);
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < dout; ++j) gb[j] += gy[i * dout + j];
          }
        }
      });
}

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return linear(a, b, Tensor<Real>());
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<Real> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return detail::make_result<Real>("transpose", Shape{c, r}, std::move(out), {a},
                                   [r, c](detail::Node<Real>& o) {
                                     auto& p = detail::parent(o, 0);
                                     if (!p.requires_grad) return;
                                     auto& g = p.ensure_grad();
                                     for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
                                   });
}

/// Row-wise softmax with max subtraction.
template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (m == 0) throw DimensionError("softmax_rows: rows must be non-empty");
  std::vector<Real> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const Real* r = x.data().data() + i * m;
    Real* o = out.data() + i * m;
    Real mx = *std::max_element(r, r + m);
    Real s = 0;
    for (std::size_t j = 0; j < m; ++j) s += (o[j] = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < m; ++j) o[j] /= s;
  }
  return detail::make_result<Real>("softmax_rows", x.shape(), std::move(out), {x},
                                   [n, m](detail::Node<Real>& o) {
                                     auto& p = detail::parent(o, 0);
                                     if (!p.requires_grad) return;
                                     auto& g = p.ensure_grad();
                                     for (std::size_t i = 0; i < n; ++i) {
                                       const Real* y = o.data.data() + i * m;
                                       const Real* gy = o.grad.data() + i * m;
                                       Real dot = 0;
                                       for (std::size_t j = 0; j < m; ++j) dot += y[j] * gy[j];
                                       for (std::size_t j = 0; j < m; ++j) g[i * m + j] += y[j] * (gy[j] - dot);
                                     }
                                   });
}

/// Column concatenation of two rank-2 tensors with equal row counts.
template <class Real>
Tensor<Real> concat_cols(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank(a, 2, "concat_cols(a)");
  detail::require_rank(b, 2, "concat_cols(b)");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), c = ca + cb;
  std::vector<Real> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * c);
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * c + ca);
  }
  return detail::make_result<Real>("concat_cols", Shape{n, c}, std::move(out), {a, b},
                                   [n, ca, cb, c](detail::Node<Real>& o) {
                                     auto& pa = detail::parent(o, 0);
                                     auto& pb = detail::parent(o, 1);
                                     if (pa.requires_grad) {
                                       auto& g = pa.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += o.grad[i * c + j];
                                     }
                                     if (pb.requires_grad) {
                                       auto& g = pb.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += o.grad[i * c + ca + j];
                                     }
                                   });
}

/// Columns [begin, end) of a rank-2 tensor.
template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_cols");
  if (begin > end || end > a.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<Real> out(n * w);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(a.data().data() + i * c + begin, w, out.data() + i * w);
  return detail::make_result<Real>("slice_cols", Shape{n, w}, std::move(out), {a},
                                   [n, c, w, begin](detail::Node<Real>& o) {
                                     auto& p = detail::parent(o, 0);
                                     if (!p.requires_grad) return;
                                     auto& g = p.ensure_grad();
                                     for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += o.grad[i * w + j];
                                   });
}

/// Rows [begin, end) of a rank-2 tensor.
template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.dim(0)) {
    throw DimensionError("slice_rows: range outside " + shape_str(a.shape()));
  }
  const std::size_t c = a.dim(1);
  std::vector<Real> out(a.data().begin() + begin * c, a.data().begin() + end * c);
  return detail::make_result<Real>("slice_rows", Shape{end - begin, c}, std::move(out), {a},
                                   [begin, c](detail::Node<Real>& o) {
                                     auto& p = detail::parent(o, 0);
                                     if (!p.requires_grad) return;
                                     auto& g = p.ensure_grad();
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * c + i] += o.grad[i];
                                   });
}

/// out[i] = sum_j a[i,j] b[i,j], shape [N x 1].
template <class Real>
Tensor<Real> row_dot(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank(a, 2, "row_dot");
  detail::require_same_shape(a, b, "row_dot");
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += a[i * c + j] * b[i * c + j];
    out[i] = s;
  }
  return detail::make_result<Real>("row_dot", Shape{n, 1}, std::move(out), {a, b},
                                   [n, c](detail::Node<Real>& o) {
                                     auto& pa = detail::parent(o, 0);
                                     auto& pb = detail::parent(o, 1);
                                     if (pa.requires_grad) {
                                       auto& g = pa.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i] * pb.data[i * c + j];
                                     }
                                     if (pb.requires_grad) {
                                       auto& g = pb.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i] * pa.data[i * c + j];
                                     }
                                   });
}

/// out[i,j] = a[i,j] * s[i,0]
template <class Real>
Tensor<Real> mul_col(const Tensor<Real>& a, const Tensor<Real>& s) {
  detail::require_rank(a, 2, "mul_col");
  if (s.rank() != 2 || s.dim(1) != 1 || s.dim(0) != a.dim(0)) {
    throw DimensionError("mul_col: " + shape_str(a.shape()) + " by " + shape_str(s.shape()));
  }
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<Real> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * s[i];
  return detail::make_result<Real>("mul_col", a.shape(), std::move(out), {a, s},
                                   [n, c](detail::Node<Real>& o) {
                                     auto& pa = detail::parent(o, 0);
                                     auto& ps = detail::parent(o, 1);
                                     if (pa.requires_grad) {
                                       auto& g = pa.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i)
                                         for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] * ps.data[i];
                                     }
                                     if (ps.requires_grad) {
                                       auto& g = ps.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i) {
                                         Real acc = 0;
                                         for (std::size_t j = 0; j < c; ++j) acc += o.grad[i * c + j] * pa.data[i * c + j];
                                         g[i] += acc;
                                       }
                                     }
                                   });
}

/// Scaled dot-product attention applied independently to consecutive blocks
/// of `block` rows: for each block, softmax(Q K^T * scale) V.
template <class Real>
Tensor<Real> block_attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                             std::size_t block, Real scale_factor) {
  detail::require_rank(q, 2, "block_attention(q)");
  detail::require_same_shape(q, k, "block_attention(q,k)");
  detail::require_rank(v, 2, "block_attention(v)");
  if (v.dim(0) != q.dim(0)) throw DimensionError("block_attention: v rows " + shape_str(v.shape()));
  const std::size_t n = q.dim(0), dk = q.dim(1), dv = v.dim(1);
  if (block == 0 || n % block != 0) {
    throw DimensionError("block_attention: " + std::to_string(n) + " rows not divisible by block " +
                         std::to_string(block));
  }
  const std::size_t nb = n / block;
  // attention weights are kept for the backward pass
  auto weights = std::make_shared<std::vector<Real>>(nb * block * block);
  std::vector<Real> out(n * dv, Real(0));
  parallel_for(nb, 8, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bi = lo; bi < hi; ++bi) {
      const std::size_t r0 = bi * block;
      Real* a = weights->data() + bi * block * block;
      for (std::size_t i = 0; i < block; ++i) {
        const Real* qi = q.data().data() + (r0 + i) * dk;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < block; ++j) {
          const Real* kj = k.data().data() + (r0 + j) * dk;
          Real s = 0;
          for (std::size_t t = 0; t < dk; ++t) s += qi[t] * kj[t];
          a[i * block + j] = s * scale_factor;
          mx = std::max(mx, a[i * block + j]);
        }
        Real z = 0;
        for (std::size_t j = 0; j < block; ++j) z += (a[i * block + j] = std::exp(a[i * block + j] - mx));
        for (std::size_t j = 0; j < block; ++j) a[i * block + j] /= z;
        Real* oi = out.data() + (r0 + i) * dv;
        for (std::size_t j = 0; j < block; ++j) {
          const Real w = a[i * block + j];
          const Real* vj = v.data().data() + (r0 + j) * dv;
          for (std::size_t t = 0; t < dv; ++t) oi[t] += w * vj[t];
        }
      }
    }
  });
  return detail::make_result<Real>(
      "block_attention", Shape{n, dv}, std::move(out), {q, k, v},
      [weights, block, nb, dk, dv, scale_factor](detail::Node<Real>& o) {
        auto& pq = detail::parent(o, 0);
        auto& pk = detail::parent(o, 1);
        auto& pv = detail::parent(o, 2);
        std::vector<Real>* gq = pq.requires_grad ? &pq.ensure_grad() : nullptr;
        std::vector<Real>* gk = pk.requires_grad ? &pk.ensure_grad() : nullptr;
        std::vector<Real>* gv = pv.requires_grad ? &pv.ensure_grad() : nullptr;
        std::vector<Real> ga(block), gs(block);
        for (std::size_t bi = 0; bi < nb; ++bi) {
          const std::size_t r0 = bi * block;
          const Real* a = weights->data() + bi * block * block;
          for (std::size_t i = 0; i < block; ++i) {
            const Real* go = o.grad.data() + (r0 + i) * dv;
            Real dot = 0;
            for (std::size_t j = 0; j < block; ++j) {
              const Real* vj = pv.data.data() + (r0 + j) * dv;
              Real s = 0;
              for (std::size_t t = 0; t < dv; ++t) s += go[t] * vj[t];
              ga[j] = s;
              dot += s * a[i * block + j];
              if (gv) {
                Real* g = gv->data() + (r0 + j) * dv;
                for (std::size_t t = 0; t < dv; ++t) g[t] += a[i * block + j] * go[t];
              }
            }
            for (std::size_t j = 0; j < block; ++j) gs[j] = a[i * block + j] * (ga[j] - dot) * scale_factor;
            for (std::size_t j = 0; j < block; ++j) {
              if (gq) {
                Real* g = gq->data() + (r0 + i) * dk;
                const Real* kj = pk.data.data() + (r0 + j) * dk;
                for (std::size_t t = 0; t < dk; ++t) g[t] += gs[j] * kj[t];
              }
              if (gk) {
                Real* g = gk->data() + (r0 + j) * dk;
                const Real* qi = pq.data.data() + (r0 + i) * dk;
                for (std::size_t t = 0; t < dk; ++t) g[t] += gs[j] * qi[t];
              }
            }
          }
        }
      });
}

/// Attention weights of block_attention, for diagnostics. Not differentiable.
template <class Real>
std::vector<Real> block_attention_weights(const Tensor<Real>& q, const Tensor<Real>& k, std::size_t block,
                                          Real scale_factor) {
  const std::size_t n = q.dim(0), dk = q.dim(1);
  std::vector<Real> w(n * block);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t r0 = (r / block) * block;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < block; ++j) {
      Real s = 0;
      for (std::size_t t = 0; t < dk; ++t) s += q[r * dk + t] * k[(r0 + j) * dk + t];
      w[r * block + j] = s * scale_factor;
      mx = std::max(mx, w[r * block + j]);
    }
    Real z = 0;
    for (std::size_t j = 0; j < block; ++j) z += (w[r * block + j] = std::exp(w[r * block + j] - mx));
    for (std::size_t j = 0; j < block; ++j) w[r * block + j] /= z;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Sampling

/// Bilinear lookup in a [R x R x C] plane at normalized coordinates in
/// [-1, 1]^2 (u along columns, v along rows, grid nodes at the extremes).
/// Out-of-range coordinates clamp to the border. No gradient to uv.
template <class Real>
Tensor<Real> bilinear_sample(const Tensor<Real>& plane, std::span<const Real> uv) {
  detail::require_rank(plane, 3, "bilinear_sample");
  const std::size_t r = plane.dim(0), c = plane.dim(2);
  if (plane.dim(1) != r || r < 2) {
    throw DimensionError("bilinear_sample: plane must be square with R >= 2, got " + shape_str(plane.shape()));
  }
  if (uv.size() % 2 != 0) throw DimensionError("bilinear_sample: uv must be N x 2");
  const std::size_t n = uv.size() / 2;
  struct Tap {
    std::size_t i0, j0;
    Real fu, fv;
  };
  auto taps = std::make_shared<std::vector<Tap>>(n);
  const Real hi = Real(r - 1);
  for (std::size_t p = 0; p < n; ++p) {
    Real x = std::clamp((uv[2 * p] + Real(1)) * Real(0.5) * hi, Real(0), hi);
    Real y = std::clamp((uv[2 * p + 1] + Real(1)) * Real(0.5) * hi, Real(0), hi);
    std::size_t j0 = std::min(static_cast<std::size_t>(x), r - 2);
    std::size_t i0 = std::min(static_cast<std::size_t>(y), r - 2);
    (*taps)[p] = {i0, j0, x - Real(j0), y - Real(i0)};
  }
  std::vector<Real> out(n * c);
  const Real* pd = plane.data().data();
  parallel_for(n, 1024, [&](std::size_t lo, std::size_t hi_) {
    for (std::size_t p = lo; p < hi_; ++p) {
      const auto& t = (*taps)[p];
      const Real w00 = (1 - t.fu) * (1 - t.fv), w01 = t.fu * (1 - t.fv);
      const Real w10 = (1 - t.fu) * t.fv, w11 = t.fu * t.fv;
      const Real* a = pd + (t.i0 * r + t.j0) * c;
      const Real* b = a + c;
      const Real* d = a + r * c;
      const Real* e = d + c;
      Real* o = out.data() + p * c;
      for (std::size_t k = 0; k < c; ++k) o[k] = w00 * a[k] + w01 * b[k] + w10 * d[k] + w11 * e[k];
    }
  });
  return detail::make_result<Real>("bilinear_sample", Shape{n, c}, std::move(out), {plane},
                                   [taps, r, c](detail::Node<Real>& o) {
                                     auto& p = detail::parent(o, 0);
                                     if (!p.requires_grad) return;
                                     auto& g = p.ensure_grad();
                                     for (std::size_t q = 0; q < taps->size(); ++q) {
                                       const auto& t = (*taps)[q];
                                       const Real w00 = (1 - t.fu) * (1 - t.fv), w01 = t.fu * (1 - t.fv);
                                       const Real w10 = (1 - t.fu) * t.fv, w11 = t.fu * t.fv;
                                       Real* a = g.data() + (t.i0 * r + t.j0) * c;
                                       Real* b = a + c;
                                       Real* d = a + r * c;
                                       Real* e = d + c;
                                       const Real* go = o.grad.data() + q * c;
                                       for (std::size_t k = 0; k < c; ++k) {
                                         a[k] += w00 * go[k];
                                         b[k] += w01 * go[k];
                                         d[k] += w10 * go[k];
                                         e[k] += w11 * go[k];
                                       }
                                     }
                                   });
}

}  // namespace nova
