#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mimseq/common.hpp"
#include "mimseq/rng.hpp"

namespace mimseq {

namespace detail {
// Reverse-mode recording is on by default; NoGradGuard switches it off for
// evaluation passes and finite-difference probes.
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
using EigenRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<EigenRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const EigenRM<S>>;

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated on first use, same length as data
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl<S>>> parents;
  std::function<void(const TensorImpl<S>&)> backprop;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

// Dense row-major tensor with reverse-mode automatic differentiation.
// Copies are shallow (shared storage and graph node); use detach() or
// clone-style constructors for independent values.
template <typename S>
class Tensor {
 public:
  using Impl = TensorImpl<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }

  static Tensor full(Shape shape, S value) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(size_t(numel_of(t.impl_->shape)), value);
    return t;
  }

  static Tensor scalar(S value) { return full({1}, value); }

  static Tensor from(Shape shape, std::vector<S> data) {
    if (long(data.size()) != numel_of(shape))
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor uniform(Shape shape, RngStream& rng, S lo, S hi) {
    Tensor t = zeros(std::move(shape));
    for (S& v : t.impl_->data) v = S(rng.uniform(double(lo), double(hi)));
    return t;
  }

  static Tensor randn(Shape shape, RngStream& rng, S stddev = S(1)) {
    Tensor t = zeros(std::move(shape));
    for (S& v : t.impl_->data) v = S(rng.normal() * double(stddev));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  long rank() const { return long(impl_->shape.size()); }
  long numel() const { return long(impl_->data.size()); }
  long extent(long axis) const { return impl_->shape[size_t(axis)]; }

  const std::vector<S>& values() const { return impl_->data; }
  std::vector<S>& values() { return impl_->data; }

  S item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return impl_->data[0];
  }

  // Element access by multi-index (row-major).
  S at(const std::vector<long>& idx) const {
    long off = 0;
    for (size_t d = 0; d < idx.size(); ++d) off = off * impl_->shape[d] + idx[d];
    return impl_->data[size_t(off)];
  }

  bool requires_grad() const { return impl_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    if (v) impl_->ensure_grad();
    return *this;
  }

  const std::vector<S>& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.assign(impl_->data.size(), S(0)); }

  // Leaf copy of the current values, cut off from the recorded graph.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

  const char* op() const { return impl_->op; }

  // Reverse pass from a scalar. Leaf gradients accumulate additively across
  // calls until explicitly zeroed; interior node gradients are per-pass.
  void backward() const {
    if (numel() != 1)
      throw ShapeError(std::string("backward: loss must be scalar, got ") +
                       shape_str(shape()));
    std::vector<Impl*> order;
    topo_order(order);
    for (Impl* node : order) {
      if (node->backprop) node->grad.assign(node->data.size(), S(0));
    }
    impl_->ensure_grad();
    impl_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop(**it);
    }
  }

  // Forward-topological order of the recorded subgraph that requires grad.
  void topo_order(std::vector<Impl*>& order) const {
    std::unordered_set<Impl*> seen;
    std::vector<std::pair<Impl*, size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    seen.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Impl* p = node->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Named trainable tensor. The gradient buffer lives inside the value tensor
// and keeps the value's shape; zero_grad() resets it.
template <typename S>
struct Parameter {
  Tensor<S> value;
  std::string name;

  Parameter() = default;
  Parameter(Tensor<S> v, std::string n) : value(std::move(v)), name(std::move(n)) {
    value.set_requires_grad(true);
  }

  const std::vector<S>& grad() const { return value.grad(); }
  void zero_grad() { value.zero_grad(); }
  long numel() const { return value.numel(); }
};

namespace detail {

template <typename S>
Tensor<S> make_node(const char* op, Shape shape, std::vector<S> data,
                    std::vector<Tensor<S>> inputs,
                    std::function<void(const TensorImpl<S>&)> backprop) {
  Tensor<S> out = Tensor<S>::from(std::move(shape), std::move(data));
  out.impl()->op = op;
  bool rec = grad_enabled();
  if (rec) {
    rec = false;
    for (const auto& in : inputs) rec = rec || in.impl()->requires_grad;
  }
  if (rec) {
    out.impl()->requires_grad = true;
    for (const auto& in : inputs) out.impl()->parents.push_back(in.impl());
    out.impl()->backprop = std::move(backprop);
  }
  return out;
}

template <typename S>
void accumulate(const std::shared_ptr<TensorImpl<S>>& target, const std::vector<S>& delta) {
  if (!target->requires_grad) return;
  target->ensure_grad();
  for (size_t i = 0; i < delta.size(); ++i) target->grad[i] += delta[i];
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a) +
                     " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise primitives
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a.shape(), b.shape());
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_node<S>("add", a.shape(), std::move(out), {a, b},
                              [ai, bi](const TensorImpl<S>& self) {
                                detail::accumulate(ai, self.grad);
                                detail::accumulate(bi, self.grad);
                              });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a.shape(), b.shape());
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_node<S>("sub", a.shape(), std::move(out), {a, b},
                              [ai, bi](const TensorImpl<S>& self) {
                                detail::accumulate(ai, self.grad);
                                if (bi->requires_grad) {
                                  bi->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                    bi->grad[i] -= self.grad[i];
                                }
                              });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a.shape(), b.shape());
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_node<S>("mul", a.shape(), std::move(out), {a, b},
                              [ai, bi](const TensorImpl<S>& self) {
                                if (ai->requires_grad) {
                                  ai->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                    ai->grad[i] += self.grad[i] * bi->data[i];
                                }
                                if (bi->requires_grad) {
                                  bi->ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                    bi->grad[i] += self.grad[i] * ai->data[i];
                                }
                              });
}

// out = scale * x + shift, element-wise with scalar coefficients.
template <typename S>
Tensor<S> affine(const Tensor<S>& x, S scale, S shift) {
  std::vector<S> out(x.values());
  for (S& v : out) v = scale * v + shift;
  auto xi = x.impl();
  return detail::make_node<S>("affine", x.shape(), std::move(out), {x},
                              [xi, scale](const TensorImpl<S>& self) {
                                if (!xi->requires_grad) return;
                                xi->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  xi->grad[i] += scale * self.grad[i];
                              });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (S& v : out) v = v > S(0) ? v : S(0);
  auto xi = x.impl();
  return detail::make_node<S>("relu", x.shape(), std::move(out), {x},
                              [xi](const TensorImpl<S>& self) {
                                if (!xi->requires_grad) return;
                                xi->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  if (xi->data[i] > S(0)) xi->grad[i] += self.grad[i];
                              });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (S& v : out) {
    // Overflow-safe logistic.
    if (v >= S(0)) {
      const S e = std::exp(-v);
      v = S(1) / (S(1) + e);
    } else {
      const S e = std::exp(v);
      v = e / (S(1) + e);
    }
  }
  auto xi = x.impl();
  return detail::make_node<S>(
      "sigmoid", x.shape(), std::move(out), {x},
      [xi](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
          const S y = self.data[i];
          xi->grad[i] += self.grad[i] * y * (S(1) - y);
        }
      });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (S& v : out) v = std::tanh(v);
  auto xi = x.impl();
  return detail::make_node<S>(
      "tanh", x.shape(), std::move(out), {x},
      [xi](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
          const S y = self.data[i];
          xi->grad[i] += self.grad[i] * (S(1) - y * y);
        }
      });
}

// softplus(x) = log(1 + e^x), computed as max(x,0) + log1p(e^-|x|).
template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (S& v : out) v = std::max(v, S(0)) + S(std::log1p(std::exp(-std::abs(double(v)))));
  auto xi = x.impl();
  return detail::make_node<S>(
      "softplus", x.shape(), std::move(out), {x},
      [xi](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
          const S v = xi->data[i];
          const S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                                  : std::exp(v) / (S(1) + std::exp(v));
          xi->grad[i] += self.grad[i] * sig;
        }
      });
}

// Natural log; callers clamp into a positive domain first.
template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  std::vector<S> out(x.values());
  for (S& v : out) v = std::log(v);
  auto xi = x.impl();
  return detail::make_node<S>("log", x.shape(), std::move(out), {x},
                              [xi](const TensorImpl<S>& self) {
                                if (!xi->requires_grad) return;
                                xi->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  xi->grad[i] += self.grad[i] / xi->data[i];
                              });
}

// Clamp to [lo, hi]; gradient passes through strictly inside the range.
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  std::vector<S> out(x.values());
  for (S& v : out) v = v < lo ? lo : (v > hi ? hi : v);
  auto xi = x.impl();
  return detail::make_node<S>("clamp", x.shape(), std::move(out), {x},
                              [xi, lo, hi](const TensorImpl<S>& self) {
                                if (!xi->requires_grad) return;
                                xi->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i) {
                                  const S v = xi->data[i];
                                  if (v > lo && v < hi) xi->grad[i] += self.grad[i];
                                }
                              });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const long m = a.extent(0), k = a.extent(1), n = b.extent(1);
  std::vector<S> out(size_t(m * n));
  MapRM<S>(out.data(), m, n).noalias() =
      CMapRM<S>(a.values().data(), m, k) * CMapRM<S>(b.values().data(), k, n);
  auto ai = a.impl(), bi = b.impl();
  return detail::make_node<S>(
      "matmul", {m, n}, std::move(out), {a, b},
      [ai, bi, m, k, n](const TensorImpl<S>& self) {
        CMapRM<S> g(self.grad.data(), m, n);
        if (ai->requires_grad) {
          ai->ensure_grad();
          MapRM<S>(ai->grad.data(), m, k).noalias() +=
              g * CMapRM<S>(bi->data.data(), k, n).transpose();
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          MapRM<S>(bi->grad.data(), k, n).noalias() +=
              CMapRM<S>(ai->data.data(), m, k).transpose() * g;
        }
      });
}

// X (R,C) + bias (C) broadcast over rows.
template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.extent(1) != bias.extent(0))
    throw ShapeError("add_row_bias: shapes " + shape_str(x.shape()) + " and " +
                     shape_str(bias.shape()));
  const long r = x.extent(0), c = x.extent(1);
  std::vector<S> out(x.values());
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) out[size_t(i * c + j)] += bias.values()[size_t(j)];
  auto xi = x.impl(), bi = bias.impl();
  return detail::make_node<S>(
      "add_row_bias", x.shape(), std::move(out), {x, bias},
      [xi, bi, r, c](const TensorImpl<S>& self) {
        detail::accumulate(xi, self.grad);
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (long i = 0; i < r; ++i)
            for (long j = 0; j < c; ++j) bi->grad[size_t(j)] += self.grad[size_t(i * c + j)];
        }
      });
}

// X (R,C) with row r scaled by s[r].
template <typename S>
Tensor<S> row_scale(const Tensor<S>& x, const Tensor<S>& s) {
  if (x.rank() != 2 || s.rank() != 1 || x.extent(0) != s.extent(0))
    throw ShapeError("row_scale: shapes " + shape_str(x.shape()) + " and " +
                     shape_str(s.shape()));
  const long r = x.extent(0), c = x.extent(1);
  std::vector<S> out(x.values());
  for (long i = 0; i < r; ++i) {
    const S f = s.values()[size_t(i)];
    for (long j = 0; j < c; ++j) out[size_t(i * c + j)] *= f;
  }
  auto xi = x.impl(), si = s.impl();
  return detail::make_node<S>(
      "row_scale", x.shape(), std::move(out), {x, s},
      [xi, si, r, c](const TensorImpl<S>& self) {
        if (xi->requires_grad) {
          xi->ensure_grad();
          for (long i = 0; i < r; ++i) {
            const S f = si->data[size_t(i)];
            for (long j = 0; j < c; ++j)
              xi->grad[size_t(i * c + j)] += self.grad[size_t(i * c + j)] * f;
          }
        }
        if (si->requires_grad) {
          si->ensure_grad();
          for (long i = 0; i < r; ++i) {
            S acc = S(0);
            for (long j = 0; j < c; ++j)
              acc += self.grad[size_t(i * c + j)] * xi->data[size_t(i * c + j)];
            si->grad[size_t(i)] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and softmax
// ---------------------------------------------------------------------------

namespace detail {

struct ReducePlan {
  Shape out_shape;
  std::vector<long> out_stride;  // per input axis; 0 on reduced axes
  long count = 1;                // number of elements folded into each output
};

inline ReducePlan make_reduce_plan(const Shape& shape, std::vector<long> axes) {
  const long rank = long(shape.size());
  std::sort(axes.begin(), axes.end());
  std::vector<bool> reduced(size_t(rank), false);
  long prev = -1;
  for (long a : axes) {
    if (a < 0 || a >= rank)
      throw ShapeError("reduce: axis " + std::to_string(a) + " out of range for " +
                       shape_str(shape));
    if (a == prev) throw ShapeError("reduce: duplicate axis " + std::to_string(a));
    prev = a;
    reduced[size_t(a)] = true;
  }
  ReducePlan plan;
  for (long d = 0; d < rank; ++d) {
    if (reduced[size_t(d)])
      plan.count *= shape[size_t(d)];
    else
      plan.out_shape.push_back(shape[size_t(d)]);
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};
  // Row-major strides of the kept axes inside the output.
  plan.out_stride.assign(size_t(rank), 0);
  long stride = 1;
  for (long d = rank - 1; d >= 0; --d) {
    if (!reduced[size_t(d)]) {
      plan.out_stride[size_t(d)] = stride;
      stride *= shape[size_t(d)];
    }
  }
  return plan;
}

// Calls fn(input_index, output_index) over all input elements.
template <typename F>
void for_each_reduce(const Shape& shape, const ReducePlan& plan, F&& fn) {
  const long rank = long(shape.size());
  const long n = numel_of(shape);
  std::vector<long> coord(size_t(rank), 0);
  long oidx = 0;
  for (long i = 0; i < n; ++i) {
    fn(i, oidx);
    for (long d = rank - 1; d >= 0; --d) {
      coord[size_t(d)]++;
      oidx += plan.out_stride[size_t(d)];
      if (coord[size_t(d)] < shape[size_t(d)]) break;
      coord[size_t(d)] = 0;
      oidx -= shape[size_t(d)] * plan.out_stride[size_t(d)];
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> sum_axes(const Tensor<S>& x, const std::vector<long>& axes) {
  const auto plan = detail::make_reduce_plan(x.shape(), axes);
  std::vector<S> out(size_t(numel_of(plan.out_shape)), S(0));
  detail::for_each_reduce(x.shape(), plan, [&](long i, long o) {
    out[size_t(o)] += x.values()[size_t(i)];
  });
  auto xi = x.impl();
  const Shape in_shape = x.shape();
  return detail::make_node<S>(
      "sum_axes", plan.out_shape, std::move(out), {x},
      [xi, in_shape, plan](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        detail::for_each_reduce(in_shape, plan, [&](long i, long o) {
          xi->grad[size_t(i)] += self.grad[size_t(o)];
        });
      });
}

template <typename S>
Tensor<S> mean_axes(const Tensor<S>& x, const std::vector<long>& axes) {
  const auto plan = detail::make_reduce_plan(x.shape(), axes);
  const S inv = S(1) / S(plan.count);
  std::vector<S> out(size_t(numel_of(plan.out_shape)), S(0));
  detail::for_each_reduce(x.shape(), plan, [&](long i, long o) {
    out[size_t(o)] += x.values()[size_t(i)];
  });
  for (S& v : out) v *= inv;
  auto xi = x.impl();
  const Shape in_shape = x.shape();
  return detail::make_node<S>(
      "mean_axes", plan.out_shape, std::move(out), {x},
      [xi, in_shape, plan, inv](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        detail::for_each_reduce(in_shape, plan, [&](long i, long o) {
          xi->grad[size_t(i)] += self.grad[size_t(o)] * inv;
        });
      });
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  std::vector<long> axes(size_t(x.rank()));
  for (long d = 0; d < x.rank(); ++d) axes[size_t(d)] = d;
  return sum_axes(x, axes);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  std::vector<long> axes(size_t(x.rank()));
  for (long d = 0; d < x.rank(); ++d) axes[size_t(d)] = d;
  return mean_axes(x, axes);
}

// Softmax over the last axis, shift-stabilized.
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() < 1) throw ShapeError("softmax: rank-0 input");
  const long c = x.extent(x.rank() - 1);
  const long rows = x.numel() / c;
  std::vector<S> out(x.values());
  for (long r = 0; r < rows; ++r) {
    S* row = out.data() + r * c;
    S mx = row[0];
    for (long j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (long j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    for (long j = 0; j < c; ++j) row[j] /= denom;
  }
  auto xi = x.impl();
  return detail::make_node<S>(
      "softmax", x.shape(), std::move(out), {x},
      [xi, rows, c](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (long r = 0; r < rows; ++r) {
          const S* y = self.data.data() + r * c;
          const S* g = self.grad.data() + r * c;
          S dot = S(0);
          for (long j = 0; j < c; ++j) dot += g[j] * y[j];
          for (long j = 0; j < c; ++j)
            xi->grad[size_t(r * c + j)] += y[j] * (g[j] - dot);
        }
      });
}

// ---------------------------------------------------------------------------
// Structure: reshape / slice / concat / reverse / axis swap
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  std::vector<S> out(x.values());
  auto xi = x.impl();
  return detail::make_node<S>("reshape", std::move(new_shape), std::move(out), {x},
                              [xi](const TensorImpl<S>& self) {
                                detail::accumulate(xi, self.grad);
                              });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, long axis, long start, long end) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  if (start < 0 || end > x.extent(axis) || start >= end)
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(end) +
                     ") invalid for axis extent " + std::to_string(x.extent(axis)));
  const Shape& in = x.shape();
  Shape out_shape = in;
  out_shape[size_t(axis)] = end - start;
  long outer = 1, inner = 1;
  for (long d = 0; d < axis; ++d) outer *= in[size_t(d)];
  for (long d = axis + 1; d < x.rank(); ++d) inner *= in[size_t(d)];
  const long in_block = in[size_t(axis)] * inner;
  const long out_block = (end - start) * inner;
  std::vector<S> out(size_t(numel_of(out_shape)));
  for (long o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_block,
                x.values().data() + o * in_block + start * inner,
                size_t(out_block) * sizeof(S));
  auto xi = x.impl();
  return detail::make_node<S>(
      "slice", std::move(out_shape), std::move(out), {x},
      [xi, outer, inner, in_block, out_block, start](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (long o = 0; o < outer; ++o) {
          const S* g = self.grad.data() + o * out_block;
          S* dst = xi->grad.data() + o * in_block + start * inner;
          for (long i = 0; i < out_block; ++i) dst[i] += g[i];
        }
      });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const long rank = parts[0].rank();
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = parts[0].shape();
  long total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank)
      throw ShapeError("concat: rank mismatch " + shape_str(p.shape()));
    for (long d = 0; d < rank; ++d)
      if (d != axis && p.extent(d) != out_shape[size_t(d)])
        throw ShapeError("concat: extent mismatch between " + shape_str(out_shape) +
                         " and " + shape_str(p.shape()) + " outside axis " +
                         std::to_string(axis));
    total_axis += p.extent(axis);
  }
  out_shape[size_t(axis)] = total_axis;
  long outer = 1, inner = 1;
  for (long d = 0; d < axis; ++d) outer *= out_shape[size_t(d)];
  for (long d = axis + 1; d < rank; ++d) inner *= out_shape[size_t(d)];
  std::vector<S> out(size_t(numel_of(out_shape)));
  const long out_block = total_axis * inner;
  std::vector<long> offsets;  // start offset of each part along the axis
  {
    long off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const long blk = p.extent(axis) * inner;
      for (long o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * out_block + off * inner,
                    p.values().data() + o * blk, size_t(blk) * sizeof(S));
      off += p.extent(axis);
    }
  }
  std::vector<std::shared_ptr<TensorImpl<S>>> impls;
  std::vector<long> extents;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    extents.push_back(p.extent(axis));
  }
  return detail::make_node<S>(
      "concat", std::move(out_shape), std::move(out), parts,
      [impls, extents, offsets, outer, inner, out_block](const TensorImpl<S>& self) {
        for (size_t k = 0; k < impls.size(); ++k) {
          if (!impls[k]->requires_grad) continue;
          impls[k]->ensure_grad();
          const long blk = extents[k] * inner;
          for (long o = 0; o < outer; ++o) {
            const S* g = self.grad.data() + o * out_block + offsets[k] * inner;
            S* dst = impls[k]->grad.data() + o * blk;
            for (long i = 0; i < blk; ++i) dst[i] += g[i];
          }
        }
      });
}

template <typename S>
Tensor<S> reverse(const Tensor<S>& x, long axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("reverse: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  const Shape& in = x.shape();
  long outer = 1, inner = 1;
  const long ext = in[size_t(axis)];
  for (long d = 0; d < axis; ++d) outer *= in[size_t(d)];
  for (long d = axis + 1; d < x.rank(); ++d) inner *= in[size_t(d)];
  std::vector<S> out(size_t(x.numel()));
  for (long o = 0; o < outer; ++o)
    for (long e = 0; e < ext; ++e)
      std::memcpy(out.data() + (o * ext + e) * inner,
                  x.values().data() + (o * ext + (ext - 1 - e)) * inner,
                  size_t(inner) * sizeof(S));
  auto xi = x.impl();
  return detail::make_node<S>(
      "reverse", in, std::move(out), {x},
      [xi, outer, inner, ext](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        for (long o = 0; o < outer; ++o)
          for (long e = 0; e < ext; ++e) {
            const S* g = self.grad.data() + (o * ext + e) * inner;
            S* dst = xi->grad.data() + (o * ext + (ext - 1 - e)) * inner;
            for (long i = 0; i < inner; ++i) dst[i] += g[i];
          }
      });
}

// Swap two axes (copying transpose).
template <typename S>
Tensor<S> swap_axes(const Tensor<S>& x, long a, long b) {
  if (a < 0 || b < 0 || a >= x.rank() || b >= x.rank())
    throw ShapeError("swap_axes: axes out of range for " + shape_str(x.shape()));
  if (a == b) return reshape(x, x.shape());
  if (a > b) std::swap(a, b);
  const Shape& in = x.shape();
  Shape out_shape = in;
  std::swap(out_shape[size_t(a)], out_shape[size_t(b)]);
  // Decompose as [outer, A, mid, B, inner].
  long outer = 1, mid = 1, inner = 1;
  for (long d = 0; d < a; ++d) outer *= in[size_t(d)];
  for (long d = a + 1; d < b; ++d) mid *= in[size_t(d)];
  for (long d = b + 1; d < x.rank(); ++d) inner *= in[size_t(d)];
  const long ea = in[size_t(a)], eb = in[size_t(b)];
  std::vector<S> out(size_t(x.numel()));
  auto permute = [=](const S* src, S* dst) {
    for (long o = 0; o < outer; ++o)
      for (long i = 0; i < ea; ++i)
        for (long m = 0; m < mid; ++m)
          for (long j = 0; j < eb; ++j) {
            const S* s = src + ((((o * ea + i) * mid + m) * eb) + j) * inner;
            S* d = dst + ((((o * eb + j) * mid + m) * ea) + i) * inner;
            std::memcpy(d, s, size_t(inner) * sizeof(S));
          }
  };
  permute(x.values().data(), out.data());
  auto xi = x.impl();
  return detail::make_node<S>(
      "swap_axes", std::move(out_shape), std::move(out), {x},
      [xi, outer, mid, inner, ea, eb](const TensorImpl<S>& self) {
        if (!xi->requires_grad) return;
        xi->ensure_grad();
        // Inverse permutation: swap back, accumulating.
        for (long o = 0; o < outer; ++o)
          for (long j = 0; j < eb; ++j)
            for (long m = 0; m < mid; ++m)
              for (long i = 0; i < ea; ++i) {
                const S* g = self.grad.data() + ((((o * eb + j) * mid + m) * ea) + i) * inner;
                S* dst = xi->grad.data() + ((((o * ea + i) * mid + m) * eb) + j) * inner;
                for (long t = 0; t < inner; ++t) dst[t] += g[t];
              }
      });
}

// Inverted dropout: scales kept units by 1/keep at train time, identity in
// evaluation mode or when keep == 1.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double keep, RngStream& rng, bool training) {
  if (keep <= 0.0 || keep > 1.0)
    throw ShapeError("dropout: keep probability " + std::to_string(keep) +
                     " outside (0, 1]");
  if (!training || keep >= 1.0) return x;
  std::vector<S> mask(size_t(x.numel()));
  const S scale = S(1.0 / keep);
  for (S& m : mask) m = rng.bernoulli(keep) ? scale : S(0);
  std::vector<S> out(x.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto xi = x.impl();
  auto mask_ptr = std::make_shared<std::vector<S>>(std::move(mask));
  return detail::make_node<S>("dropout", x.shape(), std::move(out), {x},
                              [xi, mask_ptr](const TensorImpl<S>& self) {
                                if (!xi->requires_grad) return;
                                xi->ensure_grad();
                                for (size_t i = 0; i < self.grad.size(); ++i)
                                  xi->grad[i] += self.grad[i] * (*mask_ptr)[i];
                              });
}

// First node (in forward topological order) holding a non-finite value,
// or empty string when all reachable values are finite.
template <typename S>
std::string first_nonfinite(const Tensor<S>& root) {
  std::vector<TensorImpl<S>*> order;
  root.topo_order(order);
  for (TensorImpl<S>* node : order) {
    for (const S& v : node->data) {
      if (!std::isfinite(double(v)))
        return std::string(node->op) + " " + shape_str(node->shape);
    }
  }
  return {};
}

}  // namespace mimseq
