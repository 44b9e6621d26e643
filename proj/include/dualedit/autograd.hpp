// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualedit/tensor.hpp"

// Tensor-granularity reverse-mode automatic differentiation.
//
// A Var is a handle to a graph node. Nodes created while grad mode is on and
// at least one input requires a gradient keep their parents and a backward
// closure alive; everything else is a constant. Dropping the last handle to
// the output of a graph frees the graph, so the number of bytes held by live
// differentiable nodes is an honest measure of "retained activations".
namespace dualedit::ad {

struct GraphStats {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
  std::size_t live_nodes = 0;

  void reset_peak() { peak_bytes = live_bytes; }
};

inline GraphStats& graph_stats() {
  thread_local GraphStats stats;
  return stats;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward_fn;
  std::size_t accounted_bytes = 0;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node() {
    if (accounted_bytes) {
      auto& s = graph_stats();
      s.live_bytes -= accounted_bytes;
      --s.live_nodes;
    }
  }

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }

  void account(std::size_t extra_doubles = 0) {
    auto& s = graph_stats();
    std::size_t bytes = (value.size() + extra_doubles) * sizeof(double);
    if (!accounted_bytes) ++s.live_nodes;
    accounted_bytes += bytes;
    s.live_bytes += bytes;
    s.peak_bytes = std::max(s.peak_bytes, s.live_bytes);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  // Leaf-only mutation (optimizer updates, clone resets).
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  int dim(std::size_t i) const { return node_->value.dim(i); }
  double item() const { return node_->value[0]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Gradient accumulated by the last backward(); zeros when none arrived.
  Tensor grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return Tensor(node_->value.shape());
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() { node_->grad = Tensor(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

// Stop-gradient: same value, no path back to the inputs.
inline Var detach(const Var& v) { return constant(v.value()); }

namespace detail {

inline Var make_result(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, std::size_t saved = 0) {
  bool needs = false;
  if (grad_enabled()) {
    for (const Var& in : inputs) needs = needs || in.requires_grad();
  }
  if (!needs) return constant(std::move(value));
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->parents.reserve(inputs.size());
  for (const Var& in : inputs) node->parents.push_back(in.node());
  node->backward_fn = std::move(fn);
  node->account(saved);
  return Var(std::move(node));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline Tensor& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

// C[m,n] (+)= A[m,k] B[k,n]
inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i) * k + p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,k] (+)= A[m,n] B[k,n]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int n, int k, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < k; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * n;
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += ai[p] * bj[p];
      double& out = c[static_cast<std::size_t>(i) * k + j];
      out = accumulate ? out + s : s;
    }
  }
}

// C[k,n] (+)= A[m,k]^T B[m,n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(k) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i) * k + p];
      if (av == 0.0) continue;
      double* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

inline void require_rank(const Var& v, std::size_t r, const char* op) {
  if (v.value().rank() != r) {
    throw InvalidArgument(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                          shape_str(v.shape()));
  }
}

inline void require_same(const Var& a, const Var& b, const char* op) { a.value().require_same_shape(b.value(), op); }

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var lin_comb(double alpha, const Var& a, double beta, const Var& b) {
  detail::require_same(a, b, "lin_comb");
  Tensor out(a.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * av[i] + beta * bv[i];
  return detail::make_result(std::move(out), {a, b}, [alpha, beta](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(self, k)) continue;
      const double c = k == 0 ? alpha : beta;
      Tensor& g = detail::pgrad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    }
  });
}

inline Var add(const Var& a, const Var& b) { return lin_comb(1.0, a, 1.0, b); }
inline Var sub(const Var& a, const Var& b) { return lin_comb(1.0, a, -1.0, b); }

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  out *= s;
  return detail::make_result(std::move(out), {a}, [s](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return detail::make_result(std::move(out), {a}, [](Node& self) { detail::pgrad(self, 0) += self.grad; });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      Tensor& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      Tensor& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

inline Var silu(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v / (1.0 + std::exp(-v));
  }
  return detail::make_result(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      g[i] += self.grad[i] * (s + xv[i] * s * (1.0 - s));
    }
  });
}

inline Var tanh(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
  return detail::make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& x) {
  return detail::make_result(Tensor::scalar(x.value().sum()), {x}, [](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Var sum_squares(const Var& x) {
  return detail::make_result(Tensor::scalar(squared_norm(x.value())), {x}, [](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * xv[i] * self.grad[0];
  });
}

inline Var dot(const Var& a, const Var& b) {
  detail::require_same(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.value()[i] * b.value()[i];
  return detail::make_result(Tensor::scalar(s), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(self, k)) continue;
      const Tensor& other = self.parents[1 - k]->value;
      Tensor& g = detail::pgrad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * other[i];
    }
  });
}

// Unit-norm copy of a flat vector.
inline Var l2_normalize(const Var& x, double eps = 1e-12) {
  const double norm = std::sqrt(std::max(squared_norm(x.value()), eps));
  Tensor out = x.value();
  out *= 1.0 / norm;
  return detail::make_result(std::move(out), {x}, [norm](Node& self) {
    double proj = 0.0;
    for (std::size_t i = 0; i < self.value.size(); ++i) proj += self.value[i] * self.grad[i];
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (self.grad[i] - self.value[i] * proj) / norm;
  });
}

// [m,n] -> [n], averaging over rows.
inline Var mean_rows(const Var& x) {
  detail::require_rank(x, 2, "mean_rows");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out(Shape{n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += x.value().at(i, j) / m;
  return detail::make_result(std::move(out), {x}, [m, n](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g.at(i, j) += self.grad[j] / m;
  });
}

// ---------------------------------------------------------------- shape ops

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Var transpose(const Var& x) {
  detail::require_rank(x, 2, "transpose");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out(Shape{n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = x.value().at(i, j);
  return detail::make_result(std::move(out), {x}, [m, n](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
  });
}

// Concatenate along the leading dimension; trailing dimensions must agree.
inline Var concat0(const Var& a, const Var& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw InvalidArgument("concat0: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  Shape so = sa;
  so[0] += sb[0];
  Tensor out(so);
  std::copy(a.value().data(), a.value().data() + a.size(), out.data());
  std::copy(b.value().data(), b.value().data() + b.size(), out.data() + a.size());
  const std::size_t na = a.size();
  return detail::make_result(std::move(out), {a, b}, [na](Node& self) {
    if (detail::wants(self, 0)) {
      Tensor& g = detail::pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      Tensor& g = detail::pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

// Rows [begin, end) of the leading dimension.
inline Var slice0(const Var& x, int begin, int end) {
  const Shape& s = x.shape();
  if (begin < 0 || end > s[0] || begin >= end) throw InvalidArgument("slice0: bad range");
  const std::size_t inner = x.size() / s[0];
  Shape so = s;
  so[0] = end - begin;
  Tensor out(so);
  std::copy(x.value().data() + begin * inner, x.value().data() + end * inner, out.data());
  const std::size_t offset = begin * inner;
  return detail::make_result(std::move(out), {x}, [offset](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
  });
}

// table[V,D], ids -> [ids.size(), D]
inline Var gather_rows(const Var& table, const std::vector<int>& ids) {
  detail::require_rank(table, 2, "gather_rows");
  const int v = table.dim(0), d = table.dim(1);
  Tensor out(Shape{static_cast<int>(ids.size()), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= v) throw InvalidArgument("gather_rows: id out of range");
    for (int j = 0; j < d; ++j) out.at(static_cast<int>(r), j) = table.value().at(ids[r], j);
  }
  return detail::make_result(std::move(out), {table}, [ids, d](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (int j = 0; j < d; ++j) g.at(ids[r], j) += self.grad.at(static_cast<int>(r), j);
  });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw InvalidArgument("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  detail::mm_nn(a.value().data(), b.value().data(), out.data(), m, k, n, false);
  return detail::make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) detail::mm_nt(self.grad.data(), bv.data(), detail::pgrad(self, 0).data(), m, n, k, true);
    if (detail::wants(self, 1)) detail::mm_tn(av.data(), self.grad.data(), detail::pgrad(self, 1).data(), m, k, n, true);
  });
}

// a[m,n] b[k,n]^T -> [m,k]
inline Var matmul_nt(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const int m = a.dim(0), n = a.dim(1), k = b.dim(0);
  if (b.dim(1) != n) {
    throw InvalidArgument("matmul_nt: shapes differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out(Shape{m, k});
  detail::mm_nt(a.value().data(), b.value().data(), out.data(), m, n, k, false);
  return detail::make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    // dA = dC B ; dB = dC^T A
    if (detail::wants(self, 0)) detail::mm_nn(self.grad.data(), bv.data(), detail::pgrad(self, 0).data(), m, k, n, true);
    if (detail::wants(self, 1)) detail::mm_tn(self.grad.data(), av.data(), detail::pgrad(self, 1).data(), m, k, n, true);
  });
}

// x[m,n] + b[n] broadcast over rows.
inline Var add_row_bias(const Var& x, const Var& b) {
  detail::require_rank(x, 2, "add_row_bias");
  const int m = x.dim(0), n = x.dim(1);
  if (static_cast<int>(b.size()) != n) throw InvalidArgument("add_row_bias: bias size mismatch");
  Tensor out = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += b.value()[j];
  return detail::make_result(std::move(out), {x, b}, [m, n](Node& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) {
      Tensor& g = detail::pgrad(self, 1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
    }
  });
}

// x[C,...] + b[C] broadcast over the trailing dimensions.
inline Var add_channel_bias(const Var& x, const Var& b) {
  const int c = x.dim(0);
  if (static_cast<int>(b.size()) != c) throw InvalidArgument("add_channel_bias: bias size mismatch");
  const std::size_t inner = x.size() / c;
  Tensor out = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < inner; ++i) out[ch * inner + i] += b.value()[ch];
  return detail::make_result(std::move(out), {x, b}, [c, inner](Node& self) {
    if (detail::wants(self, 0)) detail::pgrad(self, 0) += self.grad;
    if (detail::wants(self, 1)) {
      Tensor& g = detail::pgrad(self, 1);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < inner; ++i) g[ch] += self.grad[ch * inner + i];
    }
  });
}

// ---------------------------------------------------------------- normalization

inline Var softmax_rows(const Var& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape());
  for (int i = 0; i < m; ++i) {
    double mx = x.value().at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += out.at(i, j) = std::exp(x.value().at(i, j) - mx);
    for (int j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  return detail::make_result(std::move(out), {x}, [m, n](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += self.grad.at(i, j) * self.value.at(i, j);
      for (int j = 0; j < n; ++j) g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - s);
    }
  });
}

inline Var log_softmax_rows(const Var& x) {
  detail::require_rank(x, 2, "log_softmax_rows");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape());
  for (int i = 0; i < m; ++i) {
    double mx = x.value().at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x.value().at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) out.at(i, j) = x.value().at(i, j) - lse;
  }
  return detail::make_result(std::move(out), {x}, [m, n](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += self.grad.at(i, j);
      for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.at(i, j) - std::exp(self.value.at(i, j)) * s;
    }
  });
}

// Per-row zero-mean / unit-variance, no affine.
inline Var layer_norm_rows(const Var& x, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm_rows");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> inv_std(m);
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x.value().at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x.value().at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) out.at(i, j) = (x.value().at(i, j) - mu) * inv_std[i];
  }
  return detail::make_result(
      std::move(out), {x},
      [m, n, inv_std](Node& self) {
        Tensor& g = detail::pgrad(self, 0);
        for (int i = 0; i < m; ++i) {
          double mg = 0.0, mgy = 0.0;
          for (int j = 0; j < n; ++j) {
            mg += self.grad.at(i, j);
            mgy += self.grad.at(i, j) * self.value.at(i, j);
          }
          mg /= n;
          mgy /= n;
          for (int j = 0; j < n; ++j)
            g.at(i, j) += inv_std[i] * (self.grad.at(i, j) - mg - self.value.at(i, j) * mgy);
        }
      },
      static_cast<std::size_t>(m));
}

// ---------------------------------------------------------------- image ops

namespace detail {

// x[C,H,W] -> cols[C*9, Ho*Wo] for a 3x3 kernel with zero padding 1.
inline Tensor im2col3(const Tensor& x, int stride, int ho, int wo) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor cols(Shape{c * 9, ho * wo});
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* row = cols.data() + static_cast<std::size_t>((ch * 9 + ky * 3 + kx)) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at(ch, iy, ix) : 0.0;
          }
        }
      }
  return cols;
}

inline void col2im3(const Tensor& cols, Tensor& dx, int stride, int ho, int wo) {
  const int c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = cols.data() + static_cast<std::size_t>((ch * 9 + ky * 3 + kx)) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < w) dx.at(ch, iy, ix) += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

// 3x3 convolution, zero padding 1. weight[Co, Ci*9], bias[Co].
inline Var conv3x3(const Var& x, const Var& weight, const Var& bias, int stride = 1) {
  detail::require_rank(x, 3, "conv3x3");
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int co = weight.dim(0);
  if (weight.dim(1) != ci * 9 || static_cast<int>(bias.size()) != co) {
    throw InvalidArgument("conv3x3: weight " + shape_str(weight.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  }
  const int ho = (h - 1) / stride + 1, wo = (w - 1) / stride + 1;
  Tensor cols = detail::im2col3(x.value(), stride, ho, wo);
  Tensor out(Shape{co, ho, wo});
  detail::mm_nn(weight.value().data(), cols.data(), out.data(), co, ci * 9, ho * wo, false);
  for (int o = 0; o < co; ++o)
    for (int i = 0; i < ho * wo; ++i) out[static_cast<std::size_t>(o) * ho * wo + i] += bias.value()[o];
  const std::size_t saved = cols.size();
  const bool keep_cols = grad_enabled() && (weight.requires_grad() || bias.requires_grad() || x.requires_grad());
  return detail::make_result(
      std::move(out), {x, weight, bias},
      [cols = keep_cols ? std::move(cols) : Tensor(), ci, co, ho, wo, stride](Node& self) {
        const int k = ci * 9, n = ho * wo;
        if (detail::wants(self, 1)) detail::mm_nt(self.grad.data(), cols.data(), detail::pgrad(self, 1).data(), co, n, k, true);
        if (detail::wants(self, 2)) {
          Tensor& g = detail::pgrad(self, 2);
          for (int o = 0; o < co; ++o)
            for (int i = 0; i < n; ++i) g[o] += self.grad[static_cast<std::size_t>(o) * n + i];
        }
        if (detail::wants(self, 0)) {
          Tensor dcols(Shape{k, n});
          detail::mm_tn(self.parents[1]->value.data(), self.grad.data(), dcols.data(), co, k, n, false);
          detail::col2im3(dcols, detail::pgrad(self, 0), stride, ho, wo);
        }
      },
      saved);
}

// Nearest-neighbour 2x upsampling of [C,H,W].
inline Var upsample2x(const Var& x) {
  detail::require_rank(x, 3, "upsample2x");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out(Shape{c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x.value().at(ch, y / 2, xx / 2);
  return detail::make_result(std::move(out), {x}, [c, h, w](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) g.at(ch, y / 2, xx / 2) += self.grad.at(ch, y, xx);
  });
}

// [C,H,W] -> [(H/p)*(W/p), C*p*p]; patches in row-major grid order.
inline Var patchify(const Var& x, int p) {
  detail::require_rank(x, 3, "patchify");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % p || w % p) throw InvalidArgument("patchify: image size not divisible by patch size");
  const int gh = h / p, gw = w / p, d = c * p * p;
  Tensor out(Shape{gh * gw, d});
  auto index = [=](int pr, int pc, int ch, int y, int xx) {
    return std::pair<int, int>{pr * gw + pc, (ch * p + y) * p + xx};
  };
  for (int pr = 0; pr < gh; ++pr)
    for (int pc = 0; pc < gw; ++pc)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < p; ++y)
          for (int xx = 0; xx < p; ++xx) {
            auto [r, col] = index(pr, pc, ch, y, xx);
            out.at(r, col) = x.value().at(ch, pr * p + y, pc * p + xx);
          }
  return detail::make_result(std::move(out), {x}, [=](Node& self) {
    Tensor& g = detail::pgrad(self, 0);
    for (int pr = 0; pr < gh; ++pr)
      for (int pc = 0; pc < gw; ++pc)
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < p; ++y)
            for (int xx = 0; xx < p; ++xx) {
              auto [r, col] = index(pr, pc, ch, y, xx);
              g.at(ch, pr * p + y, pc * p + xx) += self.grad.at(r, col);
            }
  });
}

// ---------------------------------------------------------------- backward

// Reverse sweep from a scalar (or seeded) output. Gradients accumulate into
// every reachable node that requires them; intermediate buffers are released
// afterwards so only leaves keep their .grad.
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor& g = root.node()->grad_buffer();
  if (seed) {
    g += *seed;
  } else {
    for (double& v : g.values()) v += 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
  for (Node* node : order) {
    if (node->backward_fn) node->grad = Tensor();
  }
}

}  // namespace dualedit::ad
