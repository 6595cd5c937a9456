#pragma once

// Define-by-run reverse-mode differentiation over small dense tensors.
//
// Every operation appends a node to a Graph and computes its value eagerly.
// Graph::gradients() walks the nodes in reverse and emits the vector-Jacobian
// products as *new nodes of the same graph*, so a gradient is itself an
// ordinary differentiable expression. Differentiating a scalar built from
// gradients (an l1 norm of a gradient, a distance between a gradient and
// fixed targets) therefore needs no separate Hessian-vector code path.

#include <cmath>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deepfv/error.hpp"
#include "deepfv/tensor.hpp"

namespace deepfv::ad {

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
  Leaf,
  MatMul,    // A B
  MatMulNT,  // A B^T
  MatMulTN,  // A^T B
  Transpose,
  AddBias,        // X[m,n] + b[n] broadcast over rows
  SumRows,        // [m,n] -> [n]
  BroadcastRows,  // [n] -> [m,n]
  SumCols,        // [m,n] -> [m,1]
  BroadcastCols,  // [m,1] -> [m,n]
  Add,
  Sub,
  Mul,
  Affine,  // alpha * x + beta
  Tanh,
  Relu,
  Exp,
  Log,
  Reciprocal,
  Abs,
  Sign,
  Softmax,     // row-wise
  LogSoftmax,  // row-wise
  Concat,      // along the last axis
  Slice,       // columns [aux0, aux1)
  PadCols,     // embed into aux0 columns at offset aux1
  Sum,         // all elements -> scalar
  Fill,        // scalar -> shape
  Reshape,
};

constexpr const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::MatMulTN: return "matmul_tn";
    case OpKind::Transpose: return "transpose";
    case OpKind::AddBias: return "add_bias";
    case OpKind::SumRows: return "sum_rows";
    case OpKind::BroadcastRows: return "broadcast_rows";
    case OpKind::SumCols: return "sum_cols";
    case OpKind::BroadcastCols: return "broadcast_cols";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Affine: return "affine";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Reciprocal: return "reciprocal";
    case OpKind::Abs: return "abs";
    case OpKind::Sign: return "sign";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::PadCols: return "pad_cols";
    case OpKind::Sum: return "sum";
    case OpKind::Fill: return "fill";
    case OpKind::Reshape: return "reshape";
  }
  return "?";
}

template <std::floating_point T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  T item() const { return value().item(); }

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient values keyed by the parameter nodes they were requested for.
template <std::floating_point T>
struct GradientMap {
  std::vector<NodeId> params;
  std::vector<Tensor<T>> grads;

  std::size_t size() const noexcept { return grads.size(); }
  const Tensor<T>& operator[](std::size_t i) const { return grads[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& g : grads) n += g.size();
    return n;
  }

  T l1_norm() const {
    T total = 0;
    for (const auto& g : grads)
      for (T v : g) total += std::abs(v);
    return total;
  }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(element_count());
    for (const auto& g : grads) flat.insert(flat.end(), g.begin(), g.end());
    return flat;
  }
};

namespace kernels {

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw Error(ErrorKind::ShapeMismatch,
                "matmul inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor<T> c(Shape{m, n});
  const std::size_t lda = a.cols();
  const std::size_t ldb = b.cols();
  T* out = c.begin();
  const T* pa = a.begin();
  const T* pb = b.begin();
  if (!trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* row = out + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? pa[p * lda + i] : pa[i * lda + p];
        if (av == T(0)) continue;
        const T* brow = pb + p * ldb;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = pb + j * ldb;
        T acc = 0;
        if (trans_a) {
          for (std::size_t p = 0; p < k; ++p) acc += pa[p * lda + i] * brow[p];
        } else {
          const T* arow = pa + i * lda;
          for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        }
        out[i * n + j] = acc;
      }
    }
  }
  return c;
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(what) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i], b[i]);
  return y;
}

template <class T>
Tensor<T> row_softmax(const Tensor<T>& x, bool log_space) {
  Tensor<T> y(x.shape());
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const T* in = x.begin() + i * n;
    T* out = y.begin() + i * n;
    T hi = in[0];
    for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, in[j]);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - hi);
    if (log_space) {
      const T log_total = std::log(total);
      for (std::size_t j = 0; j < n; ++j) out[j] = in[j] - hi - log_total;
    } else {
      for (std::size_t j = 0; j < n; ++j) out[j] = std::exp(in[j] - hi) / total;
    }
  }
  return y;
}

}  // namespace kernels

template <std::floating_point T>
class Graph {
 public:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    bool requires_grad = false;
    T alpha = 0;
    T beta = 0;
    std::size_t aux0 = 0;
    std::size_t aux1 = 0;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// When enabled, any op producing NaN/Inf throws NonFinite.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }
  bool check_finite() const noexcept { return check_finite_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }

  Var<T> parameter(Tensor<T> value) { return leaf(std::move(value), true); }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Named non-trainable input; the name is retrievable via input().
  Var<T> input(const std::string& name, Tensor<T> value) {
    Var<T> v = leaf(std::move(value), false);
    inputs_[name] = v.id();
    return v;
  }

  Var<T> input(const std::string& name) const {
    auto it = inputs_.find(name);
    if (it == inputs_.end()) throw Error(ErrorKind::ShapeMismatch, "unbound input '" + name + "'");
    return Var<T>(const_cast<Graph*>(this), it->second);
  }

  Var<T> record(OpKind op, std::vector<NodeId> inputs, Tensor<T> value, T alpha = 0, T beta = 0, std::size_t aux0 = 0,
                std::size_t aux1 = 0) {
    if (check_finite_ && !value.all_finite()) {
      throw Error(ErrorKind::NonFinite, std::string("non-finite value produced by ") + op_name(op));
    }
    Node n;
    n.op = op;
    for (NodeId in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.alpha = alpha;
    n.beta = beta;
    n.aux0 = aux0;
    n.aux1 = aux1;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Reverse-mode gradients of a scalar node with respect to `wrt`, returned
  /// as graph nodes (differentiable again). Leaves that do not influence
  /// `output` receive zero tensors. Contributions are accumulated in reverse
  /// node order, so results are reproducible bit for bit.
  std::vector<Var<T>> gradients(Var<T> output, std::span<const Var<T>> wrt);

  std::vector<Var<T>> gradients(Var<T> output, std::initializer_list<Var<T>> wrt) {
    return gradients(output, std::span<const Var<T>>(wrt.begin(), wrt.size()));
  }

  /// Gradient values only.
  GradientMap<T> backward(Var<T> output, std::span<const Var<T>> wrt) {
    auto grads = gradients(output, wrt);
    GradientMap<T> map;
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      map.params.push_back(wrt[i].id());
      map.grads.push_back(grads[i].value());
    }
    return map;
  }

 private:
  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    if (check_finite_ && !value.all_finite()) throw Error(ErrorKind::NonFinite, "non-finite leaf value");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // std::deque keeps node references stable while backward appends nodes.
  std::deque<Node> nodes_;
  std::unordered_map<std::string, NodeId> inputs_;
  bool check_finite_ = false;
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {

template <class T>
void same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw Error(ErrorKind::ShapeMismatch, "operands belong to different graphs");
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  return a.graph().record(OpKind::MatMul, {a.id(), b.id()}, kernels::matmul(a.value(), b.value(), false, false));
}

/// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  return a.graph().record(OpKind::MatMulNT, {a.id(), b.id()}, kernels::matmul(a.value(), b.value(), false, true));
}

/// a^T * b
template <class T>
Var<T> matmul_tn(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  return a.graph().record(OpKind::MatMulTN, {a.id(), b.id()}, kernels::matmul(a.value(), b.value(), true, false));
}

template <class T>
Var<T> transpose(Var<T> a) {
  const auto& x = a.value();
  Tensor<T> y(Shape{x.cols(), x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y.at(j, i) = x.at(i, j);
  return a.graph().record(OpKind::Transpose, {a.id()}, std::move(y));
}

template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::same_graph(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != xv.cols()) {
    throw Error(ErrorKind::ShapeMismatch,
                "bias " + shape_string(bv.shape()) + " does not match input " + shape_string(xv.shape()));
  }
  Tensor<T> y = xv;
  const std::size_t n = xv.cols();
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += bv[j];
  return x.graph().record(OpKind::AddBias, {x.id(), bias.id()}, std::move(y));
}

template <class T>
Var<T> sum_rows(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  Tensor<T> y(Shape{n});
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) y[j] += xv[i * n + j];
  return x.graph().record(OpKind::SumRows, {x.id()}, std::move(y));
}

template <class T>
Var<T> broadcast_rows(Var<T> v, std::size_t rows) {
  const auto& vv = v.value();
  const std::size_t n = vv.size();
  Tensor<T> y(Shape{rows, n});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = vv[j];
  return v.graph().record(OpKind::BroadcastRows, {v.id()}, std::move(y), 0, 0, rows);
}

template <class T>
Var<T> sum_cols(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t m = xv.rows();
  const std::size_t n = xv.cols();
  Tensor<T> y(Shape{m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += xv[i * n + j];
    y[i] = acc;
  }
  return x.graph().record(OpKind::SumCols, {x.id()}, std::move(y));
}

template <class T>
Var<T> broadcast_cols(Var<T> v, std::size_t cols) {
  const auto& vv = v.value();
  if (vv.cols() != 1) throw Error(ErrorKind::ShapeMismatch, "broadcast_cols expects a column, got " + shape_string(vv.shape()));
  const std::size_t m = vv.rows();
  Tensor<T> y(Shape{m, cols});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = vv[i];
  return v.graph().record(OpKind::BroadcastCols, {v.id()}, std::move(y), 0, 0, cols);
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  return a.graph().record(OpKind::Add, {a.id(), b.id()},
                          kernels::zip(a.value(), b.value(), [](T x, T y) { return x + y; }, "add"));
}

template <class T>
Var<T> operator-(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  return a.graph().record(OpKind::Sub, {a.id(), b.id()},
                          kernels::zip(a.value(), b.value(), [](T x, T y) { return x - y; }, "subtract"));
}

template <class T>
Var<T> operator*(Var<T> a, Var<T> b) {
  detail::same_graph(a, b);
  return a.graph().record(OpKind::Mul, {a.id(), b.id()},
                          kernels::zip(a.value(), b.value(), [](T x, T y) { return x * y; }, "multiply"));
}

/// alpha * x + beta, elementwise.
template <class T>
Var<T> affine(Var<T> x, T alpha, T beta) {
  return x.graph().record(OpKind::Affine, {x.id()},
                          kernels::map(x.value(), [=](T v) { return alpha * v + beta; }), alpha, beta);
}

template <class T>
Var<T> operator-(Var<T> x) {
  return affine(x, T(-1), T(0));
}

template <class T>
Var<T> operator*(T s, Var<T> x) {
  return affine(x, s, T(0));
}

template <class T>
Var<T> tanh(Var<T> x) {
  return x.graph().record(OpKind::Tanh, {x.id()}, kernels::map(x.value(), [](T v) { return std::tanh(v); }));
}

template <class T>
Var<T> relu(Var<T> x) {
  return x.graph().record(OpKind::Relu, {x.id()}, kernels::map(x.value(), [](T v) { return v > T(0) ? v : T(0); }));
}

template <class T>
Var<T> exp(Var<T> x) {
  return x.graph().record(OpKind::Exp, {x.id()}, kernels::map(x.value(), [](T v) { return std::exp(v); }));
}

template <class T>
Var<T> log(Var<T> x) {
  return x.graph().record(OpKind::Log, {x.id()}, kernels::map(x.value(), [](T v) { return std::log(v); }));
}

template <class T>
Var<T> reciprocal(Var<T> x) {
  return x.graph().record(OpKind::Reciprocal, {x.id()}, kernels::map(x.value(), [](T v) { return T(1) / v; }));
}

template <class T>
Var<T> abs(Var<T> x) {
  return x.graph().record(OpKind::Abs, {x.id()}, kernels::map(x.value(), [](T v) { return std::abs(v); }));
}

/// Elementwise sign with sign(0) = 0. Has no derivative rule: differentiating
/// through it raises UnsupportedSecondOrderOp.
template <class T>
Var<T> sign(Var<T> x) {
  return x.graph().record(OpKind::Sign, {x.id()},
                          kernels::map(x.value(), [](T v) { return T((v > T(0)) - (v < T(0))); }));
}

template <class T>
Var<T> softmax(Var<T> x) {
  return x.graph().record(OpKind::Softmax, {x.id()}, kernels::row_softmax(x.value(), false));
}

template <class T>
Var<T> log_softmax(Var<T> x) {
  return x.graph().record(OpKind::LogSoftmax, {x.id()}, kernels::row_softmax(x.value(), true));
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts) {
  if (parts.empty()) throw Error(ErrorKind::ShapeMismatch, "concat of nothing");
  const std::size_t m = parts[0].value().rows();
  const bool rank1 = parts[0].value().rank() <= 1;
  std::size_t total = 0;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    detail::same_graph(parts[0], p);
    if (p.value().rows() != m) throw Error(ErrorKind::ShapeMismatch, "concat row counts differ");
    total += p.value().cols();
    ids.push_back(p.id());
  }
  Tensor<T> y(rank1 ? Shape{total} : Shape{m, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const std::size_t w = v.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) y[i * total + offset + j] = v[i * w + j];
    offset += w;
  }
  return parts[0].graph().record(OpKind::Concat, std::move(ids), std::move(y));
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts) {
  return concat(std::span<const Var<T>>(parts.begin(), parts.size()));
}

/// Columns [begin, end) along the last axis.
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  if (begin >= end || end > n) throw Error(ErrorKind::ShapeMismatch, "slice out of range");
  const std::size_t m = xv.rows();
  const std::size_t w = end - begin;
  Tensor<T> y(xv.rank() <= 1 ? Shape{w} : Shape{m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * w + j] = xv[i * n + begin + j];
  return x.graph().record(OpKind::Slice, {x.id()}, std::move(y), 0, 0, begin, end);
}

/// Zero-pads the last axis to `total` columns, placing x at `offset`.
template <class T>
Var<T> pad_cols(Var<T> x, std::size_t total, std::size_t offset) {
  const auto& xv = x.value();
  const std::size_t w = xv.cols();
  if (offset + w > total) throw Error(ErrorKind::ShapeMismatch, "pad out of range");
  const std::size_t m = xv.rows();
  Tensor<T> y(xv.rank() <= 1 ? Shape{total} : Shape{m, total});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) y[i * total + offset + j] = xv[i * w + j];
  return x.graph().record(OpKind::PadCols, {x.id()}, std::move(y), 0, 0, total, offset);
}

template <class T>
Var<T> sum(Var<T> x) {
  T acc = 0;
  for (T v : x.value()) acc += v;
  return x.graph().record(OpKind::Sum, {x.id()}, Tensor<T>::scalar(acc));
}

template <class T>
Var<T> mean(Var<T> x) {
  return affine(sum(x), T(1) / static_cast<T>(x.value().size()), T(0));
}

template <class T>
Var<T> fill(Var<T> scalar, const Shape& shape) {
  return scalar.graph().record(OpKind::Fill, {scalar.id()}, Tensor<T>(shape, scalar.value().item()));
}

template <class T>
Var<T> reshape(Var<T> x, const Shape& shape) {
  if (element_count(shape) != x.value().size()) {
    throw Error(ErrorKind::ShapeMismatch, "cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  return x.graph().record(OpKind::Reshape, {x.id()}, Tensor<T>(shape, x.value().data()));
}

template <class T>
Var<T> reshape_like(Var<T> x, const Var<T>& like) {
  return x.shape() == like.shape() ? x : reshape(x, like.shape());
}

/// sum((a - b)^2)
template <class T>
Var<T> squared_error(Var<T> a, Var<T> b) {
  auto diff = a - b;
  return sum(diff * diff);
}

/// sum(|x|)
template <class T>
Var<T> abs_sum(Var<T> x) {
  return sum(abs(x));
}

/// mu + exp(log_var / 2) * noise; the noise is an ordinary input so sampling
/// stays outside the graph.
template <class T>
Var<T> reparameterize(Var<T> mu, Var<T> log_var, Var<T> noise) {
  return mu + exp(affine(log_var, T(0.5), T(0))) * noise;
}

// ---------------------------------------------------------------------------
// Reverse pass

template <std::floating_point T>
std::vector<Var<T>> Graph<T>::gradients(Var<T> output, std::span<const Var<T>> wrt) {
  if (&output.graph() != this) throw Error(ErrorKind::ShapeMismatch, "output belongs to another graph");
  if (!output.value().is_scalar()) {
    throw Error(ErrorKind::NotScalar, "gradient of non-scalar output of shape " + shape_string(output.shape()));
  }
  const NodeId last = output.id();

  // Only nodes that depend on some requested leaf need adjoints.
  std::vector<char> relevant(last + 1, 0);
  for (const auto& w : wrt) {
    if (w.id() <= last) relevant[w.id()] = 1;
  }
  for (NodeId id = 0; id <= last; ++id) {
    if (relevant[id]) continue;
    for (NodeId in : nodes_[id].inputs) {
      if (relevant[in]) {
        relevant[id] = 1;
        break;
      }
    }
  }

  constexpr NodeId kNone = static_cast<NodeId>(-1);
  std::vector<NodeId> adjoint(last + 1, kNone);
  auto accumulate = [&](NodeId target, Var<T> contribution) {
    if (adjoint[target] == kNone) {
      adjoint[target] = contribution.id();
    } else {
      adjoint[target] = (Var<T>(this, adjoint[target]) + contribution).id();
    }
  };

  if (relevant[last]) adjoint[last] = constant(Tensor<T>(output.shape(), T(1))).id();

  for (NodeId id = last + 1; id-- > 0;) {
    if (adjoint[id] == kNone) continue;
    const OpKind op = nodes_[id].op;
    if (op == OpKind::Leaf) continue;
    const std::vector<NodeId> in = nodes_[id].inputs;
    const T alpha = nodes_[id].alpha;
    const std::size_t aux0 = nodes_[id].aux0;
    const std::size_t aux1 = nodes_[id].aux1;
    const Var<T> g(this, adjoint[id]);
    const Var<T> y(this, id);
    auto needs = [&](std::size_t k) { return relevant[in[k]] != 0; };
    auto arg = [&](std::size_t k) { return Var<T>(this, in[k]); };

    switch (op) {
      case OpKind::Leaf:
        break;
      case OpKind::MatMul:
        if (needs(0)) accumulate(in[0], matmul_nt(g, arg(1)));
        if (needs(1)) accumulate(in[1], matmul_tn(arg(0), g));
        break;
      case OpKind::MatMulNT:  // C = A B^T
        if (needs(0)) accumulate(in[0], matmul(g, arg(1)));
        if (needs(1)) accumulate(in[1], matmul_tn(g, arg(0)));
        break;
      case OpKind::MatMulTN:  // C = A^T B
        if (needs(0)) accumulate(in[0], matmul_nt(arg(1), g));
        if (needs(1)) accumulate(in[1], matmul(arg(0), g));
        break;
      case OpKind::Transpose:
        if (needs(0)) accumulate(in[0], transpose(g));
        break;
      case OpKind::AddBias:
        if (needs(0)) accumulate(in[0], g);
        if (needs(1)) accumulate(in[1], reshape_like(sum_rows(g), arg(1)));
        break;
      case OpKind::SumRows:
        if (needs(0)) accumulate(in[0], reshape_like(broadcast_rows(g, arg(0).value().rows()), arg(0)));
        break;
      case OpKind::BroadcastRows:
        if (needs(0)) accumulate(in[0], reshape_like(sum_rows(g), arg(0)));
        break;
      case OpKind::SumCols:
        if (needs(0)) accumulate(in[0], reshape_like(broadcast_cols(g, arg(0).value().cols()), arg(0)));
        break;
      case OpKind::BroadcastCols:
        if (needs(0)) accumulate(in[0], reshape_like(sum_cols(g), arg(0)));
        break;
      case OpKind::Add:
        if (needs(0)) accumulate(in[0], g);
        if (needs(1)) accumulate(in[1], g);
        break;
      case OpKind::Sub:
        if (needs(0)) accumulate(in[0], g);
        if (needs(1)) accumulate(in[1], -g);
        break;
      case OpKind::Mul:
        if (needs(0)) accumulate(in[0], g * arg(1));
        if (needs(1)) accumulate(in[1], g * arg(0));
        break;
      case OpKind::Affine:
        if (needs(0)) accumulate(in[0], affine(g, alpha, T(0)));
        break;
      case OpKind::Tanh:
        if (needs(0)) accumulate(in[0], g * affine(y * y, T(-1), T(1)));
        break;
      case OpKind::Relu:
        if (needs(0)) {
          auto mask = kernels::map(arg(0).value(), [](T v) { return v > T(0) ? T(1) : T(0); });
          accumulate(in[0], g * constant(std::move(mask)));
        }
        break;
      case OpKind::Exp:
        if (needs(0)) accumulate(in[0], g * y);
        break;
      case OpKind::Log:
        if (needs(0)) accumulate(in[0], g * reciprocal(arg(0)));
        break;
      case OpKind::Reciprocal:
        if (needs(0)) accumulate(in[0], g * affine(y * y, T(-1), T(0)));
        break;
      case OpKind::Abs:
        if (needs(0)) {
          // Subgradient convention: d|x|/dx at 0 is 0.
          auto s = kernels::map(arg(0).value(), [](T v) { return T((v > T(0)) - (v < T(0))); });
          accumulate(in[0], g * constant(std::move(s)));
        }
        break;
      case OpKind::Sign:
        if (needs(0)) {
          throw Error(ErrorKind::UnsupportedSecondOrderOp, "no derivative rule for sign (node " + std::to_string(id) + ")");
        }
        break;
      case OpKind::Softmax:
        if (needs(0)) {
          const std::size_t n = y.value().cols();
          accumulate(in[0], y * (g - broadcast_cols(sum_cols(g * y), n)));
        }
        break;
      case OpKind::LogSoftmax:
        if (needs(0)) {
          const std::size_t n = y.value().cols();
          accumulate(in[0], g - exp(y) * broadcast_cols(sum_cols(g), n));
        }
        break;
      case OpKind::Concat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t w = arg(k).value().cols();
          if (needs(k)) accumulate(in[k], slice_cols(g, offset, offset + w));
          offset += w;
        }
        break;
      }
      case OpKind::Slice:
        if (needs(0)) accumulate(in[0], pad_cols(g, arg(0).value().cols(), aux0));
        break;
      case OpKind::PadCols:
        if (needs(0)) accumulate(in[0], slice_cols(g, aux1, aux1 + arg(0).value().cols()));
        break;
      case OpKind::Sum:
        if (needs(0)) accumulate(in[0], fill(g, arg(0).shape()));
        break;
      case OpKind::Fill:
        if (needs(0)) accumulate(in[0], reshape_like(sum(g), arg(0)));
        break;
      case OpKind::Reshape:
        if (needs(0)) accumulate(in[0], reshape(g, arg(0).shape()));
        break;
    }
  }

  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (w.id() <= last && adjoint[w.id()] != kNone) {
      result.emplace_back(this, adjoint[w.id()]);
    } else {
      result.push_back(constant(Tensor<T>(w.shape(), T(0))));
    }
  }
  return result;
}

}  // namespace deepfv::ad
