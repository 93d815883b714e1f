#pragma once

// Reverse-mode automatic differentiation over dense row-major 2-D arrays.
//
// A Graph is an append-only list of nodes. Node ids are assigned in creation
// order, so every node's inputs precede it and the id order is a topological
// order. gradient() emits the backward pass as ordinary graph nodes; the
// result can be differentiated again, which is how second-order terms are
// obtained.
//
// Values are never stored on the graph. An Evaluator pairs a graph with a set
// of parameter bindings and memoizes node values; it keeps working while the
// graph grows, so a caller may evaluate part of a graph, build more nodes that
// depend on those numbers, and evaluate again.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "metadapt/error.hpp"

namespace metadapt::ad {

struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 1;

  [[nodiscard]] std::size_t size() const { return rows * cols; }
  [[nodiscard]] bool is_scalar() const { return rows == 1 && cols == 1; }
  bool operator==(const Shape&) const = default;

  [[nodiscard]] std::string str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

// Dense array of doubles, row-major.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() : data(1, 0.0) {}
  explicit Array(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
  Array(Shape s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) {
      throw ShapeError("array data length " + std::to_string(data.size()) +
                       " does not match shape " + shape.str());
    }
  }

  static Array scalar(double v) { return Array(Shape{1, 1}, v); }
  static Array row(std::vector<double> values) {
    const Shape s{1, values.size()};
    return Array(s, std::move(values));
  }
  static Array column(std::vector<double> values) {
    const Shape s{values.size(), 1};
    return Array(s, std::move(values));
  }

  [[nodiscard]] std::size_t rows() const { return shape.rows; }
  [[nodiscard]] std::size_t cols() const { return shape.cols; }
  [[nodiscard]] std::size_t size() const { return data.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * shape.cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * shape.cols + c]; }

  // Value of a 1x1 array.
  [[nodiscard]] double item() const {
    if (!shape.is_scalar()) throw ShapeError("item() on non-scalar array " + shape.str());
    return data[0];
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Array&) const = default;
};

namespace kernels {

inline Array matmul(const Array& a, const Array& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimension mismatch " + a.shape.str() + " x " + b.shape.str());
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(b.cols());
  Array out(Shape{a.rows(), b.cols()});
  Eigen::Map<RowMajor>(out.data.data(), m, n).noalias() =
      Eigen::Map<const RowMajor>(a.data.data(), m, k) * Eigen::Map<const RowMajor>(b.data.data(), k, n);
  return out;
}

using PackedVec = Eigen::Array<double, Eigen::Dynamic, 1>;

// Zero-padded to a multiple of 8 so Eigen never takes its scalar tail path.
// Scalar and packet exp can differ in the last bit, and without padding an
// element's value would depend on its position and the array length.
inline PackedVec padded(const Array& a) {
  const std::size_t n = a.size();
  PackedVec v = PackedVec::Zero(static_cast<Eigen::Index>((n + 7) / 8 * 8));
  std::copy(a.data.begin(), a.data.end(), v.data());
  return v;
}

inline Array unpadded(const PackedVec& v, const Shape& shape) {
  Array out(shape);
  std::copy(v.data(), v.data() + out.size(), out.data.begin());
  return out;
}

// tanh(x) = sign(x) (1 - e^{-2|x|}) / (1 + e^{-2|x|}), with a Taylor series
// below |x| = 0.01 where the subtraction would cancel. Relative error stays
// within a few 1e-15.
inline Array tanh(const Array& a) {
  const PackedVec x = padded(a);
  const PackedVec ax = x.abs();
  const PackedVec t = (-2.0 * ax).exp();
  const PackedVec large = (1.0 - t) / (1.0 + t);
  const PackedVec x2 = ax * ax;
  const PackedVec small =
      ax * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0)))));
  PackedVec y = (ax < 0.01).select(small, large);
  y = (x < 0.0).select(-y, y);
  return unpadded(y, a.shape);
}

inline Array exp(const Array& a) {
  const PackedVec y = padded(a).exp();
  return unpadded(y, a.shape);
}

inline Array transpose(const Array& a) {
  Array out(Shape{a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class F>
Array map(const Array& a, F f) {
  Array out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

template <class F>
Array zip(const Array& a, const Array& b, F f) {
  if (a.shape != b.shape) {
    throw ShapeError("elementwise shape mismatch " + a.shape.str() + " vs " + b.shape.str());
  }
  Array out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  return out;
}

inline Array sum_rows(const Array& a) {
  Array out(Shape{1, a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.data[j] += a(i, j);
  return out;
}

inline Array sum_cols(const Array& a) {
  Array out(Shape{a.rows(), 1});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    out.data[i] = s;
  }
  return out;
}

inline double sum(const Array& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  return s;
}

inline bool can_broadcast(Shape from, Shape to) {
  if (from == to || from.is_scalar()) return true;
  if (from.rows == 1 && from.cols == to.cols) return true;
  return from.cols == 1 && from.rows == to.rows;
}

inline Array broadcast(const Array& a, Shape to) {
  if (!can_broadcast(a.shape, to)) {
    throw ShapeError("cannot broadcast " + a.shape.str() + " to " + to.str());
  }
  if (a.shape == to) return a;
  Array out(to);
  for (std::size_t i = 0; i < to.rows; ++i)
    for (std::size_t j = 0; j < to.cols; ++j) out(i, j) = a(a.rows() == 1 ? 0 : i, a.cols() == 1 ? 0 : j);
  return out;
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace kernels

enum class Op : std::uint8_t {
  Constant,
  Parameter,
  Add,
  Sub,
  Mul,
  MatMul,
  Transpose,
  Tanh,
  Exp,
  Log,
  Reciprocal,
  Square,
  Abs,
  Max0,
  Sign,
  Scale,
  Sum,
  SumRows,
  SumCols,
  Mean,
  Broadcast,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Parameter: return "parameter";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Reciprocal: return "reciprocal";
    case Op::Square: return "square";
    case Op::Abs: return "abs";
    case Op::Max0: return "max0";
    case Op::Sign: return "sign";
    case Op::Scale: return "scale";
    case Op::Sum: return "sum";
    case Op::SumRows: return "sum_rows";
    case Op::SumCols: return "sum_cols";
    case Op::Mean: return "mean";
    case Op::Broadcast: return "broadcast";
  }
  return "?";
}

class Graph;

// Handle to a node. Cheap to copy; only valid while its graph is alive.
struct Node {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  [[nodiscard]] Shape shape() const;
  bool operator==(const Node& o) const { return graph == o.graph && id == o.id; }
};

struct NodeData {
  Op op = Op::Constant;
  std::uint32_t inputs[2] = {0, 0};
  std::uint8_t arity = 0;
  Shape shape;
  double factor = 0.0;         // Scale
  std::uint32_t payload = 0;   // constant index or parameter ordinal
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Node constant(Array value) {
    if (!value.all_finite()) throw NonFiniteError("non-finite constant");
    NodeData d;
    d.op = Op::Constant;
    d.shape = value.shape;
    d.payload = static_cast<std::uint32_t>(constants_.size());
    constants_.push_back(std::move(value));
    return push(d);
  }
  Node constant(double v) { return constant(Array::scalar(v)); }

  Node parameter(Shape shape, std::string name = {}) {
    NodeData d;
    d.op = Op::Parameter;
    d.shape = shape;
    d.payload = static_cast<std::uint32_t>(parameter_names_.size());
    parameter_names_.push_back(std::move(name));
    return push(d);
  }

  Node add(Node a, Node b) { return binary(Op::Add, a, b); }
  Node sub(Node a, Node b) { return binary(Op::Sub, a, b); }
  Node mul(Node a, Node b) { return binary(Op::Mul, a, b); }

  Node matmul(Node a, Node b) {
    const Shape sa = data(a).shape;
    const Shape sb = data(b).shape;
    if (sa.cols != sb.rows) {
      throw ShapeError("matmul inner dimension mismatch " + sa.str() + " x " + sb.str());
    }
    return push(make(Op::MatMul, {a, b}, Shape{sa.rows, sb.cols}));
  }

  Node transpose(Node a) {
    const Shape s = data(a).shape;
    return push(make(Op::Transpose, {a}, Shape{s.cols, s.rows}));
  }

  Node tanh(Node a) { return unary(Op::Tanh, a); }
  Node exp(Node a) { return unary(Op::Exp, a); }
  Node log(Node a) { return unary(Op::Log, a); }
  Node reciprocal(Node a) { return unary(Op::Reciprocal, a); }
  Node square(Node a) { return unary(Op::Square, a); }
  Node abs(Node a) { return unary(Op::Abs, a); }
  Node max0(Node a) { return unary(Op::Max0, a); }
  Node sign(Node a) { return unary(Op::Sign, a); }

  Node scale(Node a, double factor) {
    NodeData d = make(Op::Scale, {a}, data(a).shape);
    d.factor = factor;
    return push(d);
  }

  Node sum(Node a) { return push(make(Op::Sum, {a}, Shape{1, 1})); }
  Node mean(Node a) { return push(make(Op::Mean, {a}, Shape{1, 1})); }
  Node sum_rows(Node a) { return push(make(Op::SumRows, {a}, Shape{1, data(a).shape.cols})); }
  Node sum_cols(Node a) { return push(make(Op::SumCols, {a}, Shape{data(a).shape.rows, 1})); }

  Node broadcast(Node a, Shape to) {
    const Shape from = data(a).shape;
    if (from == to) return a;
    if (!kernels::can_broadcast(from, to)) {
      throw ShapeError("cannot broadcast " + from.str() + " to " + to.str());
    }
    return push(make(Op::Broadcast, {a}, to));
  }

  // Gradient of a scalar root with respect to each node in `wrt`. The result
  // nodes live in this graph. A node the root does not depend on gets a zero
  // constant of its shape.
  std::vector<Node> gradient(Node root, std::span<const Node> wrt);
  std::vector<Node> gradient(Node root, std::initializer_list<Node> wrt) {
    return gradient(root, std::span<const Node>(wrt.begin(), wrt.size()));
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] const NodeData& data(Node n) const {
    check_owned(n);
    return nodes_[n.id];
  }
  [[nodiscard]] const NodeData& data(std::uint32_t id) const { return nodes_[id]; }
  [[nodiscard]] const Array& constant_value(const NodeData& d) const { return constants_[d.payload]; }
  [[nodiscard]] const std::string& parameter_name(const NodeData& d) const {
    return parameter_names_[d.payload];
  }
  [[nodiscard]] std::size_t parameter_count() const { return parameter_names_.size(); }

 private:
  void check_owned(Node n) const {
    if (n.graph != this || n.id >= nodes_.size()) throw Error("node does not belong to this graph");
  }

  NodeData make(Op op, std::initializer_list<Node> in, Shape shape) const {
    NodeData d;
    d.op = op;
    d.shape = shape;
    for (Node n : in) {
      check_owned(n);
      d.inputs[d.arity++] = n.id;
    }
    return d;
  }

  Node push(const NodeData& d) {
    nodes_.push_back(d);
    return Node{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node unary(Op op, Node a) { return push(make(op, {a}, data(a).shape)); }

  // Elementwise ops broadcast a 1x1, 1xn or mx1 operand to the other's shape.
  Node binary(Op op, Node a, Node b) {
    const Shape sa = data(a).shape;
    const Shape sb = data(b).shape;
    if (sa != sb) {
      if (kernels::can_broadcast(sb, sa)) {
        b = broadcast(b, sa);
      } else if (kernels::can_broadcast(sa, sb)) {
        a = broadcast(a, sb);
      } else {
        throw ShapeError(std::string(op_name(op)) + " shape mismatch " + sa.str() + " vs " + sb.str());
      }
    }
    return push(make(op, {a, b}, data(a).shape));
  }

  std::vector<NodeData> nodes_;
  std::deque<Array> constants_;  // deque: references stay valid as the graph grows
  std::vector<std::string> parameter_names_;
};

inline Shape Node::shape() const { return graph->data(*this).shape; }

// Operator sugar; both operands must belong to the same graph.
inline Node operator+(Node a, Node b) { return a.graph->add(a, b); }
inline Node operator-(Node a, Node b) { return a.graph->sub(a, b); }
inline Node operator*(Node a, Node b) { return a.graph->mul(a, b); }
inline Node operator-(Node a) { return a.graph->scale(a, -1.0); }
inline Node operator*(Node a, double c) { return a.graph->scale(a, c); }
inline Node operator*(double c, Node a) { return a.graph->scale(a, c); }
inline Node operator+(Node a, double c) { return a + a.graph->constant(c); }
inline Node operator-(Node a, double c) { return a - a.graph->constant(c); }
inline Node operator-(double c, Node a) { return a.graph->constant(c) - a; }

inline Node matmul(Node a, Node b) { return a.graph->matmul(a, b); }
inline Node transpose(Node a) { return a.graph->transpose(a); }
inline Node tanh(Node a) { return a.graph->tanh(a); }
inline Node exp(Node a) { return a.graph->exp(a); }
inline Node log(Node a) { return a.graph->log(a); }
inline Node reciprocal(Node a) { return a.graph->reciprocal(a); }
inline Node square(Node a) { return a.graph->square(a); }
inline Node abs(Node a) { return a.graph->abs(a); }
inline Node max0(Node a) { return a.graph->max0(a); }
inline Node sign(Node a) { return a.graph->sign(a); }
inline Node sum(Node a) { return a.graph->sum(a); }
inline Node mean(Node a) { return a.graph->mean(a); }
inline Node sum_rows(Node a) { return a.graph->sum_rows(a); }
inline Node sum_cols(Node a) { return a.graph->sum_cols(a); }
inline Node broadcast(Node a, Shape to) { return a.graph->broadcast(a, to); }

inline std::vector<Node> Graph::gradient(Node root, std::span<const Node> wrt) {
  check_owned(root);
  if (!data(root).shape.is_scalar()) {
    throw ShapeError("gradient root must be scalar, got " + data(root).shape.str());
  }
  const std::size_t n = static_cast<std::size_t>(root.id) + 1;

  // Mark nodes below the root that depend on at least one wrt node.
  std::vector<char> depends(n, 0);
  std::size_t first = n;
  for (const Node& w : wrt) {
    check_owned(w);
    if (w.id < n) {
      depends[w.id] = 1;
      first = std::min<std::size_t>(first, w.id);
    }
  }
  for (std::size_t i = first; i < n; ++i) {
    const NodeData& d = nodes_[i];
    for (std::uint8_t k = 0; k < d.arity; ++k)
      if (depends[d.inputs[k]]) depends[i] = 1;
  }

  std::vector<std::optional<Node>> adj(n);
  auto accumulate = [&](std::uint32_t id, Node contribution) {
    if (!depends[id]) return;
    adj[id] = adj[id] ? add(*adj[id], contribution) : contribution;
  };

  if (depends[root.id]) adj[root.id] = constant(1.0);

  for (std::size_t i = n; i-- > first;) {
    if (!adj[i] || !depends[i]) continue;
    const NodeData d = nodes_[i];  // copy: the node vector grows below
    const Node g = *adj[i];
    const Node self{this, static_cast<std::uint32_t>(i)};
    const Node x{this, d.inputs[0]};
    const Node y{this, d.inputs[1]};
    switch (d.op) {
      case Op::Constant:
      case Op::Parameter:
      case Op::Sign:
        break;
      case Op::Add:
        accumulate(x.id, g);
        accumulate(y.id, g);
        break;
      case Op::Sub:
        accumulate(x.id, g);
        if (depends[y.id]) accumulate(y.id, scale(g, -1.0));
        break;
      case Op::Mul:
        if (depends[x.id]) accumulate(x.id, mul(g, y));
        if (depends[y.id]) accumulate(y.id, mul(g, x));
        break;
      case Op::MatMul:
        if (depends[x.id]) accumulate(x.id, matmul(g, transpose(y)));
        if (depends[y.id]) accumulate(y.id, matmul(transpose(x), g));
        break;
      case Op::Transpose:
        accumulate(x.id, transpose(g));
        break;
      case Op::Tanh:
        accumulate(x.id, sub(g, mul(g, square(self))));
        break;
      case Op::Exp:
        accumulate(x.id, mul(g, self));
        break;
      case Op::Log:
        accumulate(x.id, mul(g, reciprocal(x)));
        break;
      case Op::Reciprocal:
        accumulate(x.id, scale(mul(g, square(self)), -1.0));
        break;
      case Op::Square:
        accumulate(x.id, mul(g, scale(x, 2.0)));
        break;
      case Op::Abs:
        accumulate(x.id, mul(g, sign(x)));
        break;
      case Op::Max0:
        // Subgradient 0 at the kink.
        accumulate(x.id, mul(g, max0(sign(x))));
        break;
      case Op::Scale:
        accumulate(x.id, scale(g, d.factor));
        break;
      case Op::Sum:
        accumulate(x.id, broadcast(g, nodes_[x.id].shape));
        break;
      case Op::Mean: {
        const Shape s = nodes_[x.id].shape;
        accumulate(x.id, broadcast(scale(g, 1.0 / static_cast<double>(s.size())), s));
        break;
      }
      case Op::SumRows:
      case Op::SumCols:
        accumulate(x.id, broadcast(g, nodes_[x.id].shape));
        break;
      case Op::Broadcast: {
        const Shape from = nodes_[x.id].shape;
        if (from.is_scalar()) {
          accumulate(x.id, sum(g));
        } else if (from.rows == 1) {
          accumulate(x.id, sum_rows(g));
        } else {
          accumulate(x.id, sum_cols(g));
        }
        break;
      }
    }
  }

  std::vector<Node> out;
  out.reserve(wrt.size());
  for (const Node& w : wrt) {
    if (w.id < n && adj[w.id]) {
      out.push_back(*adj[w.id]);
    } else {
      out.push_back(constant(Array(nodes_[w.id].shape)));
    }
  }
  return out;
}

// Parameter values keyed by parameter node.
class Bindings {
 public:
  Bindings() = default;

  Bindings& bind(Node parameter, Array value) {
    for (auto& [node, v] : entries_) {
      if (node == parameter) {
        v = std::move(value);
        return *this;
      }
    }
    entries_.emplace_back(parameter, std::move(value));
    return *this;
  }

  [[nodiscard]] const Array* find(Node parameter) const {
    for (const auto& [node, v] : entries_)
      if (node == parameter) return &v;
    return nullptr;
  }

  [[nodiscard]] std::vector<std::pair<Node, Array>>& entries() { return entries_; }
  [[nodiscard]] const std::vector<std::pair<Node, Array>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<Node, Array>> entries_;
};

// Memoized forward evaluation of a graph at fixed bindings.
class Evaluator {
 public:
  Evaluator(const Graph& graph, Bindings bindings) : graph_(&graph), bindings_(std::move(bindings)) {
    for (const auto& [node, value] : bindings_.entries()) {
      const NodeData& d = graph.data(node);
      if (d.op != Op::Parameter) throw Error("binding target is not a parameter node");
      if (d.shape != value.shape) {
        throw ShapeError("binding for '" + graph.parameter_name(d) + "' has shape " + value.shape.str() +
                         ", expected " + d.shape.str());
      }
      if (!value.all_finite()) {
        throw NonFiniteError("non-finite binding for parameter '" + graph.parameter_name(d) + "'");
      }
    }
  }

  const Array& value(Node root) {
    if (root.graph != graph_) throw Error("node does not belong to the evaluated graph");
    if (slots_.size() < graph_->size()) {
      slots_.resize(graph_->size(), nullptr);
      owned_.resize(graph_->size());
    }
    if (slots_[root.id]) return *slots_[root.id];

    std::vector<std::uint32_t> pending{root.id};
    std::vector<std::uint32_t> order;
    std::vector<char> seen(static_cast<std::size_t>(root.id) + 1, 0);
    while (!pending.empty()) {
      const std::uint32_t id = pending.back();
      pending.pop_back();
      if (seen[id] || slots_[id]) continue;
      seen[id] = 1;
      order.push_back(id);
      const NodeData& d = graph_->data(id);
      for (std::uint8_t k = 0; k < d.arity; ++k) pending.push_back(d.inputs[k]);
    }
    std::sort(order.begin(), order.end());
    for (std::uint32_t id : order) compute(id);
    return *slots_[root.id];
  }

  [[nodiscard]] double scalar(Node root) { return value(root).item(); }
  [[nodiscard]] const Bindings& bindings() const { return bindings_; }

 private:
  void compute(std::uint32_t id) {
    const NodeData& d = graph_->data(id);
    auto in = [&](int k) -> const Array& { return *slots_[d.inputs[k]]; };
    Array out;
    switch (d.op) {
      case Op::Constant:
        slots_[id] = &graph_->constant_value(d);
        return;
      case Op::Parameter: {
        const Array* v = bindings_.find(Node{const_cast<Graph*>(graph_), id});
        if (v == nullptr) throw Error("unbound parameter '" + graph_->parameter_name(d) + "'");
        slots_[id] = v;
        return;
      }
      case Op::Add: out = kernels::zip(in(0), in(1), [](double a, double b) { return a + b; }); break;
      case Op::Sub: out = kernels::zip(in(0), in(1), [](double a, double b) { return a - b; }); break;
      case Op::Mul: out = kernels::zip(in(0), in(1), [](double a, double b) { return a * b; }); break;
      case Op::MatMul: out = kernels::matmul(in(0), in(1)); break;
      case Op::Transpose: out = kernels::transpose(in(0)); break;
      case Op::Tanh: out = kernels::tanh(in(0)); break;
      case Op::Exp: out = kernels::exp(in(0)); break;
      case Op::Log: out = kernels::map(in(0), [](double v) { return std::log(v); }); break;
      case Op::Reciprocal: out = kernels::map(in(0), [](double v) { return 1.0 / v; }); break;
      case Op::Square: out = kernels::map(in(0), [](double v) { return v * v; }); break;
      case Op::Abs: out = kernels::map(in(0), [](double v) { return std::fabs(v); }); break;
      case Op::Max0: out = kernels::map(in(0), [](double v) { return v > 0.0 ? v : 0.0; }); break;
      case Op::Sign: out = kernels::map(in(0), kernels::sign); break;
      case Op::Scale: {
        const double f = d.factor;
        out = kernels::map(in(0), [f](double v) { return f * v; });
        break;
      }
      case Op::Sum: out = Array::scalar(kernels::sum(in(0))); break;
      case Op::Mean: out = Array::scalar(kernels::sum(in(0)) / static_cast<double>(in(0).size())); break;
      case Op::SumRows: out = kernels::sum_rows(in(0)); break;
      case Op::SumCols: out = kernels::sum_cols(in(0)); break;
      case Op::Broadcast: out = kernels::broadcast(in(0), d.shape); break;
    }
    if (!out.all_finite()) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op_name(d.op) + " at node " +
                           std::to_string(id));
    }
    owned_[id] = std::make_unique<Array>(std::move(out));
    slots_[id] = owned_[id].get();
  }

  const Graph* graph_;
  Bindings bindings_;
  std::vector<const Array*> slots_;
  std::vector<std::unique_ptr<Array>> owned_;
};

// One-shot forward evaluation.
inline Array evaluate(const Graph& graph, Node root, const Bindings& bindings) {
  Evaluator ev(graph, bindings);
  return ev.value(root);
}

namespace detail {

// Worst relative error between the autodiff gradient of `root` and
// numeric(probe) over every bound parameter coordinate, where probe(delta)
// evaluates root with that coordinate shifted by delta.
template <class Numeric>
double gradient_check(Graph& graph, Node root, const Bindings& bindings, Numeric&& numeric) {
  std::vector<Node> params;
  for (const auto& entry : bindings.entries()) params.push_back(entry.first);
  const std::vector<Node> grads = graph.gradient(root, params);

  Evaluator base(graph, bindings);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Array analytic = base.value(grads[p]);
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      auto probe = [&](double delta) {
        Bindings shifted = bindings;
        shifted.entries()[p].second.data[k] += delta;
        const double f = evaluate(graph, root, shifted).item();
        if (!std::isfinite(f)) throw NonFiniteError("non-finite evaluation near the probe point");
        return f;
      };
      const double n = numeric(probe);
      const double a = analytic.data[k];
      const double denom = std::max({std::fabs(a), std::fabs(n), 1e-8});
      worst = std::max(worst, std::fabs(a - n) / denom);
    }
  }
  return worst;
}

}  // namespace detail

// Central differences (f(x+e) - f(x-e)) / 2e per coordinate against
// `gradient`. The relative error uses max(|analytic|, |numeric|, 1e-8) as
// denominator.
inline double finite_difference_check(Graph& graph, Node root, const Bindings& bindings, double epsilon) {
  if (!(epsilon > 0.0)) throw Error("finite_difference_check requires epsilon > 0");
  return detail::gradient_check(graph, root, bindings, [epsilon](auto& probe) {
    return (probe(epsilon) - probe(-epsilon)) / (2.0 * epsilon);
  });
}

// Same check with central differences extrapolated from steps e and e/2:
// (4 D(e/2) - D(e)) / 3 cancels the e^2 term, so a larger step can be used
// and rounding noise stays small next to small gradient components.
inline double richardson_difference_check(Graph& graph, Node root, const Bindings& bindings, double epsilon) {
  if (!(epsilon > 0.0)) throw Error("richardson_difference_check requires epsilon > 0");
  return detail::gradient_check(graph, root, bindings, [epsilon](auto& probe) {
    const double h = epsilon / 2.0;
    const double coarse = (probe(epsilon) - probe(-epsilon)) / (2.0 * epsilon);
    const double fine = (probe(h) - probe(-h)) / (2.0 * h);
    return (4.0 * fine - coarse) / 3.0;
  });
}

}  // namespace metadapt::ad
