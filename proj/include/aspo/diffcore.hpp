// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode differentiation over small dense double arrays.
//
// A Tape owns every node of one computation graph. Nodes are appended in
// creation order, so the node index is already a topological order and the
// backward sweep is a single reverse pass. Graphs are confined to the thread
// that builds them; separate tapes are independent.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "aspo/error.hpp"

namespace aspo::diff {

struct Shape {
  std::size_t rows = 1;
  std::size_t cols = 1;

  std::size_t size() const { return rows * cols; }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  friend bool operator==(const Shape&, const Shape&) = default;

  static Shape scalar() { return {1, 1}; }
  static Shape vector(std::size_t n) { return {n, 1}; }
  static Shape matrix(std::size_t r, std::size_t c) { return {r, c}; }
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + ")";
}

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  exp,
  log,
  tanh,
  affine,
  log_softmax,
  sum,
  mean,
  min,
  max,
  clip_const,
  stop_gradient,
  concat,
  pick,
  row,
};

/// Scalar attributes some ops carry (clip bounds, selected index).
struct OpParams {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t index = 0;
};

// Forward kernels shared by the graph and by graph-free evaluation paths
// (sampling, telemetry). Both paths must call these so values agree bit for bit.
namespace kernels {

/// out[i] = sum_j W[i,j] x[j] (+ b[i]); accumulation left to right, bias last.
inline void affine(std::span<const double> w, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<const double> b, std::span<double> out) {
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    const double* wr = w.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) acc += wr[j] * x[j];
    out[i] = b.empty() ? acc : acc + b[i];
  }
}

inline void log_softmax(std::span<const double> x, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
}

inline void tanh(std::span<const double> x, std::span<double> out) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
}

}  // namespace kernels

class Tape;

/// Handle to a node (the DiffValue of the design): cheap to copy, valid while
/// its tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;
  double scalar() const;
  bool stop_grad() const;
  OpKind op() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Read access to gradients after a backward sweep.
class GradientMap {
 public:
  explicit GradientMap(const Tape* tape) : tape_(tape) {}
  std::span<const double> operator[](const Var& v) const;

 private:
  const Tape* tape_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf node. `trainable` leaves receive gradients; constants are leaves
  /// with the stop-gradient flag set.
  Var leaf(std::vector<double> data, Shape shape, bool trainable = true) {
    if (data.size() != shape.size()) {
      throw Error(ErrorCode::shape_mismatch,
                  "leaf data of size " + std::to_string(data.size()) + " for shape " + diff::to_string(shape));
    }
    Node n;
    n.op = OpKind::leaf;
    n.shape = shape;
    n.value = std::move(data);
    n.stop_grad = !trainable;
    return push(std::move(n));
  }
  Var variable(std::vector<double> data) {
    const auto n = data.size();
    return leaf(std::move(data), Shape::vector(n), true);
  }
  Var variable(double x) { return leaf({x}, Shape::scalar(), true); }
  Var constant(std::vector<double> data) {
    const auto n = data.size();
    return leaf(std::move(data), Shape::vector(n), false);
  }
  Var constant(double x) { return leaf({x}, Shape::scalar(), false); }

  Var apply(OpKind op, std::span<const Var> inputs, const OpParams& params = {});
  Var apply(OpKind op, std::initializer_list<Var> inputs, const OpParams& params = {}) {
    return apply(op, std::span<const Var>(inputs.begin(), inputs.size()), params);
  }

  /// Frozen node whose forward value is `value`, recorded as a function of
  /// `source`. Gradient never flows through it. This is how value-only
  /// quantities computed outside the graph (clipped weights, masks) enter it.
  Var stop_gradient(const Var& source, std::vector<double> value, Shape shape);
  Var stop_gradient(const Var& source) { return apply(OpKind::stop_gradient, {source}); }

  /// Populates grad of every node reachable from `root`. Earlier gradients
  /// on this tape are discarded first.
  GradientMap backward(const Var& root);

  std::size_t size() const { return nodes_.size(); }

  /// Forward values of all stop-gradient nodes, in creation order.
  std::vector<std::vector<double>> frozen_values() const {
    std::vector<std::vector<double>> out;
    for (const auto& n : nodes_) {
      if (n.op == OpKind::stop_gradient) out.push_back(n.value);
    }
    return out;
  }

  /// Replays `values` as the outputs of this tape's stop-gradient nodes, in
  /// creation order. Used by finite differences so frozen factors stay
  /// constant under perturbation, which is what stop-gradient means.
  void pin_frozen(std::vector<std::vector<double>> values) {
    pinned_ = std::move(values);
    pinned_active_ = true;
    pinned_cursor_ = 0;
  }

 private:
  friend class Var;
  friend class GradientMap;

  struct Node {
    OpKind op = OpKind::leaf;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::uint32_t> inputs;
    OpParams params;
    bool stop_grad = false;
  };

  Var push(Node n) {
    n.grad.assign(n.value.size(), 0.0);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  const Node& node(const Var& v) const {
    check_owned(v);
    return nodes_[v.id()];
  }

  void check_owned(const Var& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw Error(ErrorCode::invalid_argument, "node does not belong to this tape");
    }
  }

  Var frozen_output(Node n) {
    if (pinned_active_) {
      if (pinned_cursor_ >= pinned_.size() || pinned_[pinned_cursor_].size() != n.value.size()) {
        throw Error(ErrorCode::shape_mismatch, "pinned frozen values do not match the graph");
      }
      n.value = pinned_[pinned_cursor_++];
    }
    return push(std::move(n));
  }

  Var elementwise_binary(OpKind op, const Node& a, const Node& b, std::uint32_t ia, std::uint32_t ib);
  void backward_node(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> pinned_;
  bool pinned_active_ = false;
  std::size_t pinned_cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Var accessors

inline const Shape& Var::shape() const { return tape_->node(*this).shape; }
inline std::span<const double> Var::value() const { return tape_->node(*this).value; }
inline std::span<const double> Var::grad() const { return tape_->node(*this).grad; }
inline bool Var::stop_grad() const { return tape_->node(*this).stop_grad; }
inline OpKind Var::op() const { return tape_->node(*this).op; }
inline double Var::scalar() const {
  const auto& n = tape_->node(*this);
  if (!n.shape.is_scalar()) throw Error(ErrorCode::shape_mismatch, "scalar() on " + to_string(n.shape));
  return n.value[0];
}

inline std::span<const double> GradientMap::operator[](const Var& v) const { return tape_->node(v).grad; }

// ---------------------------------------------------------------------------
// Forward

namespace detail {

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::shape_mismatch, what);
}

inline std::size_t arity(OpKind op) {
  switch (op) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul:
    case OpKind::div:
    case OpKind::min:
    case OpKind::max: return 2;
    case OpKind::affine: return 0;  // 2 or 3
    case OpKind::concat: return 0;  // >= 1
    case OpKind::leaf: return 0;
    default: return 1;
  }
}

}  // namespace detail

inline Var Tape::elementwise_binary(OpKind op, const Node& a, const Node& b, std::uint32_t ia, std::uint32_t ib) {
  const bool same = a.shape == b.shape;
  detail::require_shape(same || a.shape.is_scalar() || b.shape.is_scalar(),
                        "binary op on " + diff::to_string(a.shape) + " and " + diff::to_string(b.shape));
  const Shape out_shape = same ? a.shape : (a.shape.is_scalar() ? b.shape : a.shape);
  const std::size_t n = out_shape.size();
  std::vector<double> out(n);
  const bool sa = a.shape.size() == 1 && n != 1;
  const bool sb = b.shape.size() == 1 && n != 1;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.value[sa ? 0 : i];
    const double y = b.value[sb ? 0 : i];
    switch (op) {
      case OpKind::add: out[i] = x + y; break;
      case OpKind::sub: out[i] = x - y; break;
      case OpKind::mul: out[i] = x * y; break;
      case OpKind::div:
        if (y == 0.0) throw Error(ErrorCode::domain_error, "division by zero");
        out[i] = x / y;
        break;
      case OpKind::min: out[i] = (x <= y) ? x : y; break;
      case OpKind::max: out[i] = (x >= y) ? x : y; break;
      default: break;
    }
  }
  Node r;
  r.op = op;
  r.shape = out_shape;
  r.value = std::move(out);
  r.inputs = {ia, ib};
  return push(std::move(r));
}

inline Var Tape::apply(OpKind op, std::span<const Var> inputs, const OpParams& params) {
  for (const auto& v : inputs) check_owned(v);
  const std::size_t want = detail::arity(op);
  if (op == OpKind::leaf) throw Error(ErrorCode::invalid_argument, "use Tape::leaf for leaves");
  if (want != 0 && inputs.size() != want) {
    throw Error(ErrorCode::invalid_argument, "wrong number of inputs");
  }
  if (op == OpKind::affine && inputs.size() != 2 && inputs.size() != 3) {
    throw Error(ErrorCode::invalid_argument, "affine takes (W, x) or (W, x, b)");
  }
  if (op == OpKind::concat && inputs.empty()) throw Error(ErrorCode::invalid_argument, "concat of nothing");

  switch (op) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul:
    case OpKind::div:
    case OpKind::min:
    case OpKind::max: {
      // Copy ids before push() may reallocate nodes_.
      const auto ia = inputs[0].id(), ib = inputs[1].id();
      return elementwise_binary(op, nodes_[ia], nodes_[ib], ia, ib);
    }
    default: break;
  }

  const std::uint32_t i0 = inputs[0].id();
  const Node& a = nodes_[i0];
  Node r;
  r.op = op;
  r.params = params;
  for (const auto& v : inputs) r.inputs.push_back(v.id());

  switch (op) {
    case OpKind::exp:
      r.shape = a.shape;
      r.value.resize(a.value.size());
      for (std::size_t i = 0; i < a.value.size(); ++i) r.value[i] = std::exp(a.value[i]);
      break;
    case OpKind::log:
      r.shape = a.shape;
      r.value.resize(a.value.size());
      for (std::size_t i = 0; i < a.value.size(); ++i) {
        if (!(a.value[i] > 0.0)) {
          throw Error(ErrorCode::domain_error, "log of non-positive value " + std::to_string(a.value[i]));
        }
        r.value[i] = std::log(a.value[i]);
      }
      break;
    case OpKind::tanh:
      r.shape = a.shape;
      r.value.resize(a.value.size());
      kernels::tanh(a.value, r.value);
      break;
    case OpKind::affine: {
      const Node& x = nodes_[inputs[1].id()];
      detail::require_shape(x.shape.cols == 1 && x.shape.rows == a.shape.cols,
                            "affine W" + diff::to_string(a.shape) + " x" + diff::to_string(x.shape));
      std::span<const double> bias;
      if (inputs.size() == 3) {
        const Node& b = nodes_[inputs[2].id()];
        detail::require_shape(b.shape == Shape::vector(a.shape.rows), "affine bias " + diff::to_string(b.shape));
        bias = b.value;
      }
      r.shape = Shape::vector(a.shape.rows);
      r.value.resize(a.shape.rows);
      kernels::affine(a.value, a.shape.rows, a.shape.cols, x.value, bias, r.value);
      break;
    }
    case OpKind::log_softmax:
      detail::require_shape(a.shape.cols == 1 && a.shape.rows >= 1, "log_softmax expects a vector");
      r.shape = a.shape;
      r.value.resize(a.value.size());
      kernels::log_softmax(a.value, r.value);
      break;
    case OpKind::sum:
    case OpKind::mean: {
      double s = 0.0;
      for (double v : a.value) s += v;
      r.shape = Shape::scalar();
      r.value = {op == OpKind::mean ? s / static_cast<double>(a.value.size()) : s};
      break;
    }
    case OpKind::clip_const:
      if (!(params.lo <= params.hi)) throw Error(ErrorCode::invalid_argument, "clip bounds lo > hi");
      r.shape = a.shape;
      r.value.resize(a.value.size());
      for (std::size_t i = 0; i < a.value.size(); ++i) r.value[i] = std::clamp(a.value[i], params.lo, params.hi);
      break;
    case OpKind::stop_gradient:
      r.shape = a.shape;
      r.value = a.value;
      r.stop_grad = true;
      return frozen_output(std::move(r));
    case OpKind::concat: {
      std::size_t n = 0;
      for (const auto& v : inputs) {
        const Node& c = nodes_[v.id()];
        detail::require_shape(c.shape.cols == 1, "concat expects vectors");
        n += c.value.size();
      }
      r.shape = Shape::vector(n);
      r.value.reserve(n);
      for (const auto& v : inputs) {
        const Node& c = nodes_[v.id()];
        r.value.insert(r.value.end(), c.value.begin(), c.value.end());
      }
      break;
    }
    case OpKind::pick:
      if (params.index >= a.value.size()) {
        throw Error(ErrorCode::out_of_range, "pick index " + std::to_string(params.index));
      }
      r.shape = Shape::scalar();
      r.value = {a.value[params.index]};
      break;
    case OpKind::row: {
      if (params.index >= a.shape.rows) throw Error(ErrorCode::out_of_range, "row index " + std::to_string(params.index));
      const auto* p = a.value.data() + params.index * a.shape.cols;
      r.shape = Shape::vector(a.shape.cols);
      r.value.assign(p, p + a.shape.cols);
      break;
    }
    default:
      throw Error(ErrorCode::invalid_argument, "unsupported op");
  }
  return push(std::move(r));
}

inline Var Tape::stop_gradient(const Var& source, std::vector<double> value, Shape shape) {
  check_owned(source);
  if (value.size() != shape.size()) throw Error(ErrorCode::shape_mismatch, "frozen value size");
  Node r;
  r.op = OpKind::stop_gradient;
  r.shape = shape;
  r.value = std::move(value);
  r.inputs = {source.id()};
  r.stop_grad = true;
  return frozen_output(std::move(r));
}

// ---------------------------------------------------------------------------
// Backward

inline GradientMap Tape::backward(const Var& root) {
  check_owned(root);
  if (!nodes_[root.id()].shape.is_scalar()) {
    throw Error(ErrorCode::non_scalar_root, "backward from " + diff::to_string(nodes_[root.id()].shape));
  }
  for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  nodes_[root.id()].grad[0] = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) backward_node(id);
  return GradientMap(this);
}

inline void Tape::backward_node(std::size_t id) {
  Node& n = nodes_[id];
  if (n.stop_grad || n.op == OpKind::leaf) return;
  const auto& g = n.grad;

  auto binary_in = [&](std::size_t k) -> Node& { return nodes_[n.inputs[k]]; };
  // index into a possibly scalar-broadcast operand
  auto at = [](const Node& m, std::size_t i) { return m.value.size() == 1 ? m.value[0] : m.value[i]; };
  auto acc = [](Node& m, std::size_t i, double d) {
    if (m.grad.size() == 1) m.grad[0] += d; else m.grad[i] += d;
  };

  switch (n.op) {
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul:
    case OpKind::div:
    case OpKind::min:
    case OpKind::max: {
      Node& a = binary_in(0);
      Node& b = binary_in(1);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = at(a, i), y = at(b, i), gi = g[i];
        switch (n.op) {
          case OpKind::add: acc(a, i, gi); acc(b, i, gi); break;
          case OpKind::sub: acc(a, i, gi); acc(b, i, -gi); break;
          case OpKind::mul: acc(a, i, gi * y); acc(b, i, gi * x); break;
          case OpKind::div: acc(a, i, gi / y); acc(b, i, -gi * x / (y * y)); break;
          // ties route to the first argument
          case OpKind::min: if (x <= y) acc(a, i, gi); else acc(b, i, gi); break;
          case OpKind::max: if (x >= y) acc(a, i, gi); else acc(b, i, gi); break;
          default: break;
        }
      }
      break;
    }
    case OpKind::exp: {
      Node& a = nodes_[n.inputs[0]];
      for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * n.value[i];
      break;
    }
    case OpKind::log: {
      Node& a = nodes_[n.inputs[0]];
      for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] / a.value[i];
      break;
    }
    case OpKind::tanh: {
      Node& a = nodes_[n.inputs[0]];
      for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      break;
    }
    case OpKind::affine: {
      Node& w = nodes_[n.inputs[0]];
      Node& x = nodes_[n.inputs[1]];
      const std::size_t rows = w.shape.rows, cols = w.shape.cols;
      for (std::size_t i = 0; i < rows; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        double* gw = w.grad.data() + i * cols;
        const double* wr = w.value.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) {
          gw[j] += gi * x.value[j];
          x.grad[j] += gi * wr[j];
        }
      }
      if (n.inputs.size() == 3) {
        Node& b = nodes_[n.inputs[2]];
        for (std::size_t i = 0; i < rows; ++i) b.grad[i] += g[i];
      }
      break;
    }
    case OpKind::log_softmax: {
      Node& a = nodes_[n.inputs[0]];
      double gs = 0.0;
      for (double v : g) gs += v;
      for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] - std::exp(n.value[i]) * gs;
      break;
    }
    case OpKind::sum:
    case OpKind::mean: {
      Node& a = nodes_[n.inputs[0]];
      const double d = n.op == OpKind::mean ? g[0] / static_cast<double>(a.value.size()) : g[0];
      for (auto& v : a.grad) v += d;
      break;
    }
    case OpKind::clip_const: {
      Node& a = nodes_[n.inputs[0]];
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = a.value[i];
        if (x >= n.params.lo && x <= n.params.hi) a.grad[i] += g[i];
      }
      break;
    }
    case OpKind::concat: {
      std::size_t off = 0;
      for (auto in : n.inputs) {
        Node& c = nodes_[in];
        for (std::size_t i = 0; i < c.grad.size(); ++i) c.grad[i] += g[off + i];
        off += c.grad.size();
      }
      break;
    }
    case OpKind::pick: {
      nodes_[n.inputs[0]].grad[n.params.index] += g[0];
      break;
    }
    case OpKind::row: {
      Node& m = nodes_[n.inputs[0]];
      double* gr = m.grad.data() + n.params.index * m.shape.cols;
      for (std::size_t j = 0; j < m.shape.cols; ++j) gr[j] += g[j];
      break;
    }
    default: break;
  }
}

// ---------------------------------------------------------------------------
// Free-function front end

inline Var operator+(const Var& a, const Var& b) { return a.tape()->apply(OpKind::add, {a, b}); }
inline Var operator-(const Var& a, const Var& b) { return a.tape()->apply(OpKind::sub, {a, b}); }
inline Var operator*(const Var& a, const Var& b) { return a.tape()->apply(OpKind::mul, {a, b}); }
inline Var operator/(const Var& a, const Var& b) { return a.tape()->apply(OpKind::div, {a, b}); }
inline Var operator+(const Var& a, double b) { return a + a.tape()->constant(b); }
inline Var operator-(const Var& a, double b) { return a - a.tape()->constant(b); }
inline Var operator*(const Var& a, double b) { return a * a.tape()->constant(b); }
inline Var operator/(const Var& a, double b) { return a / a.tape()->constant(b); }
inline Var operator*(double a, const Var& b) { return b.tape()->constant(a) * b; }
inline Var operator-(double a, const Var& b) { return b.tape()->constant(a) - b; }
inline Var operator-(const Var& a) { return a.tape()->constant(0.0) - a; }

inline Var exp(const Var& a) { return a.tape()->apply(OpKind::exp, {a}); }
inline Var log(const Var& a) { return a.tape()->apply(OpKind::log, {a}); }
inline Var tanh(const Var& a) { return a.tape()->apply(OpKind::tanh, {a}); }
inline Var log_softmax(const Var& a) { return a.tape()->apply(OpKind::log_softmax, {a}); }
inline Var sum(const Var& a) { return a.tape()->apply(OpKind::sum, {a}); }
inline Var mean(const Var& a) { return a.tape()->apply(OpKind::mean, {a}); }
inline Var minimum(const Var& a, const Var& b) { return a.tape()->apply(OpKind::min, {a, b}); }
inline Var maximum(const Var& a, const Var& b) { return a.tape()->apply(OpKind::max, {a, b}); }
inline Var clip(const Var& a, double lo, double hi) {
  return a.tape()->apply(OpKind::clip_const, {a}, OpParams{lo, hi, 0});
}
inline Var stop_gradient(const Var& a) { return a.tape()->stop_gradient(a); }
inline Var affine(const Var& w, const Var& x) { return w.tape()->apply(OpKind::affine, {w, x}); }
inline Var affine(const Var& w, const Var& x, const Var& b) { return w.tape()->apply(OpKind::affine, {w, x, b}); }
inline Var pick(const Var& a, std::size_t index) {
  return a.tape()->apply(OpKind::pick, {a}, OpParams{0.0, 0.0, index});
}
inline Var row(const Var& m, std::size_t index) {
  return m.tape()->apply(OpKind::row, {m}, OpParams{0.0, 0.0, index});
}
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorCode::invalid_argument, "concat of nothing");
  return parts.front().tape()->apply(OpKind::concat, parts);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Builds a scalar from a parameter vector on the supplied tape.
using GraphFunction = std::function<Var(Tape&, const Var& params)>;

/// Maximum over parameters of |analytic - central difference| / max(1, |central difference|).
/// Frozen (stop-gradient) values are pinned to their unperturbed values while
/// differencing, so the oracle measures the same derivative backward computes.
inline double check_gradient(const GraphFunction& f, std::span<const double> params, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorCode::invalid_argument, "eps must be positive");
  std::vector<double> p(params.begin(), params.end());

  Tape base;
  const Var x = base.variable(p);
  const Var y = f(base, x);
  if (!std::isfinite(y.scalar())) throw Error(ErrorCode::non_finite, "objective is not finite at the base point");
  base.backward(y);
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  const auto frozen = base.frozen_values();

  auto eval = [&](const std::vector<double>& q) {
    Tape t;
    t.pin_frozen(frozen);
    const double v = f(t, t.variable(q)).scalar();
    if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "objective is not finite under perturbation");
    return v;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto q = p;
    q[i] = p[i] + eps;
    const double fp = eval(q);
    q[i] = p[i] - eps;
    const double fm = eval(q);
    const double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace aspo::diff
