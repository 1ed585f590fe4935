#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "prunelab/tensor.hpp"

namespace prunelab {

/// Handle to a node inside a Graph.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

/// Tape-based reverse-mode differentiation over a fixed set of 2-D ops.
///
/// Nodes are appended in execution order; backward() walks them in reverse
/// insertion order exactly once, so gradient accumulation order is fixed.
/// A graph built with `record = false` evaluates eagerly and keeps no
/// backward closures (inference mode).
///
/// Parameters enter the graph through param(); their gradients accumulate
/// into the bound Tensor's `grad` buffer. The bound tensor must outlive the
/// graph.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t);
  Var param(Tensor& t);
  /// Binds `t` read-only: no copy, no gradient.
  Var constant_ref(const Tensor& t);

  const Shape& shape(Var v) const;
  std::span<const double> data(Var v) const;
  Tensor value(Var v) const;

  Var matmul(Var a, Var b);
  /// Elementwise sum; `b` may also be a vector broadcast over the rows of `a`.
  Var add(Var a, Var b);
  Var scale(Var a, double s);
  /// Softmax along the last axis.
  Var softmax(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps);
  /// tanh approximation.
  Var gelu(Var a);
  /// Gathers rows of `table` ([V x d]) for each id.
  Var embedding(Var table, std::span<const int> ids);
  /// x: [T x Cin], w: [Cout x Cin x K]; zero padding. Returns [T' x Cout].
  Var conv1d(Var x, Var w, std::size_t stride, std::size_t pad);
  Var transpose(Var a);
  Var reshape(Var a, Shape shape);
  Var slice_cols(Var a, std::size_t begin, std::size_t count);
  Var concat_cols(std::span<const Var> parts);
  Var concat_rows(Var a, Var b);
  /// Mean negative log-likelihood over rows of `logits` ([T x V]).
  Var cross_entropy(Var logits, std::span<const int> targets);

  /// Populates gradients of every reachable parameter. `seed` is dL/dL.
  void backward(Var loss, double seed = 1.0);

 private:
  struct Node {
    Shape shape;
    std::vector<double> own;
    const Tensor* external = nullptr;
    Tensor* param = nullptr;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void()> backward;

    const double* ptr() const { return external ? external->data.data() : own.data(); }
    std::size_t numel() const { return external ? external->data.size() : own.size(); }
  };

  Var push(Shape shape, std::vector<double> values, bool needs_grad);
  const Node& node(Var v) const;
  bool needs(Var v) const { return node(v).needs_grad; }
  bool any_needs(std::initializer_list<Var> vs) const;
  std::vector<double>& grad_buf(std::uint32_t id);
  const std::vector<double>& grad_of(std::uint32_t id) const { return nodes_[id].grad; }

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

}  // namespace prunelab
