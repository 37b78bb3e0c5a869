#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "svil/tensor.hpp"

namespace svil::ad {

class Graph;

// Handle to a node of an evaluation trace. Cheap to copy; only valid while
// the owning Graph is alive.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

// Reverse-mode evaluation trace. Nodes are appended in evaluation order, so
// replaying them backwards visits every consumer before its inputs.
class Graph {
 public:
  // Receives the node's output gradient; accumulates into the inputs.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Appends an op output. `backward` may be empty when no input needs a
  // gradient.
  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  // Gradient of the last backward() w.r.t. `v`; zeros if unreachable.
  Tensor grad(Var v) const;

  // Adds `delta` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& delta);
  // Direct access to the (lazily zero-filled) gradient buffer.
  Tensor* grad_buffer(Var v);

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Per-sample AdaIN target: replaces the channel statistics of `sample`.
struct RestyleTarget {
  std::size_t sample = 0;
  std::vector<double> mu;
  std::vector<double> sigma;
};

// Feature maps are [N, C, P] with P = H*W spatial positions.

// out[n,o,p] = sum_c w[o,c] * x[n,c,p] + b[o]
Var channel_mix(Var x, Var weight, Var bias);
Var relu(Var x);
// Global average pooling: [N,C,P] -> [N,C].
Var spatial_mean(Var x);
// out[n,o] = sum_i w[o,i] * x[n,i] + b[o]
Var dense(Var x, Var weight, Var bias);
// Row-wise v / ||v||. Rank-1 input is treated as a single row. Zero rows are rejected.
Var l2_normalize_rows(Var x);
// a[N,D] * b[M,D]^T -> [N,M]
Var matmul_nt(Var a, Var b);
// x / s for a single-element s.
Var div_scalar(Var x, Var s);
Var softmax_rows(Var x);
// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);
Var sum(Var x);
Var mean(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
// Euclidean distances between rows; the diagonal is exactly zero.
Var pairwise_distance(Var x);
// Batch-hard triplet on a distance matrix: per anchor, hardest positive minus
// hardest negative plus margin, hinged at zero, averaged over anchors that
// have at least one positive and one negative.
Var batch_hard_triplet(Var dist, std::span<const int> labels, double margin);
// Replaces the channel statistics of selected samples:
//   y = sigma_t * (x - mu(x)) / sigma(x) + mu_t, sigma(x) = sqrt(var + eps).
// Samples without a target pass through untouched.
Var restyle(Var x, std::span<const RestyleTarget> targets, double eps);
Var select_rows(Var x, std::span<const std::size_t> rows);

}  // namespace svil::ad
