#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mcblock/tensor.hpp"

namespace mcblock {

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Dynamic reverse-mode tape. Rebuilt for every forward pass; nodes are
/// recorded in insertion order and backward visits them exactly once in
/// reverse. Confined to one thread.
class Graph {
 public:
  /// Receives the upstream gradient and one slot per input; a slot is null
  /// when that input does not require a gradient. Slots arrive zero-filled
  /// or already holding earlier contributions, so implementations accumulate.
  using CustomBackward =
      std::function<void(const Tensor& d_out, std::span<Tensor* const> d_inputs)>;

  Var constant(Tensor value);
  /// Leaf with requires_grad set; its gradient is read back with grad().
  Var parameter(Tensor value);

  const Tensor& value(Var v) const;
  /// Gradient accumulated by backward(); zeros of the value's shape if the
  /// node was never reached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var conv2d(Var input, Var kernel, int stride, int padding);
  /// x [N,C,H,W] + b[C] broadcast over N,H,W.
  Var add_channel_bias(Var x, Var bias);
  /// x [N,D] * w [D,K] + b [K].
  Var dense(Var x, Var weight, Var bias);

  Var relu(Var x);
  Var leaky_relu(Var x, float alpha);
  Var sigmoid(Var x);
  Var exp(Var x);
  /// Elementwise product. `b` must have a's rank with each extent equal to
  /// a's or 1 (mask broadcast, e.g. [1,1,H,W] or [1,C,1,1] over [N,C,H,W]).
  Var mul(Var a, Var b);
  Var scale(Var x, float s);
  Var add(Var a, Var b);

  Var sum(Var x);
  Var mean(Var x);
  Var max_pool2d(Var x, int kernel, int stride);
  Var softmax(Var x);
  Var reshape(Var x, Shape shape);
  /// Mean over rows of -log softmax(logits)[label]; logits [N,C].
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);

  /// Escape hatch for fused ops with hand-derived gradients.
  Var custom(std::span<const Var> inputs, Tensor value, CustomBackward backward);

  /// Requires a single-element node. The graph is consumed afterwards; call
  /// reset() before reuse.
  void backward(Var loss);
  void reset();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    bool requires_grad = false;
    std::function<void(Graph&, int)> backward;
  };

  Var push(Tensor value, std::vector<int> inputs, std::function<void(Graph&, int)> backward);
  const Node& node(Var v) const;
  Tensor& grad_slot(int id);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace mcblock
