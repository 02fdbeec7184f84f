#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ratekd/tensor.hpp"

RATEKD_BEGIN_NAMESPACE

/// A named trainable tensor. Frozen parameters still participate in forward
/// computation and pass gradients through to their inputs, but never receive
/// gradients themselves.
struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
  bool decay = true;  ///< weight decay applies (false for normalization affine)
};

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

/// One recorded operation. Nodes form a DAG through `inputs`; `order` is the
/// creation index, which is a valid topological order.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
  const Parameter* param = nullptr;
  std::uint64_t order = 0;

  /// Adds `g` into this node's gradient if it participates in differentiation.
  void accumulate(const Tensor& g);
  void accumulate(Tensor&& g);
};

/// Handle to a value in the gradient graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// A leaf holding `value`; with requires_grad its gradient is available via
  /// grad() after GradGraph::backward.
  static Var leaf(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& grad() const { return node_->grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

/// Records a new op. The backward function, if the result requires grad,
/// reads self.grad and accumulates into self.inputs[i].
Var make_op(Tensor value, std::vector<Var> inputs, BackwardFn backward);

using GradMap = std::map<std::string, Tensor>;

/// Per-step graph context: binds parameters to leaves and runs reverse-mode
/// differentiation. With recording disabled every leaf is a constant and no
/// intermediate values are retained.
class GradGraph {
 public:
  explicit GradGraph(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }

  /// Leaf bound to a parameter; repeated calls return the same leaf.
  Var param(const Parameter& p);
  Var constant(Tensor t) const { return Var::leaf(std::move(t), false); }

  /// Gradients of scalar `loss` w.r.t. every bound trainable parameter,
  /// keyed by parameter name. Intermediate gradients are released.
  GradMap backward(const Var& loss);

 private:
  bool recording_;
  std::unordered_map<const Parameter*, Var> leaves_;
};

// Differentiable ops. Shapes are checked; mismatches raise ShapeError.
namespace ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
Var relu(const Var& a);
Var log(const Var& a);
Var square(const Var& a);

Var matmul(const Var& a, const Var& b);
/// x[N,in] * w[out,in]^T + b[out]
Var linear(const Var& x, const Var& w, const Var& b);
Var conv2d(const Var& x, const Var& w, const Var* bias, int stride, int pad);

/// Normalization with batch statistics, differentiated through the
/// statistics. `stats_out` receives the (mean, biased var) used.
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, Real eps,
                     Tensor* mean_out = nullptr, Tensor* var_out = nullptr);
/// Normalization with externally supplied constant statistics.
Var batch_norm_fixed(const Var& x, const Tensor& mean, const Tensor& var, const Var& gamma,
                     const Var& beta, Real eps);

Var global_avg_pool(const Var& x);
/// Non-overlapping k x k average pooling.
Var avg_pool2d(const Var& x, int k);
Var reshape(const Var& x, Shape s);
Var flatten(const Var& x);

/// Row-wise softmax over the last axis of a rank-2 tensor.
Var softmax(const Var& logits);
Var log_softmax(const Var& logits);

Var sum(const Var& x);
Var mean(const Var& x);
/// Mean over one axis; the axis is removed from the shape.
Var mean_axis(const Var& x, std::size_t axis);

/// Straight-through node: forward emits `value`; backward multiplies the
/// incoming gradient by `multiplier` elementwise and routes it to `input`.
Var custom_node(const Var& input, Tensor value, Tensor multiplier);
/// As above with value = input's own value.
Var custom_node(const Var& input, Tensor multiplier);

}  // namespace ad

RATEKD_END_NAMESPACE
