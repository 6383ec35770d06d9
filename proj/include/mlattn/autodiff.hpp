#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlattn/ops.hpp"
#include "mlattn/tensor.hpp"

namespace mlattn::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value in the differentiable graph. `backward` reads this node's grad
// and accumulates into the parents' grads.
struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::string op;

  void accumulate(const Tensor& g);
};

// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  // Zero tensor of the value's shape when no gradient has arrived.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// While alive, ops on this thread record no backward rules.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Leaf holding a trainable value.
Var parameter(Tensor value);
// Leaf that never receives gradient.
Var constant(Tensor value);

// Runs reverse-mode accumulation from a scalar (single-element) loss.
// Each reachable node is visited once, in reverse topological order; grads
// accumulate by summation at fan-out.
void backward(const Var& loss);

// Fault injection for exercising the gradient checker: while set, the
// named op's backward rule scales its input gradient by `factor`.
void inject_backward_fault(const std::string& op, double factor);
void clear_backward_faults();

// Running hash of the branch decisions taken by non-smooth ops (ReLU signs,
// max selections) on this thread. Two evaluations with equal signatures lie
// on the same smooth piece of the function.
std::uint64_t branch_signature();
void reset_branch_signature();

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // same-rank broadcasting
Var scale(const Var& a, double s);
Var sum(const Var& a);  // -> shape [1]
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, std::vector<std::size_t> perm);
Var concat(const std::vector<Var>& inputs, std::size_t axis);

Var conv2d(const Var& input, const Var& weight, const Var* bias, const ops::Conv2dOptions& opt = {});
Var pool2d(const Var& input, ops::PoolKind kind, std::size_t k, std::size_t stride);
Var avg_pool_to_bins(const Var& input, std::size_t bins);
Var global_avg_pool(const Var& input);
Var bilinear_upsample(const Var& input, std::size_t out_h, std::size_t out_w);
// Running statistics live outside the graph and are updated in train mode.
Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
                ops::Mode mode);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var softmax(const Var& a, std::size_t axis);
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var reduce(const Var& a, std::size_t axis, ops::ReduceKind kind);

}  // namespace mlattn::ad
