#include "mlattn/autodiff.hpp"

#include <map>
#include <mutex>
#include <unordered_set>

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn::ad {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_signature = 0;

void fold(std::uint64_t v) { t_signature = (t_signature ^ v) * 0x100000001b3ULL; }

void fold_indices(const std::vector<std::size_t>& idx) {
  for (std::size_t i : idx) fold(i);
}

std::mutex g_fault_mutex;
std::map<std::string, double> g_faults;

double fault_factor(const std::string& op) {
  std::lock_guard lock(g_fault_mutex);
  auto it = g_faults.find(op);
  return it == g_faults.end() ? 1.0 : it->second;
}

Var make(Tensor value, std::vector<NodePtr> parents, const char* op, std::function<void(Node&)> rule) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (t_grad_enabled) {
    for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  }
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(rule);
  }
  return Var(std::move(node));
}

void push(const NodePtr& p, const Tensor& g) {
  if (p->requires_grad) p->accumulate(g);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void Node::accumulate(const Tensor& g) {
  if (g.shape() != value.shape()) {
    throw ShapeError(fmt::format("gradient {} does not match value {} at '{}'", shape_str(g.shape()),
                                 shape_str(value.shape()), op));
  }
  if (grad.empty()) {
    grad = g;
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
  }
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

std::uint64_t branch_signature() { return t_signature; }
void reset_branch_signature() { t_signature = 0xcbf29ce484222325ULL; }

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = "parameter";
  return Var(std::move(node));
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw UsageError(fmt::format("backward: loss must be a scalar, got shape {}",
                                 loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Tensor(loss.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (!n.backward || n.grad.empty()) continue;
    const double f = fault_factor(n.op);
    if (f != 1.0) {
      Tensor saved = n.grad;
      n.grad = ops::scale(n.grad, f);
      n.backward(n);
      n.grad = std::move(saved);
    } else {
      n.backward(n);
    }
  }
}

void inject_backward_fault(const std::string& op, double factor) {
  std::lock_guard lock(g_fault_mutex);
  g_faults[op] = factor;
}

void clear_backward_faults() {
  std::lock_guard lock(g_fault_mutex);
  g_faults.clear();
}

Var add(const Var& a, const Var& b) {
  return make(ops::add(a.value(), b.value()), {a.node(), b.node()}, "add", [](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    push(pa, ops::sum_to_shape(self.grad, pa->value.shape()));
    push(pb, ops::sum_to_shape(self.grad, pb->value.shape()));
  });
}

Var sub(const Var& a, const Var& b) {
  return make(ops::sub(a.value(), b.value()), {a.node(), b.node()}, "sub", [](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    push(pa, ops::sum_to_shape(self.grad, pa->value.shape()));
    push(pb, ops::scale(ops::sum_to_shape(self.grad, pb->value.shape()), -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  return make(ops::mul(a.value(), b.value()), {a.node(), b.node()}, "mul", [](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (pa->requires_grad) push(pa, ops::sum_to_shape(ops::mul(self.grad, pb->value), pa->value.shape()));
    if (pb->requires_grad) push(pb, ops::sum_to_shape(ops::mul(self.grad, pa->value), pb->value.shape()));
  });
}

Var scale(const Var& a, double s) {
  return make(ops::scale(a.value(), s), {a.node()}, "scale",
              [s](Node& self) { push(self.parents[0], ops::scale(self.grad, s)); });
}

Var sum(const Var& a) {
  return make(Tensor::scalar(a.value().sum()), {a.node()}, "sum", [](Node& self) {
    const auto& p = self.parents[0];
    push(p, Tensor(p->value.shape(), self.grad[0]));
  });
}

Var reshape(const Var& a, Shape shape) {
  return make(a.value().reshaped(std::move(shape)), {a.node()}, "reshape", [](Node& self) {
    const auto& p = self.parents[0];
    push(p, self.grad.reshaped(p->value.shape()));
  });
}

Var permute(const Var& a, std::vector<std::size_t> perm) {
  Tensor out = ops::permute(a.value(), perm);
  return make(std::move(out), {a.node()}, "permute", [perm = std::move(perm)](Node& self) {
    const auto inv = ops::inverse_permutation(perm);
    push(self.parents[0], ops::permute(self.grad, inv));
  });
}

Var concat(const std::vector<Var>& inputs, std::size_t axis) {
  std::vector<Tensor> values;
  std::vector<NodePtr> parents;
  values.reserve(inputs.size());
  for (const Var& v : inputs) {
    values.push_back(v.value());
    parents.push_back(v.node());
  }
  return make(ops::concat(values, axis), std::move(parents), "concat", [axis](Node& self) {
    std::size_t begin = 0;
    for (const auto& p : self.parents) {
      const std::size_t extent = p->value.dim(axis);
      if (p->requires_grad) push(p, ops::slice(self.grad, axis, begin, begin + extent));
      begin += extent;
    }
  });
}

Var conv2d(const Var& input, const Var& weight, const Var* bias, const ops::Conv2dOptions& opt) {
  Tensor out = ops::conv2d(input.value(), weight.value(), bias != nullptr ? &bias->value() : nullptr, opt);
  std::vector<NodePtr> parents{input.node(), weight.node()};
  if (bias != nullptr) parents.push_back(bias->node());
  return make(std::move(out), std::move(parents), "conv2d", [opt](Node& self) {
    const auto& in = self.parents[0];
    const auto& w = self.parents[1];
    if (in->requires_grad) push(in, ops::conv2d_grad_input(self.grad, w->value, in->value.shape(), opt));
    if (w->requires_grad) push(w, ops::conv2d_grad_weight(self.grad, in->value, w->value.shape(), opt));
    if (self.parents.size() > 2) push(self.parents[2], ops::conv2d_grad_bias(self.grad));
  });
}

Var pool2d(const Var& input, ops::PoolKind kind, std::size_t k, std::size_t stride) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor out = ops::pool2d(input.value(), kind, k, stride, argmax.get());
  if (kind == ops::PoolKind::max) fold_indices(*argmax);
  return make(std::move(out), {input.node()}, kind == ops::PoolKind::max ? "max_pool2d" : "avg_pool2d",
              [kind, k, stride, argmax](Node& self) {
                const auto& p = self.parents[0];
                push(p, ops::pool2d_grad(self.grad, p->value.shape(), kind, k, stride, argmax.get()));
              });
}

Var avg_pool_to_bins(const Var& input, std::size_t bins) {
  return make(ops::avg_pool_to_bins(input.value(), bins), {input.node()}, "avg_pool_to_bins", [](Node& self) {
    const auto& p = self.parents[0];
    push(p, ops::avg_pool_to_bins_grad(self.grad, p->value.shape()));
  });
}

Var global_avg_pool(const Var& input) {
  return make(ops::global_avg_pool(input.value()), {input.node()}, "global_avg_pool", [](Node& self) {
    const auto& p = self.parents[0];
    push(p, ops::avg_pool_to_bins_grad(self.grad, p->value.shape()));
  });
}

Var bilinear_upsample(const Var& input, std::size_t out_h, std::size_t out_w) {
  return make(ops::bilinear_upsample(input.value(), out_h, out_w), {input.node()}, "bilinear_upsample",
              [](Node& self) {
                const auto& p = self.parents[0];
                push(p, ops::bilinear_upsample_grad(self.grad, p->value.shape()));
              });
}

Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
                ops::Mode mode) {
  auto cache = std::make_shared<ops::BatchNormCache>();
  Tensor out = ops::batchnorm2d(input.value(), gamma.value(), beta.value(), running_mean, running_var, mode,
                                ops::kBatchNormMomentum, ops::kBatchNormEps, cache.get());
  return make(std::move(out), {input.node(), gamma.node(), beta.node()}, "batchnorm2d", [cache, mode](Node& self) {
    const auto g = ops::batchnorm2d_grad(self.grad, self.parents[1]->value, *cache, mode);
    push(self.parents[0], g.input);
    push(self.parents[1], g.gamma);
    push(self.parents[2], g.beta);
  });
}

Var relu(const Var& a) {
  for (double v : a.value().data()) fold(v > 0.0 ? 1 : 2);
  return make(ops::relu(a.value()), {a.node()}, "relu", [](Node& self) {
    const auto& p = self.parents[0];
    push(p, ops::relu_grad(self.grad, p->value));
  });
}

Var sigmoid(const Var& a) {
  return make(ops::sigmoid(a.value()), {a.node()}, "sigmoid",
              [](Node& self) { push(self.parents[0], ops::sigmoid_grad(self.grad, self.value)); });
}

Var softmax(const Var& a, std::size_t axis) {
  return make(ops::softmax(a.value(), axis), {a.node()}, "softmax",
              [axis](Node& self) { push(self.parents[0], ops::softmax_grad(self.grad, self.value, axis)); });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  return make(ops::matmul(a.value(), b.value(), trans_a, trans_b), {a.node(), b.node()}, "matmul",
              [trans_a, trans_b](Node& self) {
                const auto& pa = self.parents[0];
                const auto& pb = self.parents[1];
                const Tensor& g = self.grad;
                // C = op(A) op(B): dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                if (pa->requires_grad) {
                  push(pa, trans_a ? ops::matmul(pb->value, g, trans_b, true) : ops::matmul(g, pb->value, false, !trans_b));
                }
                if (pb->requires_grad) {
                  push(pb, trans_b ? ops::matmul(g, pa->value, true, trans_a) : ops::matmul(pa->value, g, !trans_a, false));
                }
              });
}

Var reduce(const Var& a, std::size_t axis, ops::ReduceKind kind) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor out = ops::reduce(a.value(), axis, kind, argmax.get());
  if (kind == ops::ReduceKind::max) fold_indices(*argmax);
  return make(std::move(out), {a.node()}, kind == ops::ReduceKind::max ? "reduce_max" : "reduce_mean",
              [axis, kind, argmax](Node& self) {
                const auto& p = self.parents[0];
                push(p, ops::reduce_grad(self.grad, p->value.shape(), axis, kind, argmax.get()));
              });
}

}  // namespace mlattn::ad
