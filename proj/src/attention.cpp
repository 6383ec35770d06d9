#include "mlattn/attention.hpp"

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn::attn {

std::size_t bottleneck_width(std::size_t channels, std::size_t reduction) {
  if (reduction == 0) throw ConfigError("reduction ratio must be positive");
  return std::max<std::size_t>(1, channels / reduction);
}

const char* axis_name(Axis axis) {
  switch (axis) {
    case Axis::channel:
      return "channel";
    case Axis::row:
      return "row";
    case Axis::column:
      return "column";
  }
  return "?";
}

const BranchParams& TripletParams::branch(Axis axis) const {
  switch (axis) {
    case Axis::channel:
      return channel;
    case Axis::row:
      return row;
    case Axis::column:
      return column;
  }
  return channel;
}

ChannelGateParams add_channel_gate(ParamStore& store, const std::string& prefix, std::size_t channels,
                                   std::size_t reduction, std::mt19937_64& rng) {
  const std::size_t hidden = bottleneck_width(channels, reduction);
  ChannelGateParams p;
  p.fc1_w = store.add(prefix + ".fc1.weight", he_uniform({channels, hidden}, channels, rng));
  p.fc1_b = store.add(prefix + ".fc1.bias", Tensor({hidden}));
  p.fc2_w = store.add(prefix + ".fc2.weight", he_uniform({hidden, channels}, hidden, rng));
  p.fc2_b = store.add(prefix + ".fc2.bias", Tensor({channels}));
  return p;
}

SpatialGateParams add_spatial_gate(ParamStore& store, const std::string& prefix, std::size_t kernel,
                                   std::mt19937_64& rng) {
  if (kernel % 2 == 0) throw ConfigError(fmt::format("spatial gate kernel must be odd, got {}", kernel));
  store.add(prefix + ".conv.weight", he_uniform({1, 2, kernel, kernel}, 2 * kernel * kernel, rng));
  store.add(prefix + ".bn.gamma", Tensor({1}, 1.0));
  store.add(prefix + ".bn.beta", Tensor({1}, 0.0));
  store.add_buffer(prefix + ".bn.running_mean", Tensor({1}, 0.0));
  store.add_buffer(prefix + ".bn.running_var", Tensor({1}, 1.0));
  return spatial_gate_params(store, prefix);
}

BranchParams add_branch(ParamStore& store, const std::string& prefix, std::size_t channels, std::mt19937_64& rng) {
  BranchParams p;
  p.proj_w = store.add(prefix + ".proj.weight", he_uniform({channels, channels, 1, 1}, channels, rng));
  p.proj_b = store.add(prefix + ".proj.bias", Tensor({channels}));
  p.beta = store.add(prefix + ".beta", Tensor({1}, 0.0));
  return p;
}

ChannelGateParams channel_gate_params(const ParamStore& store, const std::string& prefix) {
  return {store.get(prefix + ".fc1.weight"), store.get(prefix + ".fc1.bias"), store.get(prefix + ".fc2.weight"),
          store.get(prefix + ".fc2.bias")};
}

SpatialGateParams spatial_gate_params(ParamStore& store, const std::string& prefix) {
  SpatialGateParams p;
  p.conv_w = store.get(prefix + ".conv.weight");
  p.bn_gamma = store.get(prefix + ".bn.gamma");
  p.bn_beta = store.get(prefix + ".bn.beta");
  p.running_mean = &store.buffer(prefix + ".bn.running_mean");
  p.running_var = &store.buffer(prefix + ".bn.running_var");
  return p;
}

BranchParams branch_params(const ParamStore& store, const std::string& prefix) {
  return {store.get(prefix + ".proj.weight"), store.get(prefix + ".proj.bias"), store.get(prefix + ".beta")};
}

namespace {

void require_4d(const ad::Var& x, const char* op) {
  if (x.value().rank() != 4) {
    throw ShapeError(fmt::format("{}: expected [N,C,H,W], got {}", op, shape_str(x.shape())));
  }
}

ad::Var row_bias(const ad::Var& b) { return ad::reshape(b, {1, b.value().size()}); }

}  // namespace

ad::Var channel_gate(const ad::Var& x, const ChannelGateParams& p) {
  require_4d(x, "channel_gate");
  const std::size_t n = x.shape()[0];
  const std::size_t c = x.shape()[1];
  if (p.fc1_w.value().rank() != 2 || p.fc1_w.shape()[0] != c || p.fc2_w.shape()[1] != c ||
      p.fc1_w.shape()[1] != p.fc2_w.shape()[0]) {
    throw ShapeError(fmt::format("channel_gate: weights {} / {} do not fit {} channels", shape_str(p.fc1_w.shape()),
                                 shape_str(p.fc2_w.shape()), c));
  }
  ad::Var squeezed = ad::reshape(ad::global_avg_pool(x), {n, c});
  ad::Var hidden = ad::relu(ad::add(ad::matmul(squeezed, p.fc1_w), row_bias(p.fc1_b)));
  ad::Var s = ad::sigmoid(ad::add(ad::matmul(hidden, p.fc2_w), row_bias(p.fc2_b)));
  return ad::mul(x, ad::reshape(s, {n, c, 1, 1}));
}

ad::Var spatial_gate(const ad::Var& x, const SpatialGateParams& p, ops::Mode mode) {
  require_4d(x, "spatial_gate");
  const std::size_t k = p.conv_w.shape()[2];
  ad::Var pooled = ad::concat({ad::reduce(x, 1, ops::ReduceKind::max), ad::reduce(x, 1, ops::ReduceKind::mean)}, 1);
  ad::Var logits = ad::conv2d(pooled, p.conv_w, nullptr, {.stride = 1, .pad = (k - 1) / 2, .dilation = 1});
  ad::Var m = ad::sigmoid(ad::batchnorm2d(logits, p.bn_gamma, p.bn_beta, *p.running_mean, *p.running_var, mode));
  return ad::mul(x, m);
}

std::array<std::size_t, 4> axis_permutation(Axis axis) {
  switch (axis) {
    case Axis::channel:
      return {0, 1, 2, 3};
    case Axis::row:
      return {0, 2, 1, 3};
    case Axis::column:
      return {0, 3, 1, 2};
  }
  return {0, 1, 2, 3};
}

namespace {
std::vector<std::size_t> to_vec(const std::array<std::size_t, 4>& a) { return {a.begin(), a.end()}; }
}  // namespace

ad::Var triplet_prenorm(const ad::Var& x) {
  require_4d(x, "triplet_prenorm");
  std::vector<ad::Var> gated;
  for (Axis axis : kAxes) {
    const auto perm = to_vec(axis_permutation(axis));
    ad::Var xp = ad::permute(x, perm);
    ad::Var g = ad::mul(ad::sigmoid(xp), xp);
    gated.push_back(ad::permute(g, ops::inverse_permutation(perm)));
  }
  return ad::scale(ad::add(ad::add(gated[0], gated[1]), gated[2]), 1.0 / 3.0);
}

namespace {

struct AttentionParts {
  ad::Var flat;       // A as [N, d, N']
  ad::Var attention;  // A' as [N, d, d]
  Shape permuted_shape;
};

AttentionParts attention_parts(const ad::Var& x, Axis axis, const BranchParams& p) {
  const std::size_t c = x.shape()[1];
  if (p.proj_w.shape() != Shape{c, c, 1, 1}) {
    throw ShapeError(fmt::format("branch_attention: projection {} does not fit {} channels",
                                 shape_str(p.proj_w.shape()), c));
  }
  ad::Var a = ad::conv2d(x, p.proj_w, &p.proj_b);
  ad::Var ap = ad::permute(a, to_vec(axis_permutation(axis)));
  const Shape ps = ap.shape();
  ad::Var flat = ad::reshape(ap, {ps[0], ps[1], ps[2] * ps[3]});
  ad::Var similarity = ad::matmul(flat, flat, false, true);
  return {flat, ad::softmax(similarity, 2), ps};
}

}  // namespace

ad::Var branch_attention(const ad::Var& x, Axis axis, const BranchParams& p) {
  require_4d(x, "branch_attention");
  const AttentionParts parts = attention_parts(x, axis, p);
  ad::Var mixed = ad::reshape(ad::matmul(parts.attention, parts.flat), parts.permuted_shape);
  const auto inv = ops::inverse_permutation(axis_permutation(axis));
  ad::Var restored = ad::permute(mixed, inv);
  return ad::add(ad::mul(ad::reshape(p.beta, {1, 1, 1, 1}), restored), x);
}

Tensor attention_matrix(const Tensor& x, Axis axis, const BranchParams& p) {
  const BranchParams frozen{ad::constant(p.proj_w.value()), ad::constant(p.proj_b.value()),
                            ad::constant(p.beta.value())};
  return attention_parts(ad::constant(x), axis, frozen).attention.value();
}

ad::Var triplet_fuse(const ad::Var& x, const ad::Var& d_c, const ad::Var& d_h, const ad::Var& d_w,
                     const FusionWeights& w) {
  for (const ad::Var* d : {&d_c, &d_h, &d_w}) {
    if (d->shape() != x.shape()) {
      throw ShapeError(fmt::format("triplet_fuse: {} does not match input {}", shape_str(d->shape()),
                                   shape_str(x.shape())));
    }
  }
  if (w.a < 0.0 || w.b < 0.0 || w.c < 0.0) throw ConfigError("triplet fusion weights must be non-negative");
  ad::Var weighted = ad::add(ad::add(ad::scale(d_c, w.a), ad::scale(d_h, w.b)), ad::scale(d_w, w.c));
  return ad::add(weighted, x);
}

ad::Var triplet_attention(const ad::Var& x, const TripletParams& p) {
  ad::Var normalized = triplet_prenorm(x);
  ad::Var d_c = branch_attention(normalized, Axis::channel, p.channel);
  ad::Var d_h = branch_attention(normalized, Axis::row, p.row);
  ad::Var d_w = branch_attention(normalized, Axis::column, p.column);
  return triplet_fuse(x, d_c, d_h, d_w, p.fusion);
}

}  // namespace mlattn::attn
