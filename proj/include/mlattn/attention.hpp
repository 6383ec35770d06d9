#pragma once

// The three attention levels: a squeeze-excitation style channel gate, a
// channel-pooled spatial gate, and triplet self-attention over the channel,
// row and column axes with residual fusion.

#include <array>
#include <cstddef>
#include <random>
#include <string>

#include "mlattn/autodiff.hpp"
#include "mlattn/params.hpp"

namespace mlattn::attn {

// Bottleneck width C / r, never below one.
std::size_t bottleneck_width(std::size_t channels, std::size_t reduction);

struct ChannelGateParams {
  ad::Var fc1_w;  // [C, C/r]
  ad::Var fc1_b;  // [C/r]
  ad::Var fc2_w;  // [C/r, C]
  ad::Var fc2_b;  // [C]
};

struct SpatialGateParams {
  ad::Var conv_w;  // [1, 2, k, k], no bias (batchnorm follows)
  ad::Var bn_gamma;
  ad::Var bn_beta;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
};

struct GateParams {
  ChannelGateParams channel;
  SpatialGateParams spatial;
};

enum class Axis { channel, row, column };
inline constexpr std::array<Axis, 3> kAxes{Axis::channel, Axis::row, Axis::column};
const char* axis_name(Axis axis);

struct BranchParams {
  ad::Var proj_w;  // [C, C, 1, 1]
  ad::Var proj_b;  // [C]
  ad::Var beta;    // [1], starts at 0
};

struct FusionWeights {
  double a = 0.8;
  double b = 0.15;
  double c = 0.05;
};

struct TripletParams {
  BranchParams channel;
  BranchParams row;
  BranchParams column;
  FusionWeights fusion;

  const BranchParams& branch(Axis axis) const;
};

// Registration helpers. Parameters are created under `prefix` in the store.
ChannelGateParams add_channel_gate(ParamStore& store, const std::string& prefix, std::size_t channels,
                                   std::size_t reduction, std::mt19937_64& rng);
SpatialGateParams add_spatial_gate(ParamStore& store, const std::string& prefix, std::size_t kernel,
                                   std::mt19937_64& rng);
BranchParams add_branch(ParamStore& store, const std::string& prefix, std::size_t channels, std::mt19937_64& rng);

ChannelGateParams channel_gate_params(const ParamStore& store, const std::string& prefix);
SpatialGateParams spatial_gate_params(ParamStore& store, const std::string& prefix);
BranchParams branch_params(const ParamStore& store, const std::string& prefix);

// out = X * sigmoid(FC2(relu(FC1(GAP(X))))) broadcast over H, W.
ad::Var channel_gate(const ad::Var& x, const ChannelGateParams& p);
// out = X * sigmoid(bn(conv([max_c X; mean_c X]))) broadcast over channels.
ad::Var spatial_gate(const ad::Var& x, const SpatialGateParams& p, ops::Mode mode);

// Mean over three axis orientations of sigmoid(X) * X, each computed in its
// permuted layout and permuted back.
ad::Var triplet_prenorm(const ad::Var& x);

// Permutation that moves `axis` to position 1 of an [N,C,H,W] tensor.
std::array<std::size_t, 4> axis_permutation(Axis axis);

// Self-attention along one axis: A = proj(X) viewed as d x N', the attention
// matrix softmax(A A^T) is row-normalized, and the output is
// beta * (A' A) + X in the original layout.
ad::Var branch_attention(const ad::Var& x, Axis axis, const BranchParams& p);

// Row-stochastic attention matrix for one axis, [N, d, d]. Exposed for
// inspection and tests.
Tensor attention_matrix(const Tensor& x, Axis axis, const BranchParams& p);

// M = a*D_C + b*D_H + c*D_W + X.
ad::Var triplet_fuse(const ad::Var& x, const ad::Var& d_c, const ad::Var& d_h, const ad::Var& d_w,
                     const FusionWeights& w);

// prenorm -> three branches -> fuse with the un-normalized input as residual.
ad::Var triplet_attention(const ad::Var& x, const TripletParams& p);

}  // namespace mlattn::attn
