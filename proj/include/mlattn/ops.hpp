#pragma once

// Forward numeric kernels and their adjoints. All functions are pure: inputs
// are never modified (batchnorm's running statistics are the one explicit
// in/out argument).

#include <cstddef>
#include <span>
#include <vector>

#include "mlattn/tensor.hpp"

namespace mlattn::ops {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
};

std::size_t conv_out_size(std::size_t in, std::size_t k, const Conv2dOptions& opt);

// input [N,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] or nullptr.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const Conv2dOptions& opt = {});
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         const Conv2dOptions& opt);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_shape,
                          const Conv2dOptions& opt);
Tensor conv2d_grad_bias(const Tensor& grad_out);

enum class PoolKind { max, avg };

// Windowed pooling without padding. For max pooling `argmax` (if given)
// receives the flat input index selected for every output element.
Tensor pool2d(const Tensor& input, PoolKind kind, std::size_t k, std::size_t stride,
              std::vector<std::size_t>* argmax = nullptr);
Tensor pool2d_grad(const Tensor& grad_out, const Shape& input_shape, PoolKind kind, std::size_t k,
                   std::size_t stride, const std::vector<std::size_t>* argmax);

// Adaptive average pooling onto a bins x bins grid; bin b spans rows
// [floor(b*H/bins), floor((b+1)*H/bins)).
Tensor avg_pool_to_bins(const Tensor& input, std::size_t bins);
Tensor avg_pool_to_bins_grad(const Tensor& grad_out, const Shape& input_shape);

Tensor global_avg_pool(const Tensor& input);

// Half-pixel-center bilinear resampling with edge clamping.
Tensor bilinear_upsample(const Tensor& input, std::size_t out_h, std::size_t out_w);
Tensor bilinear_upsample_grad(const Tensor& grad_out, const Shape& input_shape);

enum class Mode { train, eval };

struct BatchNormCache {
  Tensor normalized;  // x_hat, same shape as input
  std::vector<double> inv_std;
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

// Per-channel normalization of a [N,C,H,W] tensor. In train mode the batch
// statistics normalize the input and the running statistics are updated in
// place (unbiased variance); eval mode reads the running statistics only.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, Mode mode, double momentum = kBatchNormMomentum,
                   double eps = kBatchNormEps, BatchNormCache* cache = nullptr);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};
BatchNormGrads batchnorm2d_grad(const Tensor& grad_out, const Tensor& gamma, const BatchNormCache& cache,
                                Mode mode);

enum class Activation { relu, sigmoid };

Tensor activation(const Tensor& input, Activation kind);
Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
Tensor relu_grad(const Tensor& grad_out, const Tensor& input);
Tensor sigmoid_grad(const Tensor& grad_out, const Tensor& output);

Tensor softmax(const Tensor& input, std::size_t axis);
Tensor softmax_grad(const Tensor& grad_out, const Tensor& output, std::size_t axis);

// Rank-2 [m,k]x[k,n] or batched rank-3 [b,m,k]x[b,k,n]; the trans flags
// transpose the trailing two axes of the corresponding operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);
Tensor permute(const Tensor& input, std::span<const std::size_t> perm);

Tensor concat(std::span<const Tensor> inputs, std::size_t axis);
// Elements [begin, end) along `axis`.
Tensor slice(const Tensor& input, std::size_t axis, std::size_t begin, std::size_t end);

// Same-rank broadcasting: each axis must match or be 1 on one side.
Shape broadcast_shape(const Shape& a, const Shape& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Sums a broadcast result back down to `shape`.
Tensor sum_to_shape(const Tensor& t, const Shape& shape);

enum class ReduceKind { max, mean };

// Reduction over one axis, keeping it with extent 1.
Tensor reduce(const Tensor& input, std::size_t axis, ReduceKind kind, std::vector<std::size_t>* argmax = nullptr);
Tensor reduce_grad(const Tensor& grad_out, const Shape& input_shape, std::size_t axis, ReduceKind kind,
                   const std::vector<std::size_t>* argmax);

// Reflection padding on the bottom and right edges of a [N,C,H,W] tensor.
Tensor reflect_pad(const Tensor& input, std::size_t pad_bottom, std::size_t pad_right);
Tensor crop(const Tensor& input, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

}  // namespace mlattn::ops
