#include "mlattn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(fmt::format("{}: expected rank {} tensor, got {}", op, rank, shape_str(t.shape())));
  }
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Visits every index of `shape` in row-major order, passing the offsets into
// two operands whose strides may be zero on broadcast axes.
template <typename F>
void for_each_broadcast(const Shape& shape, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t rank = shape.size();
  const std::size_t total = shape_numel(shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    f(flat, oa, ob);
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < shape[ax]) {
        oa += sa[ax];
        ob += sb[ax];
        break;
      }
      oa -= sa[ax] * (shape[ax] - 1);
      ob -= sb[ax] * (shape[ax] - 1);
      idx[ax] = 0;
    }
  }
}

std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
  auto strides = strides_of(from);
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i] == 1 && to[i] != 1) strides[i] = 0;
  }
  return strides;
}

template <typename Op>
Tensor binary(const Tensor& a, const Tensor& b, Op op) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(shape);
  const auto sa = broadcast_strides(a.shape(), shape);
  const auto sb = broadcast_strides(b.shape(), shape);
  for_each_broadcast(shape, sa, sb,
                     [&](std::size_t flat, std::size_t oa, std::size_t ob) { out[flat] = op(a[oa], b[ob]); });
  return out;
}

struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo;
};

ConvDims conv_dims(const Shape& in, const Shape& wt, const Conv2dOptions& opt) {
  if (in.size() != 4 || wt.size() != 4) {
    throw ShapeError(fmt::format("conv2d: expected 4-D input and weight, got {} and {}", shape_str(in), shape_str(wt)));
  }
  if (in[1] != wt[1]) {
    throw ShapeError(fmt::format("conv2d: input has {} channels but weight expects {}", in[1], wt[1]));
  }
  if (opt.stride == 0 || opt.dilation == 0 || wt[2] == 0 || wt[3] == 0) {
    throw UsageError("conv2d: stride, dilation and kernel size must be positive");
  }
  ConvDims d{in[0], in[1], in[2], in[3], wt[0], wt[2], wt[3], 0, 0};
  d.ho = conv_out_size(d.h, d.kh, opt);
  d.wo = conv_out_size(d.w, d.kw, opt);
  return d;
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t k, const Conv2dOptions& opt) {
  const std::size_t span = opt.dilation * (k - 1) + 1;
  if (in + 2 * opt.pad < span) {
    throw ShapeError(fmt::format("conv2d: padded extent {} smaller than dilated kernel extent {}", in + 2 * opt.pad,
                                 span));
  }
  return (in + 2 * opt.pad - span) / opt.stride + 1;
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Unfolds sample `n` into a [cin*kh*kw, ho*wo] patch matrix (zero padding).
void im2col(const Tensor& input, std::size_t n, const ConvDims& d, const Conv2dOptions& opt, RowMatrix& cols) {
  cols.resize(static_cast<Eigen::Index>(d.cin * d.kh * d.kw), static_cast<Eigen::Index>(d.ho * d.wo));
  const auto pad = static_cast<std::ptrdiff_t>(opt.pad);
  const auto stride = static_cast<std::ptrdiff_t>(opt.stride);
  const auto dil = static_cast<std::ptrdiff_t>(opt.dilation);
  const auto H = static_cast<std::ptrdiff_t>(d.h);
  const auto W = static_cast<std::ptrdiff_t>(d.w);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    const double* in = input.ptr(n, ci, 0, 0);
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j, ++r) {
        double* dst = cols.data() + r * d.ho * d.wo;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * stride - pad + static_cast<std::ptrdiff_t>(i) * dil;
          double* drow = dst + oh * d.wo;
          if (ih < 0 || ih >= H) {
            std::fill(drow, drow + d.wo, 0.0);
            continue;
          }
          const double* row = in + ih * W;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * stride - pad + static_cast<std::ptrdiff_t>(j) * dil;
            drow[ow] = (iw < 0 || iw >= W) ? 0.0 : row[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch-matrix entries back into sample `n`.
void col2im(const RowMatrix& cols, std::size_t n, const ConvDims& d, const Conv2dOptions& opt, Tensor& out) {
  const auto pad = static_cast<std::ptrdiff_t>(opt.pad);
  const auto stride = static_cast<std::ptrdiff_t>(opt.stride);
  const auto dil = static_cast<std::ptrdiff_t>(opt.dilation);
  const auto H = static_cast<std::ptrdiff_t>(d.h);
  const auto W = static_cast<std::ptrdiff_t>(d.w);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    double* dst = out.ptr(n, ci, 0, 0);
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j, ++r) {
        const double* src = cols.data() + r * d.ho * d.wo;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * stride - pad + static_cast<std::ptrdiff_t>(i) * dil;
          if (ih < 0 || ih >= H) continue;
          double* row = dst + ih * W;
          const double* srow = src + oh * d.wo;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * stride - pad + static_cast<std::ptrdiff_t>(j) * dil;
            if (iw >= 0 && iw < W) row[iw] += srow[ow];
          }
        }
      }
    }
  }
}

Eigen::Index as_index(std::size_t v) { return static_cast<Eigen::Index>(v); }

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, const Conv2dOptions& opt) {
  const ConvDims d = conv_dims(input.shape(), weight.shape(), opt);
  if (bias != nullptr && bias->size() != d.cout) {
    throw ShapeError(fmt::format("conv2d: bias has {} entries for {} output channels", bias->size(), d.cout));
  }
  Tensor out({d.n, d.cout, d.ho, d.wo});
  const Eigen::Index k = as_index(d.cin * d.kh * d.kw), m = as_index(d.ho * d.wo);
  ConstMatrixMap w(weight.vec().data(), as_index(d.cout), k);
  RowMatrix cols;
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(input, n, d, opt, cols);
    MatrixMap o(out.ptr(n, 0, 0, 0), as_index(d.cout), m);
    o.noalias() = w * cols;
    if (bias != nullptr) {
      for (std::size_t co = 0; co < d.cout; ++co) o.row(as_index(co)).array() += (*bias)[co];
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         const Conv2dOptions& opt) {
  const ConvDims d = conv_dims(input_shape, weight.shape(), opt);
  Tensor gin(input_shape);
  const Eigen::Index k = as_index(d.cin * d.kh * d.kw), m = as_index(d.ho * d.wo);
  ConstMatrixMap w(weight.vec().data(), as_index(d.cout), k);
  RowMatrix cols(k, m);
  for (std::size_t n = 0; n < d.n; ++n) {
    ConstMatrixMap g(grad_out.ptr(n, 0, 0, 0), as_index(d.cout), m);
    cols.noalias() = w.transpose() * g;
    col2im(cols, n, d, opt, gin);
  }
  return gin;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_shape,
                          const Conv2dOptions& opt) {
  const ConvDims d = conv_dims(input.shape(), weight_shape, opt);
  Tensor gw(weight_shape);
  const Eigen::Index k = as_index(d.cin * d.kh * d.kw), m = as_index(d.ho * d.wo);
  MatrixMap w(gw.data().data(), as_index(d.cout), k);
  RowMatrix cols;
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(input, n, d, opt, cols);
    ConstMatrixMap g(grad_out.ptr(n, 0, 0, 0), as_index(d.cout), m);
    w.noalias() += g * cols.transpose();
  }
  return gw;
}

Tensor conv2d_grad_bias(const Tensor& grad_out) {
  require_rank(grad_out, 4, "conv2d_grad_bias");
  const auto& s = grad_out.shape();
  Tensor gb({s[1]});
  const std::size_t plane = s[2] * s[3];
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      const double* g = grad_out.ptr(n, c, 0, 0);
      gb[c] += std::accumulate(g, g + plane, 0.0);
    }
  }
  return gb;
}

Tensor pool2d(const Tensor& input, PoolKind kind, std::size_t k, std::size_t stride,
              std::vector<std::size_t>* argmax) {
  require_rank(input, 4, "pool2d");
  const auto& s = input.shape();
  if (k == 0 || stride == 0) throw UsageError("pool2d: window and stride must be positive");
  if (k > s[2] || k > s[3]) {
    throw ShapeError(fmt::format("pool2d: window {} exceeds spatial size {}x{}", k, s[2], s[3]));
  }
  const std::size_t ho = (s[2] - k) / stride + 1;
  const std::size_t wo = (s[3] - k) / stride + 1;
  Tensor out({s[0], s[1], ho, wo});
  if (argmax != nullptr) argmax->assign(kind == PoolKind::max ? out.size() : 0, 0);
  const double inv_area = 1.0 / static_cast<double>(k * k);
  std::size_t o = 0;
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      const std::size_t base = (n * s[1] + c) * s[2] * s[3];
      for (std::size_t oh = 0; oh < ho; ++oh) {
        for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = base + oh * stride * s[3] + ow * stride;
          double acc = 0.0;
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t idx = base + (oh * stride + i) * s[3] + ow * stride + j;
              const double v = input[idx];
              acc += v;
              if (v > best) {
                best = v;
                best_idx = idx;
              }
            }
          }
          if (kind == PoolKind::max) {
            out[o] = best;
            if (argmax != nullptr) (*argmax)[o] = best_idx;
          } else {
            out[o] = acc * inv_area;
          }
        }
      }
    }
  }
  return out;
}

Tensor pool2d_grad(const Tensor& grad_out, const Shape& input_shape, PoolKind kind, std::size_t k,
                   std::size_t stride, const std::vector<std::size_t>* argmax) {
  Tensor gin(input_shape);
  if (kind == PoolKind::max) {
    if (argmax == nullptr || argmax->size() != grad_out.size()) {
      throw UsageError("pool2d_grad: max pooling needs the forward argmax record");
    }
    for (std::size_t o = 0; o < grad_out.size(); ++o) gin[(*argmax)[o]] += grad_out[o];
    return gin;
  }
  const auto& go = grad_out.shape();
  const double inv_area = 1.0 / static_cast<double>(k * k);
  for (std::size_t n = 0; n < go[0]; ++n) {
    for (std::size_t c = 0; c < go[1]; ++c) {
      for (std::size_t oh = 0; oh < go[2]; ++oh) {
        for (std::size_t ow = 0; ow < go[3]; ++ow) {
          const double g = grad_out.at(n, c, oh, ow) * inv_area;
          for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) gin.at(n, c, oh * stride + i, ow * stride + j) += g;
          }
        }
      }
    }
  }
  return gin;
}

namespace {
std::size_t bin_start(std::size_t b, std::size_t extent, std::size_t bins) { return b * extent / bins; }
}  // namespace

Tensor avg_pool_to_bins(const Tensor& input, std::size_t bins) {
  require_rank(input, 4, "avg_pool_to_bins");
  const auto& s = input.shape();
  if (bins == 0) throw UsageError("avg_pool_to_bins: bins must be positive");
  if (bins > s[2] || bins > s[3]) {
    throw ShapeError(fmt::format("avg_pool_to_bins: {} bins exceed spatial size {}x{}", bins, s[2], s[3]));
  }
  Tensor out({s[0], s[1], bins, bins});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      for (std::size_t by = 0; by < bins; ++by) {
        const std::size_t y0 = bin_start(by, s[2], bins);
        const std::size_t y1 = bin_start(by + 1, s[2], bins);
        for (std::size_t bx = 0; bx < bins; ++bx) {
          const std::size_t x0 = bin_start(bx, s[3], bins);
          const std::size_t x1 = bin_start(bx + 1, s[3], bins);
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) acc += input.at(n, c, y, x);
          }
          out.at(n, c, by, bx) = acc / static_cast<double>((y1 - y0) * (x1 - x0));
        }
      }
    }
  }
  return out;
}

Tensor avg_pool_to_bins_grad(const Tensor& grad_out, const Shape& input_shape) {
  Tensor gin(input_shape);
  const std::size_t bins = grad_out.dim(2);
  const auto& s = input_shape;
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      for (std::size_t by = 0; by < bins; ++by) {
        const std::size_t y0 = bin_start(by, s[2], bins);
        const std::size_t y1 = bin_start(by + 1, s[2], bins);
        for (std::size_t bx = 0; bx < bins; ++bx) {
          const std::size_t x0 = bin_start(bx, s[3], bins);
          const std::size_t x1 = bin_start(bx + 1, s[3], bins);
          const double g = grad_out.at(n, c, by, bx) / static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) gin.at(n, c, y, x) += g;
          }
        }
      }
    }
  }
  return gin;
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool");
  const auto& s = input.shape();
  Tensor out({s[0], s[1], 1, 1});
  const std::size_t plane = s[2] * s[3];
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
    const double* p = input.data().data() + nc * plane;
    out[nc] = std::accumulate(p, p + plane, 0.0) / static_cast<double>(plane);
  }
  return out;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "bilinear_upsample");
  if (out_h == 0 || out_w == 0) throw UsageError("bilinear_upsample: output size must be positive");
  const auto& s = input.shape();
  const auto ty = bilinear_taps(s[2], out_h);
  const auto tx = bilinear_taps(s[3], out_w);
  Tensor out({s[0], s[1], out_h, out_w});
  const std::size_t W = s[3];
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      const double* in = input.ptr(n, c, 0, 0);
      double* o = out.ptr(n, c, 0, 0);
      for (std::size_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[y];
        const double* r0 = in + a.i0 * W;
        const double* r1 = in + a.i1 * W;
        for (std::size_t x = 0; x < out_w; ++x) {
          const Tap& b = tx[x];
          const double top = r0[b.i0] * (1.0 - b.w1) + r0[b.i1] * b.w1;
          const double bot = r1[b.i0] * (1.0 - b.w1) + r1[b.i1] * b.w1;
          o[y * out_w + x] = top * (1.0 - a.w1) + bot * a.w1;
        }
      }
    }
  }
  return out;
}

Tensor bilinear_upsample_grad(const Tensor& grad_out, const Shape& input_shape) {
  const auto& s = input_shape;
  const std::size_t out_h = grad_out.dim(2);
  const std::size_t out_w = grad_out.dim(3);
  const auto ty = bilinear_taps(s[2], out_h);
  const auto tx = bilinear_taps(s[3], out_w);
  Tensor gin(input_shape);
  const std::size_t W = s[3];
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      const double* go = grad_out.ptr(n, c, 0, 0);
      double* gi = gin.ptr(n, c, 0, 0);
      for (std::size_t y = 0; y < out_h; ++y) {
        const Tap& a = ty[y];
        double* r0 = gi + a.i0 * W;
        double* r1 = gi + a.i1 * W;
        for (std::size_t x = 0; x < out_w; ++x) {
          const Tap& b = tx[x];
          const double g = go[y * out_w + x];
          r0[b.i0] += g * (1.0 - a.w1) * (1.0 - b.w1);
          r0[b.i1] += g * (1.0 - a.w1) * b.w1;
          r1[b.i0] += g * a.w1 * (1.0 - b.w1);
          r1[b.i1] += g * a.w1 * b.w1;
        }
      }
    }
  }
  return gin;
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                   Tensor& running_var, Mode mode, double momentum, double eps, BatchNormCache* cache) {
  require_rank(input, 4, "batchnorm2d");
  const auto& s = input.shape();
  const std::size_t C = s[1];
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->size() != C) {
      throw ShapeError(fmt::format("batchnorm2d: parameter of length {} for {} channels", p->size(), C));
    }
  }
  const std::size_t plane = s[2] * s[3];
  const std::size_t count = s[0] * plane;
  std::vector<double> mean(C, 0.0);
  std::vector<double> inv_std(C, 0.0);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s[0]; ++n) {
        const double* p = input.ptr(n, c, 0, 0);
        acc += std::accumulate(p, p + plane, 0.0);
      }
      mean[c] = acc / static_cast<double>(count);
      double var = 0.0;
      for (std::size_t n = 0; n < s[0]; ++n) {
        const double* p = input.ptr(n, c, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean[c]) * (p[i] - mean[c]);
      }
      var /= static_cast<double>(count);
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor out(s);
  Tensor normalized(s);
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = input.ptr(n, c, 0, 0);
      double* xh = normalized.ptr(n, c, 0, 0);
      double* o = out.ptr(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean[c]) * inv_std[c];
        o[i] = xh[i] * gamma[c] + beta[c];
      }
    }
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

BatchNormGrads batchnorm2d_grad(const Tensor& grad_out, const Tensor& gamma, const BatchNormCache& cache,
                                Mode mode) {
  const auto& s = grad_out.shape();
  const std::size_t C = s[1];
  const std::size_t plane = s[2] * s[3];
  const auto count = static_cast<double>(s[0] * plane);
  BatchNormGrads g{Tensor(s), Tensor({C}), Tensor({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t n = 0; n < s[0]; ++n) {
      const double* go = grad_out.ptr(n, c, 0, 0);
      const double* xh = cache.normalized.ptr(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += go[i];
        sum_gx += go[i] * xh[i];
      }
    }
    g.gamma[c] = sum_gx;
    g.beta[c] = sum_g;
    const double k = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < s[0]; ++n) {
      const double* go = grad_out.ptr(n, c, 0, 0);
      const double* xh = cache.normalized.ptr(n, c, 0, 0);
      double* gi = g.input.ptr(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        gi[i] = mode == Mode::train ? k * (go[i] - sum_g / count - xh[i] * sum_gx / count) : k * go[i];
      }
    }
  }
  return g;
}

Tensor activation(const Tensor& input, Activation kind) {
  return kind == Activation::relu ? relu(input) : sigmoid(input);
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] < 0.0 ? 0.0 : input[i];
  return out;
}

Tensor sigmoid(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = input[i];
    // Split by sign so exp never overflows.
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  return out;
}

Tensor relu_grad(const Tensor& grad_out, const Tensor& input) {
  Tensor g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

Tensor sigmoid_grad(const Tensor& grad_out, const Tensor& output) {
  Tensor g(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) g[i] = grad_out[i] * output[i] * (1.0 - output[i]);
  return g;
}

Tensor softmax(const Tensor& input, std::size_t axis) {
  if (axis >= input.rank()) throw ShapeError(fmt::format("softmax: axis {} invalid for {}", axis, shape_str(input.shape())));
  const AxisSplit sp = split_at(input.shape(), axis);
  Tensor out(input.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) mx = std::max(mx, input[base + k * sp.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double e = std::exp(input[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= total;
    }
  }
  return out;
}

Tensor softmax_grad(const Tensor& grad_out, const Tensor& output, std::size_t axis) {
  const AxisSplit sp = split_at(output.shape(), axis);
  Tensor g(output.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double dot = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) dot += grad_out[base + k * sp.inner] * output[base + k * sp.inner];
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const std::size_t i = base + k * sp.inner;
        g[i] = output[i] * (grad_out[i] - dot);
      }
    }
  }
  return g;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
    throw ShapeError(fmt::format("matmul: operands {} and {} must both be rank 2 or rank 3", shape_str(a.shape()),
                                 shape_str(b.shape())));
  }
  const bool batched = a.rank() == 3;
  const std::size_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) {
    throw ShapeError(fmt::format("matmul: batch sizes {} and {} differ", batch, b.dim(0)));
  }
  const std::size_t ar = a.dim(a.rank() - 2), ac = a.dim(a.rank() - 1);
  const std::size_t br = b.dim(b.rank() - 2), bc = b.dim(b.rank() - 1);
  const std::size_t m = trans_a ? ac : ar;
  const std::size_t k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br;
  const std::size_t n = trans_b ? br : bc;
  if (k != kb) {
    throw ShapeError(fmt::format("matmul: inner dimensions {} and {} differ ({} x {})", k, kb, shape_str(a.shape()),
                                 shape_str(b.shape())));
  }
  Tensor out(batched ? Shape{batch, m, n} : Shape{m, n});
  for (std::size_t t = 0; t < batch; ++t) {
    ConstMatrixMap A(a.data().data() + t * ar * ac, as_index(ar), as_index(ac));
    ConstMatrixMap B(b.data().data() + t * br * bc, as_index(br), as_index(bc));
    MatrixMap Cm(out.data().data() + t * m * n, as_index(m), as_index(n));
    if (trans_a && trans_b) {
      Cm.noalias() = A.transpose() * B.transpose();
    } else if (trans_a) {
      Cm.noalias() = A.transpose() * B;
    } else if (trans_b) {
      Cm.noalias() = A * B.transpose();
    } else {
      Cm.noalias() = A * B;
    }
  }
  return out;
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv.at(perm[i]) = i;
  return inv;
}

Tensor permute(const Tensor& input, std::span<const std::size_t> perm) {
  const std::size_t rank = input.rank();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank differs from tensor rank");
  std::vector<bool> seen(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("permute: not a permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  const auto in_strides = strides_of(input.shape());
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = input.dim(perm[i]);
    src_strides[i] = in_strides[perm[i]];
  }
  Tensor out(out_shape);
  const std::vector<std::size_t> unit(rank, 0);
  for_each_broadcast(out_shape, src_strides, unit,
                     [&](std::size_t flat, std::size_t src, std::size_t) { out[flat] = input[src]; });
  return out;
}

Tensor concat(std::span<const Tensor> inputs, std::size_t axis) {
  if (inputs.empty()) throw UsageError("concat: no inputs");
  const Shape& ref = inputs[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& t : inputs) {
    if (t.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && t.dim(i) != ref[i]) {
        throw ShapeError(fmt::format("concat: {} incompatible with {} along axis {}", shape_str(t.shape()),
                                     shape_str(ref), axis));
      }
    }
    out_shape[axis] += t.dim(axis);
  }
  Tensor out(out_shape);
  const AxisSplit osp = split_at(out_shape, axis);
  std::size_t offset = 0;
  for (const Tensor& t : inputs) {
    const std::size_t block = t.dim(axis) * osp.inner;
    for (std::size_t o = 0; o < osp.outer; ++o) {
      std::copy_n(t.data().data() + o * block, block, out.data().data() + o * osp.extent * osp.inner + offset);
    }
    offset += block;
  }
  return out;
}

Tensor slice(const Tensor& input, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= input.rank() || begin > end || end > input.dim(axis)) {
    throw ShapeError(fmt::format("slice: [{}, {}) on axis {} of {}", begin, end, axis, shape_str(input.shape())));
  }
  Shape out_shape = input.shape();
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const AxisSplit sp = split_at(input.shape(), axis);
  const std::size_t block = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(input.data().data() + o * sp.extent * sp.inner + begin * sp.inner, block,
                out.data().data() + o * block);
  }
  return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw ShapeError(fmt::format("broadcast: rank mismatch {} vs {}", shape_str(a), shape_str(b)));
  }
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeError(fmt::format("broadcast: incompatible shapes {} and {}", shape_str(a), shape_str(b)));
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, [](double x, double y) { return x + y; }); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, [](double x, double y) { return x - y; }); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, [](double x, double y) { return x * y; }); }

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

Tensor sum_to_shape(const Tensor& t, const Shape& shape) {
  if (t.shape() == shape) return t;
  broadcast_shape(shape, t.shape());
  Tensor out(shape);
  const auto so = broadcast_strides(shape, t.shape());
  const std::vector<std::size_t> unit(t.rank(), 0);
  for_each_broadcast(t.shape(), so, unit, [&](std::size_t flat, std::size_t o, std::size_t) { out[o] += t[flat]; });
  return out;
}

Tensor reduce(const Tensor& input, std::size_t axis, ReduceKind kind, std::vector<std::size_t>* argmax) {
  if (axis >= input.rank()) throw ShapeError(fmt::format("reduce: axis {} invalid for {}", axis, shape_str(input.shape())));
  const AxisSplit sp = split_at(input.shape(), axis);
  Shape out_shape = input.shape();
  out_shape[axis] = 1;
  Tensor out(out_shape);
  if (argmax != nullptr) argmax->assign(kind == ReduceKind::max ? out.size() : 0, 0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      const std::size_t dst = o * sp.inner + in;
      if (kind == ReduceKind::max) {
        std::size_t best = base;
        for (std::size_t k = 1; k < sp.extent; ++k) {
          if (input[base + k * sp.inner] > input[best]) best = base + k * sp.inner;
        }
        out[dst] = input[best];
        if (argmax != nullptr) (*argmax)[dst] = best;
      } else {
        double acc = 0.0;
        for (std::size_t k = 0; k < sp.extent; ++k) acc += input[base + k * sp.inner];
        out[dst] = acc / static_cast<double>(sp.extent);
      }
    }
  }
  return out;
}

Tensor reduce_grad(const Tensor& grad_out, const Shape& input_shape, std::size_t axis, ReduceKind kind,
                   const std::vector<std::size_t>* argmax) {
  Tensor gin(input_shape);
  if (kind == ReduceKind::max) {
    if (argmax == nullptr || argmax->size() != grad_out.size()) {
      throw UsageError("reduce_grad: max reduction needs the forward argmax record");
    }
    for (std::size_t i = 0; i < grad_out.size(); ++i) gin[(*argmax)[i]] += grad_out[i];
    return gin;
  }
  const AxisSplit sp = split_at(input_shape, axis);
  const double inv = 1.0 / static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const double g = grad_out[o * sp.inner + in] * inv;
      for (std::size_t k = 0; k < sp.extent; ++k) gin[o * sp.extent * sp.inner + k * sp.inner + in] = g;
    }
  }
  return gin;
}

namespace {
std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (i < n) return i;
  if (n == 1) return 0;
  const std::size_t over = i - n + 1;  // distance past the last element
  return over < n ? n - 1 - over : 0;
}
}  // namespace

Tensor reflect_pad(const Tensor& input, std::size_t pad_bottom, std::size_t pad_right) {
  require_rank(input, 4, "reflect_pad");
  const auto& s = input.shape();
  Tensor out({s[0], s[1], s[2] + pad_bottom, s[3] + pad_right});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      for (std::size_t y = 0; y < s[2] + pad_bottom; ++y) {
        for (std::size_t x = 0; x < s[3] + pad_right; ++x) {
          out.at(n, c, y, x) = input.at(n, c, reflect_index(y, s[2]), reflect_index(x, s[3]));
        }
      }
    }
  }
  return out;
}

Tensor crop(const Tensor& input, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_rank(input, 4, "crop");
  const auto& s = input.shape();
  if (top + height > s[2] || left + width > s[3]) {
    throw ShapeError(fmt::format("crop: window {}x{} at ({}, {}) exceeds {}", height, width, top, left, shape_str(s)));
  }
  Tensor out({s[0], s[1], height, width});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) out.at(n, c, y, x) = input.at(n, c, top + y, left + x);
      }
    }
  }
  return out;
}

}  // namespace mlattn::ops
