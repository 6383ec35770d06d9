#include "mlattn/density.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn {

bool in_bounds(const Point& p, std::size_t width, std::size_t height) {
  return p.x >= 0.0 && p.y >= 0.0 && p.x < static_cast<double>(width) && p.y < static_cast<double>(height);
}

void validate_points(const PointSet& points, std::size_t width, std::size_t height) {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!in_bounds(points[i], width, height)) {
      throw UsageError(fmt::format("point {} at ({}, {}) lies outside the {}x{} image", i, points[i].x, points[i].y,
                                   width, height));
    }
  }
}

DensityMap make_density_map(const PointSet& points, std::size_t height, std::size_t width, double sigma) {
  if (!(sigma > 0.0)) throw UsageError(fmt::format("sigma must be positive, got {}", sigma));
  validate_points(points, width, height);
  DensityMap map{Tensor({1, height, width}), 1};
  const double radius = kTruncationSigmas * sigma;
  const double r2 = radius * radius;
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  const double norm = inv_two_var / std::numbers::pi;
  const auto H = static_cast<std::ptrdiff_t>(height);
  const auto W = static_cast<std::ptrdiff_t>(width);
  for (const Point& p : points) {
    // Pixel centers within the radius: j + 0.5 in [x - r, x + r].
    const auto j0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(p.x - radius - 0.5)));
    const auto j1 = std::min<std::ptrdiff_t>(W - 1, static_cast<std::ptrdiff_t>(std::floor(p.x + radius - 0.5)));
    const auto i0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(p.y - radius - 0.5)));
    const auto i1 = std::min<std::ptrdiff_t>(H - 1, static_cast<std::ptrdiff_t>(std::floor(p.y + radius - 0.5)));
    for (std::ptrdiff_t i = i0; i <= i1; ++i) {
      const double dy = static_cast<double>(i) + 0.5 - p.y;
      for (std::ptrdiff_t j = j0; j <= j1; ++j) {
        const double dx = static_cast<double>(j) + 0.5 - p.x;
        const double d2 = dx * dx + dy * dy;
        if (d2 > r2) continue;
        map.values[static_cast<std::size_t>(i) * width + static_cast<std::size_t>(j)] +=
            norm * std::exp(-d2 * inv_two_var);
      }
    }
  }
  return map;
}

double count(const DensityMap& map) { return map.values.sum(); }

Tensor block_sum(const Tensor& t, std::size_t factor) {
  if (t.rank() != 4) throw ShapeError(fmt::format("block_sum expects [N,C,H,W], got {}", shape_str(t.shape())));
  if (factor == 0) throw UsageError("block_sum: factor must be positive");
  const auto& s = t.shape();
  if (s[2] % factor != 0 || s[3] % factor != 0) {
    throw UsageError(fmt::format("map size {}x{} is not divisible by {}", s[2], s[3], factor));
  }
  Tensor out({s[0], s[1], s[2] / factor, s[3] / factor});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t c = 0; c < s[1]; ++c) {
      for (std::size_t y = 0; y < s[2]; ++y) {
        for (std::size_t x = 0; x < s[3]; ++x) out.at(n, c, y / factor, x / factor) += t.at(n, c, y, x);
      }
    }
  }
  return out;
}

DensityMap downsample_count_preserving(const DensityMap& map, std::size_t factor) {
  const Tensor& v = map.values;
  Tensor reduced = block_sum(v.reshaped({1, 1, v.dim(1), v.dim(2)}), factor);
  const auto& s = reduced.shape();
  return {reduced.reshaped({1, s[2], s[3]}), map.scale * factor};
}

ad::Var euclidean_loss(const ad::Var& pred, const Tensor& gt, std::size_t batch) {
  if (pred.shape() != gt.shape()) {
    throw UsageError(fmt::format("euclidean_loss: prediction {} and ground truth {} differ",
                                 shape_str(pred.shape()), shape_str(gt.shape())));
  }
  if (batch == 0) throw UsageError("euclidean_loss: batch size must be positive");
  ad::Var diff = ad::sub(pred, ad::constant(gt));
  return ad::scale(ad::sum(ad::mul(diff, diff)), 0.5 / static_cast<double>(batch));
}

double euclidean_loss(const DensityMap& pred, const DensityMap& gt, std::size_t batch) {
  if (pred.scale != gt.scale) {
    throw UsageError(fmt::format("euclidean_loss: scale {} vs {}", pred.scale, gt.scale));
  }
  if (pred.values.shape() != gt.values.shape()) {
    throw UsageError(fmt::format("euclidean_loss: prediction {} and ground truth {} differ",
                                 shape_str(pred.values.shape()), shape_str(gt.values.shape())));
  }
  if (batch == 0) throw UsageError("euclidean_loss: batch size must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double d = gt.values[i] - pred.values[i];
    acc += d * d;
  }
  return acc / (2.0 * static_cast<double>(batch));
}

CountErrors mae_mse(std::span<const double> truth, std::span<const double> predicted) {
  if (truth.empty()) throw UsageError("mae_mse: no counts to evaluate");
  if (truth.size() != predicted.size()) {
    throw UsageError(fmt::format("mae_mse: {} true counts vs {} predictions", truth.size(), predicted.size()));
  }
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = truth[i] - predicted[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const auto n = static_cast<double>(truth.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

}  // namespace mlattn
