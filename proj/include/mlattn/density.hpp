#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mlattn/autodiff.hpp"
#include "mlattn/tensor.hpp"

namespace mlattn {

// Sub-pixel head position. Pixel (row i, col j) has its center at
// (j + 0.5, i + 0.5), so a W-wide image spans x in [0, W).
struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

using PointSet = std::vector<Point>;

bool in_bounds(const Point& p, std::size_t width, std::size_t height);
// Throws UsageError naming the first point outside [0,W) x [0,H).
void validate_points(const PointSet& points, std::size_t width, std::size_t height);

struct DensityMap {
  Tensor values;          // [1, h, w], non-negative
  std::size_t scale = 1;  // resolution divisor relative to the source image

  std::size_t height() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
};

inline constexpr double kTruncationSigmas = 4.0;

// Sum of isotropic Gaussians N(p; P, sigma^2 I) sampled at pixel centers,
// each truncated at 4 sigma; clipped mass at the border is not restored.
DensityMap make_density_map(const PointSet& points, std::size_t height, std::size_t width, double sigma);

double count(const DensityMap& map);

// Block-sum reduction by `factor`; total mass is preserved.
DensityMap downsample_count_preserving(const DensityMap& map, std::size_t factor);
// Same reduction on a [N,C,H,W] tensor.
Tensor block_sum(const Tensor& t, std::size_t factor);

// L = 1/(2N) * sum ||gt - pred||^2 over a batch of N maps.
ad::Var euclidean_loss(const ad::Var& pred, const Tensor& gt, std::size_t batch);
double euclidean_loss(const DensityMap& pred, const DensityMap& gt, std::size_t batch = 1);

struct CountErrors {
  double mae = 0.0;
  double mse = 0.0;  // rooted mean squared error
};

CountErrors mae_mse(std::span<const double> truth, std::span<const double> predicted);

}  // namespace mlattn
