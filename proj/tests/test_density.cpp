#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mlattn/density.hpp"
#include "mlattn/error.hpp"
#include "mlattn/gradcheck.hpp"
#include "mlattn/ops.hpp"
#include "test_util.hpp"

namespace mlattn {
namespace {

using testing::random_tensor;

double gauss(double dx, double dy, double sigma) {
  return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)) / (2.0 * std::numbers::pi * sigma * sigma);
}

// Grid sum of one Gaussian at pixel centers, dropping samples beyond `cutoff`.
double grid_mass(const Point& p, std::size_t h, std::size_t w, double sigma, double cutoff) {
  double acc = 0.0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double dx = j + 0.5 - p.x, dy = i + 0.5 - p.y;
      if (std::hypot(dx, dy) <= cutoff) acc += gauss(dx, dy, sigma);
    }
  return acc;
}

TEST(DensityMapTest, EmptyPointSet) {
  DensityMap m = make_density_map({}, 8, 12, 4.0);
  EXPECT_EQ(m.values.shape(), (Shape{1, 8, 12}));
  EXPECT_EQ(count(m), 0.0);
  EXPECT_EQ(m.scale, 1u);
}

TEST(DensityMapTest, CentralPointUnitMass) {
  DensityMap m = make_density_map({{32.0, 32.0}}, 64, 64, 4.0);
  EXPECT_NEAR(count(m), 1.0, 1e-3);
  EXPECT_NEAR(count(m), grid_mass({32.0, 32.0}, 64, 64, 4.0, 16.0), 1e-12);
  // Mass beyond a radius of 4 sigma is exp(-8).
  EXPECT_NEAR(count(m), 1.0 - std::exp(-8.0), 1e-4);
}

TEST(DensityMapTest, CornerPointQuarterMass) {
  DensityMap m = make_density_map({{0.0, 0.0}}, 64, 64, 4.0);
  double row = 0.0;
  for (int j = 0; j < 64; ++j) {
    row += std::exp(-(j + 0.5) * (j + 0.5) / 32.0) / std::sqrt(2.0 * std::numbers::pi * 16.0);
  }
  EXPECT_NEAR(count(m), row * row, 1e-3);
  EXPECT_NEAR(count(m), grid_mass({0.0, 0.0}, 64, 64, 4.0, 16.0), 1e-12);
  EXPECT_NEAR(count(m), 0.25, 0.05);
}

TEST(DensityMapTest, PixelValuesMatchFormulaInsideTruncation) {
  const Point p{10.3, 7.8};
  const double sigma = 2.5;
  DensityMap m = make_density_map({p}, 24, 24, sigma);
  for (std::size_t i = 0; i < 24; ++i) {
    for (std::size_t j = 0; j < 24; ++j) {
      const double dx = j + 0.5 - p.x, dy = i + 0.5 - p.y;
      const double v = m.values[i * 24 + j];
      if (std::hypot(dx, dy) < 3.9 * sigma) EXPECT_NEAR(v, gauss(dx, dy, sigma), 1e-15);
      if (std::hypot(dx, dy) > 4.01 * sigma) EXPECT_EQ(v, 0.0);
      EXPECT_GE(v, 0.0);
    }
  }
}

TEST(DensityMapTest, InteriorPointsCountWithinOnePercent) {
  std::mt19937_64 rng(1);
  const double sigma = 4.0;
  std::uniform_real_distribution<double> pos(3 * sigma, 96 - 3 * sigma);
  for (int trial = 0; trial < 20; ++trial) {
    PointSet pts(1 + trial * 3);
    for (auto& p : pts) p = {pos(rng), pos(rng)};
    const double k = static_cast<double>(pts.size());
    EXPECT_NEAR(count(make_density_map(pts, 96, 96, sigma)), k, 0.01 * k);
  }
}

TEST(DensityMapTest, Linearity) {
  PointSet a{{5.0, 5.0}, {20.2, 11.7}}, b{{1.0, 30.0}};
  PointSet ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  const double ca = count(make_density_map(a, 32, 32, 3.0));
  const double cb = count(make_density_map(b, 32, 32, 3.0));
  EXPECT_NEAR(count(make_density_map(ab, 32, 32, 3.0)), ca + cb, 1e-12);
}

TEST(DensityMapTest, Errors) {
  EXPECT_THROW(make_density_map({{1.0, 1.0}}, 8, 8, 0.0), UsageError);
  EXPECT_THROW(make_density_map({{8.0, 1.0}}, 8, 8, 1.0), UsageError);
  EXPECT_THROW(validate_points({{0.0, -1e-9}}, 8, 8), UsageError);
  EXPECT_TRUE(in_bounds({0.0, 0.0}, 8, 8));
  EXPECT_FALSE(in_bounds({8.0, 0.0}, 8, 8));
}

TEST(DownsampleTest, Examples) {
  DensityMap ones{Tensor({1, 4, 4}, 1.0), 1};
  DensityMap d = downsample_count_preserving(ones, 4);
  EXPECT_EQ(d.values.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(d.values[0], 16.0);
  EXPECT_EQ(d.scale, 4u);
  DensityMap r{random_tensor({1, 8, 12}, 2, 0.0, 1.0), 1};
  DensityMap same = downsample_count_preserving(r, 1);
  EXPECT_EQ(max_abs_diff(same.values, r.values), 0.0);
  EXPECT_THROW(downsample_count_preserving(r, 5), UsageError);
}

TEST(DownsampleTest, ConservesMassAndBlocks) {
  DensityMap r{random_tensor({1, 64, 48}, 3, 0.0, 1.0), 1};
  DensityMap d = downsample_count_preserving(r, 4);
  EXPECT_NEAR(count(d), count(r), 1e-9);
  for (std::size_t bi = 0; bi < 16; ++bi)
    for (std::size_t bj = 0; bj < 12; ++bj) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) acc += r.values[(bi * 4 + i) * 48 + bj * 4 + j];
      EXPECT_NEAR(d.values[bi * 12 + bj], acc, 1e-13);
    }
}

TEST(EuclideanLossTest, ClosedForms) {
  DensityMap gt{random_tensor({1, 5, 7}, 4, 0.0, 1.0), 4};
  EXPECT_EQ(euclidean_loss(gt, gt), 0.0);
  DensityMap shifted{ops::add(gt.values, Tensor({1, 1, 1}, 1.0)), 4};
  EXPECT_NEAR(euclidean_loss(shifted, gt), 35.0 / 2.0, 1e-12);
  EXPECT_NEAR(euclidean_loss(shifted, gt, 5), 35.0 / 10.0, 1e-12);
  DensityMap other_scale{gt.values, 1};
  EXPECT_THROW(euclidean_loss(other_scale, gt), UsageError);
  EXPECT_THROW(euclidean_loss(DensityMap{Tensor({1, 5, 6}), 4}, gt), UsageError);
}

TEST(EuclideanLossTest, GradientIsResidualOverBatch) {
  Tensor gt = random_tensor({3, 1, 4, 4}, 5, 0.0, 1.0);
  ad::Var pred = ad::parameter(random_tensor({3, 1, 4, 4}, 6, 0.0, 1.0));
  ad::Var loss = euclidean_loss(pred, gt, 3);
  double expect = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) expect += std::pow(pred.value()[i] - gt[i], 2);
  EXPECT_NEAR(loss.value()[0], expect / 6.0, 1e-14);
  EXPECT_GE(loss.value()[0], 0.0);
  ad::backward(loss);
  Tensor g = pred.grad();
  for (std::size_t i = 0; i < gt.size(); ++i) EXPECT_NEAR(g[i], (pred.value()[i] - gt[i]) / 3.0, 1e-15);

  const std::vector<ad::Var> leaves{pred};
  const std::vector<std::string> names{"pred"};
  EXPECT_LT(grad_check(leaves, names, [&] { return euclidean_loss(pred, gt, 3); }).max_rel_error, 1e-8);
}

TEST(MaeMseTest, HandValues) {
  const std::vector<double> y{10, 20}, yh{12, 17};
  CountErrors e = mae_mse(y, yh);
  EXPECT_EQ(e.mae, 2.5);
  EXPECT_EQ(e.mse, std::sqrt(6.5));
  CountErrors zero = mae_mse(y, y);
  EXPECT_EQ(zero.mae, 0.0);
  EXPECT_EQ(zero.mse, 0.0);
  EXPECT_THROW(mae_mse(std::vector<double>{}, std::vector<double>{}), UsageError);
  EXPECT_THROW(mae_mse(y, std::vector<double>{1.0}), UsageError);
}

TEST(MaeMseTest, MaeNeverExceedsMse) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> val(0.0, 500.0);
  std::uniform_int_distribution<int> len(1, 40);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> y(static_cast<std::size_t>(len(rng))), yh(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = val(rng);
      yh[i] = val(rng);
    }
    CountErrors e = mae_mse(y, yh);
    EXPECT_LE(e.mae, e.mse * (1.0 + 1e-12));
  }
}

}  // namespace
}  // namespace mlattn
