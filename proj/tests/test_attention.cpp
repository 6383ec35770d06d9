#include <gtest/gtest.h>

#include <cmath>

#include "mlattn/attention.hpp"
#include "mlattn/error.hpp"
#include "mlattn/gradcheck.hpp"
#include "test_util.hpp"

namespace mlattn {
namespace {

using testing::random_tensor;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct Fixture {
  ParamStore store;
  attn::ChannelGateParams cg;
  attn::SpatialGateParams sg;
  attn::TripletParams tp;

  explicit Fixture(std::size_t channels, std::size_t reduction = 2, std::size_t kernel = 3, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    cg = attn::add_channel_gate(store, "cg", channels, reduction, rng);
    sg = attn::add_spatial_gate(store, "sg", kernel, rng);
    tp.channel = attn::add_branch(store, "triplet.channel", channels, rng);
    tp.row = attn::add_branch(store, "triplet.row", channels, rng);
    tp.column = attn::add_branch(store, "triplet.column", channels, rng);
  }
};

void fill(ad::Var v, double value) {
  for (double& x : v.mutable_value().data()) x = value;
}

TEST(BottleneckTest, ClampsToOne) {
  EXPECT_EQ(attn::bottleneck_width(64, 16), 4u);
  EXPECT_EQ(attn::bottleneck_width(4, 16), 1u);
  EXPECT_THROW(attn::bottleneck_width(4, 0), ConfigError);
}

TEST(ChannelGateTest, ZeroWeightsHalveInput) {
  Fixture f(4);
  for (auto* v : {&f.cg.fc1_w, &f.cg.fc2_w}) fill(*v, 0.0);
  Tensor x = random_tensor({2, 4, 3, 3}, 2);
  Tensor y = attn::channel_gate(ad::constant(x), f.cg).value();
  EXPECT_LT(max_abs_diff(y, ops::scale(x, 0.5)), 1e-15);
}

TEST(ChannelGateTest, HandEvaluatedBottleneck) {
  Fixture f(2, 2);
  f.cg.fc1_w.mutable_value() = Tensor({2, 1}, std::vector<double>{0.5, -1.0});
  f.cg.fc1_b.mutable_value() = Tensor({1}, 0.25);
  f.cg.fc2_w.mutable_value() = Tensor({1, 2}, std::vector<double>{2.0, -3.0});
  f.cg.fc2_b.mutable_value() = Tensor({2}, std::vector<double>{0.1, 0.2});
  Tensor x({1, 2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    x[i] = 3.0;
    x[4 + i] = 1.0;
  }
  const double hidden = std::max(0.0, 0.5 * 3.0 - 1.0 * 1.0 + 0.25);
  const double s0 = sig(2.0 * hidden + 0.1);
  const double s1 = sig(-3.0 * hidden + 0.2);
  Tensor y = attn::channel_gate(ad::constant(x), f.cg).value();
  EXPECT_NEAR(y[0], 3.0 * s0, 1e-15);
  EXPECT_NEAR(y[7], 1.0 * s1, 1e-15);
}

TEST(ChannelGateTest, NeverIncreasesMagnitude) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Fixture f(6, 3, 3, seed);
    Tensor x = random_tensor({2, 6, 4, 5}, 100 + seed, -5.0, 5.0);
    Tensor y = attn::channel_gate(ad::constant(x), f.cg).value();
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
  }
}

TEST(ChannelGateTest, ChannelMismatch) {
  Fixture f(4);
  EXPECT_THROW(attn::channel_gate(ad::constant(Tensor({1, 3, 2, 2})), f.cg), ShapeError);
}

TEST(SpatialGateTest, ZeroConvHalvesInput) {
  Fixture f(3);
  fill(f.sg.conv_w, 0.0);
  Tensor x = random_tensor({2, 3, 4, 4}, 3);
  Tensor y = attn::spatial_gate(ad::constant(x), f.sg, ops::Mode::train).value();
  EXPECT_LT(max_abs_diff(y, ops::scale(x, 0.5)), 1e-15);
}

TEST(SpatialGateTest, ConstantInputGivesConstantMask) {
  Fixture f(2, 2, 1);
  Tensor x({1, 2, 5, 5});
  for (std::size_t i = 0; i < 25; ++i) {
    x[i] = 0.7;
    x[25 + i] = -0.2;
  }
  Tensor y = attn::spatial_gate(ad::constant(x), f.sg, ops::Mode::eval).value();
  for (std::size_t i = 1; i < 25; ++i) EXPECT_NEAR(y[i] / x[i], y[0] / x[0], 1e-14);
}

TEST(SpatialGateTest, HandThreeByThree) {
  Fixture f(1, 1, 3);
  Tensor w({1, 2, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) {
    w[i] = 0.1 * static_cast<double>(i) - 0.3;
    w[9 + i] = 0.05 * static_cast<double>(i % 3) + 0.02;
  }
  f.sg.conv_w.mutable_value() = w;
  Tensor x({1, 1, 3, 3}, std::vector<double>{1, -2, 3, 0.5, 2, -1, 0, 1.5, -0.5});
  Tensor y = attn::spatial_gate(ad::constant(x), f.sg, ops::Mode::eval).value();
  // One channel: max and mean are both x itself.
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double logit = 0.0;
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          const int r = i + di, c = j + dj;
          if (r < 0 || c < 0 || r > 2 || c > 2) continue;
          const double v = x[static_cast<std::size_t>(r * 3 + c)];
          const std::size_t tap = static_cast<std::size_t>((di + 1) * 3 + dj + 1);
          logit += (w[tap] + w[9 + tap]) * v;
        }
      }
      const double bn = logit / std::sqrt(1.0 + ops::kBatchNormEps);
      const std::size_t idx = static_cast<std::size_t>(i * 3 + j);
      EXPECT_NEAR(y[idx], x[idx] * sig(bn), 1e-14);
    }
  }
}

TEST(SpatialGateTest, NeverIncreasesMagnitude) {
  Fixture f(4, 2, 7);
  Tensor x = random_tensor({2, 4, 8, 8}, 5, -4.0, 4.0);
  Tensor y = attn::spatial_gate(ad::constant(x), f.sg, ops::Mode::train).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
}

TEST(PrenormTest, ZeroAndElementwiseIdentity) {
  EXPECT_EQ(attn::triplet_prenorm(ad::constant(Tensor({1, 2, 3, 3}))).value().max_abs(), 0.0);
  Tensor x = random_tensor({2, 3, 4, 5}, 6, -3.0, 3.0);
  Tensor y = attn::triplet_prenorm(ad::constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], sig(x[i]) * x[i], 1e-12);
}

// Naive evaluation of one attention branch straight from index arithmetic.
Tensor naive_branch(const Tensor& x, attn::Axis axis, const Tensor& w, const Tensor& b, double beta) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor a = x;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t ww = 0; ww < W; ++ww) {
          double acc = b[c];
          for (std::size_t k = 0; k < C; ++k) acc += w[c * C + k] * x.at(n, k, h, ww);
          a.at(n, c, h, ww) = acc;
        }
  std::size_t d = C, rest = H * W;
  if (axis == attn::Axis::row) d = H, rest = C * W;
  if (axis == attn::Axis::column) d = W, rest = C * H;
  auto locate = [&](std::size_t i, std::size_t k) -> std::array<std::size_t, 3> {
    if (axis == attn::Axis::channel) return {i, k / W, k % W};
    if (axis == attn::Axis::row) return {k / W, i, k % W};
    return {k / H, k % H, i};
  };
  Tensor out = x;
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> s(d * d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < rest; ++k) {
          auto p = locate(i, k), q = locate(j, k);
          acc += a.at(n, p[0], p[1], p[2]) * a.at(n, q[0], q[1], q[2]);
        }
        s[i * d + j] = acc;
      }
    for (std::size_t i = 0; i < d; ++i) {
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, s[i * d + j]);
      for (std::size_t j = 0; j < d; ++j) z += std::exp(s[i * d + j] - mx);
      for (std::size_t k = 0; k < rest; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          auto q = locate(j, k);
          acc += std::exp(s[i * d + j] - mx) / z * a.at(n, q[0], q[1], q[2]);
        }
        auto p = locate(i, k);
        out.at(n, p[0], p[1], p[2]) += beta * acc;
      }
    }
  }
  return out;
}

TEST(BranchAttentionTest, ZeroBetaIsIdentity) {
  Fixture f(4);
  Tensor x = random_tensor({2, 4, 5, 3}, 7);
  for (attn::Axis axis : attn::kAxes) {
    Tensor y = attn::branch_attention(ad::constant(x), axis, f.tp.branch(axis)).value();
    EXPECT_EQ(max_abs_diff(y, x), 0.0) << attn::axis_name(axis);
  }
}

TEST(BranchAttentionTest, RowsSumToOne) {
  Fixture f(4);
  Tensor x = random_tensor({2, 4, 5, 3}, 8, -2.0, 2.0);
  const std::size_t extent[3] = {4, 5, 3};
  for (attn::Axis axis : attn::kAxes) {
    Tensor m = attn::attention_matrix(x, axis, f.tp.branch(axis));
    const std::size_t d = extent[static_cast<int>(axis)];
    ASSERT_EQ(m.shape(), (Shape{2, d, d}));
    for (std::size_t r = 0; r < 2 * d; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += m[r * d + j];
      EXPECT_NEAR(acc, 1.0, 1e-9);
    }
  }
}

TEST(BranchAttentionTest, IdentityProjectionTwoByTwo) {
  Fixture f(2);
  attn::BranchParams p = f.tp.channel;
  p.proj_w.mutable_value() = Tensor({2, 2, 1, 1}, std::vector<double>{1, 0, 0, 1});
  Tensor x({1, 2, 1, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor m = attn::attention_matrix(x, attn::Axis::channel, p);
  const double hi = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(m[0], hi, 1e-15);
  EXPECT_NEAR(m[1], 1.0 - hi, 1e-15);
  EXPECT_NEAR(m[2], 1.0 - hi, 1e-15);
  EXPECT_NEAR(m[3], hi, 1e-15);
  EXPECT_NEAR(m[0], 0.7311, 5e-5);
  EXPECT_NEAR(m[1], 0.2689, 5e-5);
}

TEST(BranchAttentionTest, MatchesNaiveEvaluation) {
  Fixture f(3);
  Tensor x = random_tensor({2, 3, 4, 5}, 9);
  for (attn::Axis axis : attn::kAxes) {
    attn::BranchParams p = f.tp.branch(axis);
    p.beta.mutable_value()[0] = 0.7;
    p.proj_b.mutable_value() = random_tensor({3}, 10);
    Tensor y = attn::branch_attention(ad::constant(x), axis, p).value();
    Tensor expect = naive_branch(x, axis, p.proj_w.value(), p.proj_b.value(), 0.7);
    EXPECT_LT(max_abs_diff(y, expect), 1e-12) << attn::axis_name(axis);
  }
}

TEST(TripletFuseTest, ResidualAndLinearity) {
  Tensor x = random_tensor({1, 2, 3, 3}, 11);
  ad::Var vx = ad::constant(x);
  Tensor zero = attn::triplet_fuse(vx, ad::constant(random_tensor(x.shape(), 12)),
                                   ad::constant(random_tensor(x.shape(), 13)),
                                   ad::constant(random_tensor(x.shape(), 14)), {0.0, 0.0, 0.0})
                    .value();
  EXPECT_EQ(max_abs_diff(zero, x), 0.0);
  Tensor twice = attn::triplet_fuse(vx, vx, vx, vx, {0.5, 0.3, 0.2}).value();
  EXPECT_LT(max_abs_diff(twice, ops::scale(x, 2.0)), 1e-15);
}

TEST(TripletFuseTest, WeightedSumOracle) {
  Tensor x = random_tensor({2, 3, 4, 4}, 15), dc = random_tensor(x.shape(), 16), dh = random_tensor(x.shape(), 17),
         dw = random_tensor(x.shape(), 18);
  Tensor y = attn::triplet_fuse(ad::constant(x), ad::constant(dc), ad::constant(dh), ad::constant(dw), {}).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], 0.8 * dc[i] + 0.15 * dh[i] + 0.05 * dw[i] + x[i], 1e-15);
}

TEST(TripletFuseTest, Errors) {
  ad::Var x = ad::constant(Tensor({1, 2, 3, 3}));
  ad::Var bad = ad::constant(Tensor({1, 2, 3, 4}));
  EXPECT_THROW(attn::triplet_fuse(x, bad, x, x, {}), ShapeError);
  EXPECT_THROW(attn::triplet_fuse(x, x, x, x, {-0.1, 0.5, 0.6}), ConfigError);
}

TEST(TripletAttentionTest, InitializedModuleIsPrenormPlusResidual) {
  Fixture f(4);
  Tensor x = random_tensor({1, 4, 5, 5}, 19);
  Tensor y = attn::triplet_attention(ad::constant(x), f.tp).value();
  // Every branch passes its (normalized) input through at beta = 0.
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], sig(x[i]) * x[i] + x[i], 1e-12);
}

class AttentionGradTest : public ::testing::TestWithParam<const char*> {};

TEST_P(AttentionGradTest, TinyShapeBelowTolerance) {
  const std::string which = GetParam();
  Fixture f(4, 2, 3, 21);
  for (attn::Axis axis : attn::kAxes) {
    ad::Var beta = f.tp.branch(axis).beta;
    beta.mutable_value()[0] = 0.6;
  }
  ad::Var x = ad::parameter(random_tensor({2, 4, 6, 6}, 22));
  std::vector<ad::Var> leaves{x};
  std::vector<std::string> names{"x"};
  std::function<ad::Var()> fn;
  auto add_leaves = [&](std::initializer_list<std::pair<const char*, ad::Var>> list) {
    for (const auto& [n, v] : list) {
      leaves.push_back(v);
      names.emplace_back(n);
    }
  };
  if (which == "channel_gate") {
    // Keep the hidden layer active to stay off the ReLU kink.
    f.cg.fc1_b.mutable_value() = Tensor({2}, 3.0);
    add_leaves({{"fc1_w", f.cg.fc1_w}, {"fc1_b", f.cg.fc1_b}, {"fc2_w", f.cg.fc2_w}, {"fc2_b", f.cg.fc2_b}});
    fn = [&] { return attn::channel_gate(x, f.cg); };
  } else if (which == "spatial_gate") {
    add_leaves({{"conv", f.sg.conv_w}, {"gamma", f.sg.bn_gamma}, {"beta", f.sg.bn_beta}});
    fn = [&] { return attn::spatial_gate(x, f.sg, ops::Mode::train); };
  } else if (which == "prenorm") {
    fn = [&] { return attn::triplet_prenorm(x); };
  } else if (which == "fuse") {
    ad::Var dc = ad::parameter(random_tensor(x.shape(), 23)), dh = ad::parameter(random_tensor(x.shape(), 24)),
            dw = ad::parameter(random_tensor(x.shape(), 25));
    add_leaves({{"dc", dc}, {"dh", dh}, {"dw", dw}});
    fn = [&, dc, dh, dw] { return attn::triplet_fuse(x, dc, dh, dw, {}); };
  } else {
    const attn::Axis axis = which == "branch_channel" ? attn::Axis::channel
                            : which == "branch_row"   ? attn::Axis::row
                                                      : attn::Axis::column;
    const attn::BranchParams p = f.tp.branch(axis);
    add_leaves({{"proj_w", p.proj_w}, {"proj_b", p.proj_b}, {"beta", p.beta}});
    fn = [&, axis, p] { return attn::branch_attention(x, axis, p); };
  }
  auto result = grad_check(leaves, names, fn);
  EXPECT_LT(result.max_rel_error, 1e-5) << which;
}

INSTANTIATE_TEST_SUITE_P(Modules, AttentionGradTest,
                         ::testing::Values("channel_gate", "spatial_gate", "prenorm", "branch_channel", "branch_row",
                                           "branch_column", "fuse"));

}  // namespace
}  // namespace mlattn
