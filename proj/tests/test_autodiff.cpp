#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "mlattn/autodiff.hpp"
#include "mlattn/error.hpp"
#include "mlattn/gradcheck.hpp"
#include "mlattn/params.hpp"
#include "test_util.hpp"

namespace mlattn {
namespace {

using testing::random_tensor;

TEST(BackwardTest, SumGivesOnes) {
  ad::Var x = ad::parameter(random_tensor({2, 3}, 1));
  ad::backward(ad::sum(x));
  const Tensor g1 = x.grad();
  for (double g : g1.data()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, HalfSquaredNormGivesInput) {
  ad::Var x = ad::parameter(random_tensor({4, 2}, 2));
  ad::backward(ad::scale(ad::sum(ad::mul(x, x)), 0.5));
  EXPECT_LT(max_abs_diff(x.grad(), x.value()), 1e-15);
}

TEST(BackwardTest, FanOutAccumulates) {
  ad::Var x = ad::parameter(random_tensor({3}, 3));
  ad::backward(ad::sum(ad::add(x, x)));
  const Tensor g2 = x.grad();
  for (double g : g2.data()) EXPECT_EQ(g, 2.0);

  // Diamond: y = x*x used twice.
  ad::Var z = ad::parameter(Tensor({1}, 3.0));
  ad::Var y = ad::mul(z, z);
  ad::backward(ad::add(y, ad::scale(y, 2.0)));
  EXPECT_DOUBLE_EQ(z.grad()[0], 3.0 * 2.0 * 3.0);
}

TEST(BackwardTest, UnreachedLeafHasZeroGrad) {
  ad::Var x = ad::parameter(random_tensor({2}, 4));
  ad::Var unused = ad::parameter(random_tensor({5}, 5));
  ad::backward(ad::sum(x));
  EXPECT_EQ(unused.grad().shape(), (Shape{5}));
  EXPECT_EQ(unused.grad().max_abs(), 0.0);
}

TEST(BackwardTest, NonScalarLossRejected) {
  ad::Var x = ad::parameter(random_tensor({2, 2}, 6));
  EXPECT_THROW(ad::backward(x), UsageError);
}

TEST(BackwardTest, ConstantsReceiveNothing) {
  ad::Var c = ad::constant(random_tensor({3}, 7));
  ad::Var x = ad::parameter(random_tensor({3}, 8));
  ad::backward(ad::sum(ad::mul(c, x)));
  EXPECT_FALSE(c.requires_grad());
  EXPECT_LT(max_abs_diff(x.grad(), c.value()), 1e-15);
}

TEST(BackwardTest, NoGradGuardStopsRecording) {
  ad::Var x = ad::parameter(random_tensor({3}, 9));
  ad::Var y;
  {
    ad::NoGradGuard guard;
    y = ad::sum(ad::mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(BackwardTest, DeepChainDoesNotRecurse) {
  ad::Var x = ad::parameter(Tensor({1}, 1.0));
  ad::Var y = x;
  for (int i = 0; i < 20000; ++i) y = ad::scale(y, 1.0);
  ad::backward(y);
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(GradCheckTest, LinearMapIsExact) {
  Tensor w = random_tensor({3, 4}, 10);
  auto result = grad_check({Shape{4, 2}}, [&](std::span<const ad::Var> in) {
    return ad::matmul(ad::constant(w), in[0]);
  });
  EXPECT_LT(result.max_rel_error, 1e-10);
}

TEST(GradCheckTest, ConvReluMatchesFiniteDifferences) {
  // Inputs are kept away from the ReLU kink by a positive bias.
  Tensor x0 = random_tensor({1, 2, 5, 5}, 11);
  Tensor w0 = random_tensor({3, 2, 3, 3}, 12, -0.3, 0.3);
  Tensor b0({3}, 4.0);
  ad::Var x = ad::parameter(x0), w = ad::parameter(w0), b = ad::parameter(b0);
  const std::vector<ad::Var> leaves{x, w, b};
  const std::vector<std::string> names{"x", "w", "b"};
  auto result = grad_check(leaves, names, [&] {
    return ad::relu(ad::conv2d(x, w, &b, {.stride = 1, .pad = 1, .dilation = 1}));
  });
  EXPECT_LT(result.max_rel_error, 1e-6);
  EXPECT_EQ(result.leaves.size(), 3u);
}

class OpGradTest : public ::testing::TestWithParam<const char*> {};

TEST_P(OpGradTest, MatchesFiniteDifferences) {
  const std::string op = GetParam();
  std::function<ad::Var(std::span<const ad::Var>)> f;
  std::vector<Shape> shapes{{2, 3, 6, 5}};
  Tensor rm({3}), rv({3}, 1.0);
  if (op == "conv_dilated") {
    shapes.push_back({4, 3, 3, 3});
    f = [](auto in) { return ad::conv2d(in[0], in[1], nullptr, {.stride = 1, .pad = 2, .dilation = 2}); };
  } else if (op == "conv_strided") {
    shapes.push_back({2, 3, 3, 3});
    shapes.push_back({2});
    f = [](auto in) { return ad::conv2d(in[0], in[1], &in[2], {.stride = 2, .pad = 1, .dilation = 1}); };
  } else if (op == "maxpool") {
    f = [](auto in) { return ad::pool2d(in[0], ops::PoolKind::max, 2, 2); };
  } else if (op == "avgpool") {
    f = [](auto in) { return ad::pool2d(in[0], ops::PoolKind::avg, 2, 1); };
  } else if (op == "bins") {
    f = [](auto in) { return ad::avg_pool_to_bins(in[0], 3); };
  } else if (op == "gap") {
    f = [](auto in) { return ad::global_avg_pool(in[0]); };
  } else if (op == "bilinear") {
    f = [](auto in) { return ad::bilinear_upsample(in[0], 11, 8); };
  } else if (op == "batchnorm") {
    shapes.push_back({3});
    shapes.push_back({3});
    f = [&](auto in) { return ad::batchnorm2d(in[0], in[1], in[2], rm, rv, ops::Mode::train); };
  } else if (op == "sigmoid") {
    f = [](auto in) { return ad::sigmoid(in[0]); };
  } else if (op == "softmax") {
    f = [](auto in) { return ad::softmax(in[0], 2); };
  } else if (op == "matmul") {
    shapes = {{2, 3, 4}, {2, 5, 4}};
    f = [](auto in) { return ad::matmul(in[0], in[1], false, true); };
  } else if (op == "permute_concat") {
    shapes.push_back({2, 3, 6, 5});
    f = [](auto in) { return ad::permute(ad::concat({in[0], in[1]}, 1), {0, 3, 1, 2}); };
  } else if (op == "reduce") {
    f = [](auto in) {
      return ad::concat({ad::reduce(in[0], 1, ops::ReduceKind::max), ad::reduce(in[0], 1, ops::ReduceKind::mean)}, 1);
    };
  } else if (op == "broadcast_mul") {
    shapes.push_back({2, 3, 1, 1});
    f = [](auto in) { return ad::sub(ad::mul(in[0], in[1]), in[0]); };
  } else if (op == "reshape") {
    f = [](auto in) { return ad::reshape(in[0], {6, 30}); };
  }
  auto result = grad_check(shapes, f);
  EXPECT_LT(result.max_rel_error, 1e-6) << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradTest,
                         ::testing::Values("conv_dilated", "conv_strided", "maxpool", "avgpool", "bins", "gap",
                                           "bilinear", "batchnorm", "sigmoid", "softmax", "matmul", "permute_concat",
                                           "reduce", "broadcast_mul", "reshape"));

TEST(GradCheckTest, DetectsInjectedFault) {
  ad::inject_backward_fault("sigmoid", 1.5);
  auto result = grad_check({Shape{3, 4}}, [](std::span<const ad::Var> in) { return ad::sigmoid(in[0]); });
  ad::clear_backward_faults();
  EXPECT_GT(result.max_rel_error, 0.1);
}

TEST(GradCheckTest, NonDeterministicSubgraphRejected) {
  int calls = 0;
  ad::Var x = ad::parameter(Tensor({2}, 1.0));
  const std::vector<ad::Var> leaves{x};
  const std::vector<std::string> names{"x"};
  EXPECT_THROW(grad_check(leaves, names,
                          [&] {
                            ++calls;
                            return ad::scale(ad::sum(x), 1.0 + 1e-3 * calls);
                          }),
               UsageError);
}

TEST(GradCheckTest, RelativeErrorDefinition) {
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1.0, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(1e-12, 0.0), 1e-12 / 1e-8);
}

ParamStore scalar_store(double init) {
  ParamStore s;
  s.add("w", Tensor({1}, init));
  return s;
}

TEST(AdamTest, ZeroGradientIsFixedPoint) {
  ParamStore s;
  s.add("a", random_tensor({3, 2}, 20));
  s.add("b", random_tensor({4}, 21));
  ParamStore before = s.clone();
  std::map<std::string, Tensor> grads{{"a", Tensor({3, 2})}, {"b", Tensor({4})}};
  adam_step(s, grads, {});
  adam_step(s, grads, {});
  for (const auto& [name, p] : s.params()) {
    EXPECT_EQ(max_abs_diff(p.var.value(), before.get(name).value()), 0.0);
    EXPECT_EQ(p.step, 2);
  }
}

TEST(AdamTest, SingleStepMagnitudeIsLr) {
  ParamStore s = scalar_store(1.0);
  adam_step(s, {{"w", Tensor({1}, 0.37)}}, {.lr = 1e-3});
  EXPECT_NEAR(s.get("w").value()[0], 1.0 - 1e-3, 1e-9);
  ParamStore t = scalar_store(1.0);
  adam_step(t, {{"w", Tensor({1}, -5.0)}}, {.lr = 1e-3});
  EXPECT_NEAR(t.get("w").value()[0], 1.0 + 1e-3, 1e-9);
}

TEST(AdamTest, TwoStepsMatchScalarRecurrence) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g[2] = {0.5, -0.2};
  double w = 2.0, m = 0.0, v = 0.0;
  ParamStore s = scalar_store(2.0);
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g[t - 1];
    v = b2 * v + (1 - b2) * g[t - 1] * g[t - 1];
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
    adam_step(s, {{"w", Tensor({1}, g[t - 1])}}, {.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps});
  }
  EXPECT_NEAR(s.get("w").value()[0], w, 1e-15);
  EXPECT_NEAR(s.params().at("w").m[0], m, 1e-15);
  EXPECT_NEAR(s.params().at("w").v[0], v, 1e-15);
}

TEST(AdamTest, UsesLeafGradientsAndSkipsFrozen) {
  ParamStore s;
  ad::Var a = s.add("head.w", Tensor({2}, 1.0));
  ad::Var b = s.add("backbone.w", Tensor({2}, 1.0));
  ad::backward(ad::sum(ad::add(a, b)));
  EXPECT_EQ(s.freeze({"backbone."}), 1u);
  adam_step(s, {.lr = 0.1});
  EXPECT_NEAR(s.get("head.w").value()[0], 0.9, 1e-9);
  EXPECT_EQ(s.get("backbone.w").value()[0], 1.0);
}

TEST(AdamTest, ShapeMismatchRejected) {
  ParamStore s = scalar_store(1.0);
  EXPECT_THROW(adam_step(s, {{"w", Tensor({2})}}, {}), UsageError);
  EXPECT_THROW(adam_step(s, {}, {}), UsageError);
}

class WeightFileTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("mlattn_weights_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }

  static ParamStore sample_store(std::uint64_t seed) {
    ParamStore s;
    s.add("conv.weight", random_tensor({4, 3, 3, 3}, seed));
    s.add("conv.bias", random_tensor({4}, seed + 1));
    s.add_buffer("bn.running_mean", random_tensor({4}, seed + 2));
    return s;
  }

  std::filesystem::path dir_;
};

TEST_F(WeightFileTest, RoundTripIsBitIdentical) {
  ParamStore a = sample_store(30);
  a.get("conv.bias").mutable_value()[0] = -0.0;
  a.get("conv.bias").mutable_value()[1] = 1e-310;
  save_weights(a, dir_ / "w.mlaw", "{\"k\":1}");
  ParamStore b = sample_store(99);
  LoadReport r = load_weights(b, dir_ / "w.mlaw");
  EXPECT_EQ(r.metadata, "{\"k\":1}");
  EXPECT_EQ(r.loaded, 3u);
  for (const auto& [name, p] : a.params()) {
    const auto& x = p.var.value().vec();
    const auto& y = b.get(name).value().vec();
    ASSERT_EQ(x.size(), y.size());
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)), 0) << name;
  }
  EXPECT_EQ(max_abs_diff(a.buffer("bn.running_mean"), b.buffer("bn.running_mean")), 0.0);
  EXPECT_TRUE(std::signbit(b.get("conv.bias").value()[0]));
  EXPECT_EQ(read_weights_metadata(dir_ / "w.mlaw"), "{\"k\":1}");
}

TEST_F(WeightFileTest, ShapeMismatchNamesEntry) {
  save_weights(sample_store(1), dir_ / "w.mlaw");
  ParamStore other;
  other.add("conv.weight", Tensor({4, 3, 5, 5}));
  other.add("conv.bias", Tensor({4}));
  other.add_buffer("bn.running_mean", Tensor({4}));
  try {
    load_weights(other, dir_ / "w.mlaw");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("conv.weight"), std::string::npos);
  }
}

TEST_F(WeightFileTest, StrictVersusSubset) {
  save_weights(sample_store(1), dir_ / "w.mlaw");
  ParamStore partial;
  partial.add("conv.weight", Tensor({4, 3, 3, 3}));
  EXPECT_THROW(load_weights(partial, dir_ / "w.mlaw", LoadMode::strict), FormatError);
  LoadReport r = load_weights(partial, dir_ / "w.mlaw", LoadMode::subset);
  EXPECT_EQ(r.loaded, 1u);
  EXPECT_EQ(r.skipped.size(), 2u);

  ParamStore bigger = sample_store(2);
  bigger.add("extra", Tensor({1}));
  EXPECT_THROW(load_weights(bigger, dir_ / "w.mlaw", LoadMode::strict), FormatError);
}

TEST_F(WeightFileTest, CorruptFilesRejected) {
  {
    std::ofstream(dir_ / "bad.mlaw", std::ios::binary) << "NOPE!garbage";
  }
  ParamStore s = sample_store(1);
  EXPECT_THROW(load_weights(s, dir_ / "bad.mlaw"), FormatError);
  save_weights(s, dir_ / "w.mlaw");
  const auto size = std::filesystem::file_size(dir_ / "w.mlaw");
  std::filesystem::resize_file(dir_ / "w.mlaw", size - 8);
  EXPECT_THROW(load_weights(s, dir_ / "w.mlaw"), FormatError);
  EXPECT_THROW(load_weights(s, dir_ / "missing.mlaw"), IoError);
}

TEST(ParamStoreTest, DuplicateNamesAndClone) {
  ParamStore s;
  s.add("a", Tensor({2}, 1.0));
  EXPECT_THROW(s.add("a", Tensor({2})), UsageError);
  EXPECT_THROW(s.get("b"), UsageError);
  ParamStore c = s.clone();
  c.get("a").mutable_value()[0] = 5.0;
  EXPECT_EQ(s.get("a").value()[0], 1.0);
  EXPECT_EQ(s.num_scalars(), 2u);
}

TEST(ParamStoreTest, HeUniformBoundsAndDeterminism) {
  std::mt19937_64 r1(5), r2(5);
  Tensor a = he_uniform({8, 4, 3, 3}, 36, r1);
  Tensor b = he_uniform({8, 4, 3, 3}, 36, r2);
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
  EXPECT_LE(a.max_abs(), std::sqrt(6.0 / 36.0));
  EXPECT_GT(a.max_abs(), 0.5 * std::sqrt(6.0 / 36.0));
}

}  // namespace
}  // namespace mlattn
