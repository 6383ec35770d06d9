#include "mlattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

// Contracts the builder output to a scalar with a fixed random projection so
// every output element contributes with a distinct weight. The output at the
// first evaluation is subtracted as a constant: gradients are unchanged, and
// the loss stays near zero so central differences lose little to rounding.
class ScalarLoss {
 public:
  ScalarLoss(const std::function<ad::Var()>& fn, std::uint64_t seed) : fn_(fn), seed_(seed) {}

  ad::Var operator()() {
    ad::Var out = fn_();
    if (projection_.empty()) {
      std::mt19937_64 rng(seed_ ^ 0x9e3779b97f4a7c15ULL);
      std::uniform_real_distribution<double> dist(0.5, 1.5);
      projection_ = Tensor(out.shape());
      for (double& v : projection_.data()) v = dist(rng);
      reference_ = out.value();
    }
    return ad::sum(ad::mul(ad::sub(out, ad::constant(reference_)), ad::constant(projection_)));
  }

 private:
  const std::function<ad::Var()>& fn_;
  std::uint64_t seed_;
  Tensor projection_;
  Tensor reference_;
};

}  // namespace

GradCheckResult grad_check(std::span<const ad::Var> leaves, std::span<const std::string> names,
                           const std::function<ad::Var()>& loss_fn, const GradCheckOptions& opt) {
  if (opt.eps <= 0.0) throw UsageError("grad_check: eps must be positive");
  ScalarLoss loss(loss_fn, opt.seed);

  for (const auto& leaf : leaves) leaf.node()->grad = Tensor();
  ad::reset_branch_signature();
  const ad::Var l0 = loss();
  const double base = l0.value()[0];
  const std::uint64_t base_signature = ad::branch_signature();
  ad::backward(l0);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());

  const double again = loss().value()[0];
  if (again != base) {
    throw UsageError(fmt::format("grad_check: subgraph is not deterministic ({} vs {})", base, again));
  }

  // Loss at the perturbed point, plus whether it stayed on the base piece.
  auto evaluate = [&](Tensor& value, std::size_t idx, double x) {
    value[idx] = x;
    ad::reset_branch_signature();
    const double l = loss().value()[0];
    return std::pair{l, ad::branch_signature() == base_signature};
  };

  GradCheckResult result;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& value = leaves[li].node()->value;
    std::vector<std::size_t> order(value.size());
    std::iota(order.begin(), order.end(), 0);
    const bool sampled = opt.max_entries_per_leaf != 0 && order.size() > opt.max_entries_per_leaf;
    if (sampled) std::shuffle(order.begin(), order.end(), rng);
    const std::size_t wanted = sampled ? opt.max_entries_per_leaf : order.size();

    LeafError err;
    err.name = li < names.size() ? names[li] : fmt::format("leaf{}", li);
    for (std::size_t idx : order) {
      if (err.checked == wanted) break;
      const double saved = value[idx];
      const auto [plus, plus_smooth] = evaluate(value, idx, saved + opt.eps);
      const auto [minus, minus_smooth] = evaluate(value, idx, saved - opt.eps);
      value[idx] = saved;
      if (opt.skip_nonsmooth && !(plus_smooth && minus_smooth)) {
        ++err.nonsmooth;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * opt.eps);
      const double e = relative_error(analytic[li][idx], numeric);
      if (e > err.max_rel_error) {
        err.max_rel_error = e;
        err.worst_index = idx;
        err.worst_analytic = analytic[li][idx];
        err.worst_numeric = numeric;
      }
      ++err.checked;
    }
    result.max_rel_error = std::max(result.max_rel_error, err.max_rel_error);
    result.checked += err.checked;
    result.nonsmooth += err.nonsmooth;
    result.leaves.push_back(std::move(err));
  }
  return result;
}

GradCheckResult grad_check(const std::vector<Shape>& input_shapes,
                           const std::function<ad::Var(std::span<const ad::Var>)>& builder,
                           const GradCheckOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<ad::Var> inputs;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < input_shapes.size(); ++i) {
    Tensor t(input_shapes[i]);
    for (double& v : t.data()) v = dist(rng);
    inputs.push_back(ad::parameter(std::move(t)));
    names.push_back(fmt::format("input{}", i));
  }
  const std::function<ad::Var()> fn = [&] { return builder(inputs); };
  return grad_check(inputs, names, fn, opt);
}

}  // namespace mlattn
