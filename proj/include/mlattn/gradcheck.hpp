#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mlattn/autodiff.hpp"

namespace mlattn {

struct GradCheckOptions {
  double eps = 1e-4;
  // 0 checks every entry; otherwise a seeded random sample of this many
  // entries per leaf (all entries when the leaf is smaller).
  std::size_t max_entries_per_leaf = 0;
  std::uint64_t seed = 7;
  // Entries whose +-eps stencil changes a ReLU sign or max selection are
  // not differentiable at that scale; they are replaced by other entries of
  // the same leaf (or skipped when every entry is checked).
  bool skip_nonsmooth = true;
};

struct LeafError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;  // entries rejected for crossing a kink
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
  std::vector<LeafError> leaves;
};

// Relative error |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

// Compares reverse-mode gradients of `loss_fn` with central differences by
// perturbing the leaf values in place. `loss_fn` rebuilds the graph from the
// leaves' current values; a non-scalar result is contracted with a fixed
// random tensor first. Throws UsageError when two evaluations at the same
// point disagree.
GradCheckResult grad_check(std::span<const ad::Var> leaves, std::span<const std::string> names,
                           const std::function<ad::Var()>& loss_fn, const GradCheckOptions& opt = {});

// Convenience form: draws random inputs of the given shapes (uniform in
// [-1, 1]) and checks gradients with respect to all of them.
GradCheckResult grad_check(const std::vector<Shape>& input_shapes,
                           const std::function<ad::Var(std::span<const ad::Var>)>& builder,
                           const GradCheckOptions& opt = {});

}  // namespace mlattn
