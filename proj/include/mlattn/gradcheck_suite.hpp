#pragma once

#include <string>
#include <vector>

#include "mlattn/gradcheck.hpp"
#include "mlattn/model.hpp"

namespace mlattn {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradSuiteOptions {
  GradCheckOptions check;
  // Sampled entries per parameter tensor for the full-model check.
  std::size_t model_entries_per_leaf = 3;
  std::uint64_t seed = 7;
  // When non-empty, this op's backward rule is scaled by `fault_factor`
  // for the duration of the run.
  std::string fault_op;
  double fault_factor = 1.0;
};

struct ModuleCheck {
  std::string module;
  GradCheckResult result;
  double seconds = 0.0;

  bool passed() const { return result.max_rel_error < kGradCheckTolerance; }
};

// Moves a freshly initialized parameter set to a point where the rectified
// units fed by batchnorm sit on their active side and the triplet branches
// are switched on, so central differences see a smooth function.
void prepare_check_point(ParamStore& store);

// Checks channel_gate, spatial_gate, triplet_prenorm, the three attention
// branches and triplet_fuse at C=4, H=W=6, then the full model for `cfg`
// (with unit-scale output weights, at the prepared check point).
std::vector<ModuleCheck> run_gradcheck_suite(const ModelConfig& cfg, const GradSuiteOptions& opt = {});

}  // namespace mlattn
