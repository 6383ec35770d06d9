#include "mlattn/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include <fmt/format.h>

namespace mlattn {

namespace {

constexpr double kHeadShift = 2.0;
constexpr double kOutputBias = 1.0;
constexpr double kBottleneckBias = 1.0;
constexpr double kTripletScale = 0.3;

constexpr std::size_t kModuleChannels = 4;
constexpr std::size_t kModuleSize = 6;

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }
bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void fill(ad::Var v, double value) {
  for (double& x : v.mutable_value().data()) x = value;
}

Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

struct Timed {
  ModuleCheck check;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  explicit Timed(std::string name) { check.module = std::move(name); }
  ModuleCheck finish(GradCheckResult r) {
    check.result = std::move(r);
    check.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return std::move(check);
  }
};

class FaultScope {
 public:
  explicit FaultScope(const GradSuiteOptions& opt) : active_(!opt.fault_op.empty()) {
    if (active_) ad::inject_backward_fault(opt.fault_op, opt.fault_factor);
  }
  ~FaultScope() {
    if (active_) ad::clear_backward_faults();
  }
  FaultScope(const FaultScope&) = delete;
  FaultScope& operator=(const FaultScope&) = delete;

 private:
  bool active_;
};

}  // namespace

void prepare_check_point(ParamStore& store) {
  for (auto& [name, p] : store.params()) {
    if (starts_with(name, "head.") && ends_with(name, "beta")) fill(p.var, kHeadShift);
    if (name == "head.out.bias") fill(p.var, kOutputBias);
    if (ends_with(name, "cg.fc1.bias")) fill(p.var, kBottleneckBias);
    if (starts_with(name, "triplet.") && ends_with(name, ".beta")) fill(p.var, kTripletScale);
  }
}

std::vector<ModuleCheck> run_gradcheck_suite(const ModelConfig& cfg, const GradSuiteOptions& opt) {
  FaultScope fault(opt);
  std::vector<ModuleCheck> out;
  std::mt19937_64 rng(opt.seed);

  ParamStore store;
  attn::ChannelGateParams cg = attn::add_channel_gate(store, "cg", kModuleChannels, cfg.reduction, rng);
  attn::SpatialGateParams sg = attn::add_spatial_gate(store, "sg", cfg.spatial_kernel, rng);
  attn::TripletParams tp;
  tp.channel = attn::add_branch(store, "triplet.channel", kModuleChannels, rng);
  tp.row = attn::add_branch(store, "triplet.row", kModuleChannels, rng);
  tp.column = attn::add_branch(store, "triplet.column", kModuleChannels, rng);
  tp.fusion = cfg.fusion;
  prepare_check_point(store);

  const Shape shape{2, kModuleChannels, kModuleSize, kModuleSize};
  ad::Var x = ad::parameter(uniform(shape, rng, -1.0, 1.0));

  auto check = [&](const std::string& name, std::vector<std::pair<std::string, ad::Var>> extra,
                   const std::function<ad::Var()>& fn) {
    Timed t(name);
    std::vector<ad::Var> leaves{x};
    std::vector<std::string> names{"input"};
    for (auto& [n, v] : extra) {
      leaves.push_back(v);
      names.push_back(n);
    }
    out.push_back(t.finish(grad_check(leaves, names, fn, opt.check)));
  };

  check("channel_gate",
        {{"fc1.weight", cg.fc1_w}, {"fc1.bias", cg.fc1_b}, {"fc2.weight", cg.fc2_w}, {"fc2.bias", cg.fc2_b}},
        [&] { return attn::channel_gate(x, cg); });
  check("spatial_gate", {{"conv.weight", sg.conv_w}, {"bn.gamma", sg.bn_gamma}, {"bn.beta", sg.bn_beta}},
        [&] { return attn::spatial_gate(x, sg, ops::Mode::train); });
  check("triplet_prenorm", {}, [&] { return attn::triplet_prenorm(x); });
  for (attn::Axis axis : attn::kAxes) {
    const attn::BranchParams& p = tp.branch(axis);
    check(fmt::format("branch_attention.{}", attn::axis_name(axis)),
          {{"proj.weight", p.proj_w}, {"proj.bias", p.proj_b}, {"beta", p.beta}},
          [&, axis] { return attn::branch_attention(x, axis, tp.branch(axis)); });
  }
  ad::Var dc = ad::parameter(uniform(shape, rng, -1.0, 1.0));
  ad::Var dh = ad::parameter(uniform(shape, rng, -1.0, 1.0));
  ad::Var dw = ad::parameter(uniform(shape, rng, -1.0, 1.0));
  check("triplet_fuse", {{"d_c", dc}, {"d_h", dh}, {"d_w", dw}},
        [&] { return attn::triplet_fuse(x, dc, dh, dw, tp.fusion); });

  // Full model at the smallest input the largest pooling scale admits.
  {
    Timed t(fmt::format("model[{}]", backbone_name(cfg.backbone)));
    ModelConfig check_cfg = cfg;
    check_cfg.out_weight_scale = 1.0;
    ParamStore model = init_params(check_cfg, opt.seed);
    prepare_check_point(model);
    std::size_t largest = 1;
    for (std::size_t s : cfg.scales) largest = std::max(largest, s);
    const std::size_t side = std::max<std::size_t>(largest, 2) * cfg.downsample();
    ad::Var image = ad::constant(uniform({2, 3, side, side}, rng, 0.0, 1.0));
    std::vector<ad::Var> leaves;
    std::vector<std::string> names;
    for (const auto& [name, p] : model.params()) {
      leaves.push_back(p.var);
      names.push_back(name);
    }
    GradCheckOptions mopt = opt.check;
    mopt.max_entries_per_leaf = opt.model_entries_per_leaf;
    out.push_back(t.finish(
        grad_check(leaves, names, [&] { return model_forward(image, check_cfg, model, ops::Mode::train); }, mopt)));
  }
  return out;
}

}  // namespace mlattn
