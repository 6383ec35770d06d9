#include "mlattn/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn {

namespace {

struct ConvBlock {
  std::size_t convs;
  std::size_t width;
  bool pool_after;
};

std::vector<ConvBlock> backbone_blocks(Backbone b) {
  switch (b) {
    case Backbone::vgg16_2pool:
      return {{2, 64, true}, {2, 128, true}, {3, 256, false}, {3, 512, false}};
    case Backbone::vgg16_3pool:
      return {{2, 64, true}, {2, 128, true}, {3, 256, true}, {3, 512, false}};
    case Backbone::tiny:
      return {{2, 16, true}, {2, 32, true}};
  }
  return {};
}

std::string gate_prefix(const ModelConfig& cfg, std::size_t branch, const char* kind) {
  if (cfg.share_gate_params) return fmt::format("msc.shared.{}", kind);
  return fmt::format("msc.branch{}.{}", branch, kind);
}

constexpr std::size_t kHeadDilation = 2;

}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.backbone = Backbone::tiny;
  cfg.scales = kScalesMS3;
  cfg.head_widths = {32, 32, 16, 16};
  return cfg;
}

std::size_t ModelConfig::backbone_channels() const { return backbone_blocks(backbone).back().width; }

std::size_t ModelConfig::downsample() const {
  std::size_t d = 1;
  for (const auto& b : backbone_blocks(backbone)) d *= b.pool_after ? 2 : 1;
  return d;
}

std::size_t ModelConfig::effective_branch_channels() const {
  if (branch_channels != 0) return branch_channels;
  return std::max<std::size_t>(1, backbone_channels() / scales.size());
}

std::size_t ModelConfig::context_channels() const {
  return backbone_channels() + scales.size() * effective_branch_channels();
}

void ModelConfig::validate() const {
  if (scales.empty()) throw ConfigError("model.scales must not be empty");
  for (std::size_t s : scales) {
    if (s == 0) throw ConfigError("model.scales entries must be >= 1");
  }
  if (head_widths.size() != 4) {
    throw ConfigError(fmt::format("model.head_widths needs 4 entries (one per dilated conv), got {}",
                                  head_widths.size()));
  }
  for (std::size_t w : head_widths) {
    if (w == 0) throw ConfigError("model.head_widths entries must be >= 1");
  }
  if (reduction == 0) throw ConfigError("model.reduction must be >= 1");
  if (spatial_kernel == 0 || spatial_kernel % 2 == 0) {
    throw ConfigError(fmt::format("model.spatial_kernel must be odd, got {}", spatial_kernel));
  }
  if (!(fusion.a >= 0.0 && fusion.b >= 0.0 && fusion.c >= 0.0)) {
    throw ConfigError("model.fusion weights must be finite and >= 0");
  }
  if (!(out_weight_scale >= 0.0) || !std::isfinite(out_weight_scale) || !std::isfinite(out_bias)) {
    throw ConfigError("model.out_weight_scale must be finite and >= 0, model.out_bias finite");
  }
}

const char* backbone_name(Backbone b) {
  switch (b) {
    case Backbone::vgg16_2pool:
      return "vgg16-trunc-2pool";
    case Backbone::vgg16_3pool:
      return "vgg16-trunc-3pool";
    case Backbone::tiny:
      return "tiny";
  }
  return "?";
}

const char* levels_name(AttentionLevels l) {
  switch (l) {
    case AttentionLevels::channel:
      return "1";
    case AttentionLevels::channel_spatial:
      return "1+2";
    case AttentionLevels::channel_spatial_triplet:
      return "1+2+3";
  }
  return "?";
}

Backbone parse_backbone(const std::string& s) {
  for (Backbone b : {Backbone::vgg16_2pool, Backbone::vgg16_3pool, Backbone::tiny}) {
    if (s == backbone_name(b)) return b;
  }
  throw ConfigError(fmt::format("unknown backbone '{}' (vgg16-trunc-2pool, vgg16-trunc-3pool, tiny)", s));
}

AttentionLevels parse_levels(const std::string& s) {
  for (AttentionLevels l :
       {AttentionLevels::channel, AttentionLevels::channel_spatial, AttentionLevels::channel_spatial_triplet}) {
    if (s == levels_name(l)) return l;
  }
  throw ConfigError(fmt::format("unknown attention levels '{}' (1, 1+2, 1+2+3)", s));
}

std::vector<std::size_t> scale_preset(const std::string& name) {
  if (name == "MS1") return kScalesMS1;
  if (name == "MS2") return kScalesMS2;
  if (name == "MS3") return kScalesMS3;
  if (name == "MS4") return kScalesMS4;
  throw ConfigError(fmt::format("unknown scale preset '{}' (MS1..MS4)", name));
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {
      {"backbone", backbone_name(cfg.backbone)},
      {"scales", cfg.scales},
      {"attention_levels", levels_name(cfg.levels)},
      {"branch_channels", cfg.branch_channels},
      {"head_widths", cfg.head_widths},
      {"fusion", {cfg.fusion.a, cfg.fusion.b, cfg.fusion.c}},
      {"reduction", cfg.reduction},
      {"spatial_kernel", cfg.spatial_kernel},
      {"share_gate_params", cfg.share_gate_params},
      {"out_weight_scale", cfg.out_weight_scale},
      {"out_bias", cfg.out_bias},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model section must be an object");
  ModelConfig cfg;
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "tiny") {
      cfg = ModelConfig::tiny();
    } else if (preset != "full") {
      throw ConfigError(fmt::format("unknown model preset '{}' (tiny, full)", preset));
    }
  }
  try {
    if (j.contains("backbone")) cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
    if (j.contains("scales")) {
      const auto& s = j.at("scales");
      cfg.scales = s.is_string() ? scale_preset(s.get<std::string>()) : s.get<std::vector<std::size_t>>();
    }
    if (j.contains("attention_levels")) cfg.levels = parse_levels(j.at("attention_levels").get<std::string>());
    if (j.contains("branch_channels")) cfg.branch_channels = j.at("branch_channels").get<std::size_t>();
    if (j.contains("head_widths")) cfg.head_widths = j.at("head_widths").get<std::vector<std::size_t>>();
    if (j.contains("fusion")) {
      const auto f = j.at("fusion").get<std::vector<double>>();
      if (f.size() != 3) throw ConfigError("model.fusion must hold three weights [a, b, c]");
      cfg.fusion = {f[0], f[1], f[2]};
    }
    if (j.contains("reduction")) cfg.reduction = j.at("reduction").get<std::size_t>();
    if (j.contains("spatial_kernel")) cfg.spatial_kernel = j.at("spatial_kernel").get<std::size_t>();
    if (j.contains("share_gate_params")) cfg.share_gate_params = j.at("share_gate_params").get<bool>();
    if (j.contains("out_weight_scale")) cfg.out_weight_scale = j.at("out_weight_scale").get<double>();
    if (j.contains("out_bias")) cfg.out_bias = j.at("out_bias").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model section: {}", e.what()));
  }
  cfg.validate();
  return cfg;
}

namespace {

void add_conv(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              bool bias, std::mt19937_64& rng) {
  store.add(name + ".weight", he_uniform({cout, cin, k, k}, cin * k * k, rng));
  if (bias) store.add(name + ".bias", Tensor({cout}));
}

void add_bn(ParamStore& store, const std::string& name, std::size_t channels) {
  store.add(name + ".gamma", Tensor({channels}, 1.0));
  store.add(name + ".beta", Tensor({channels}, 0.0));
  store.add_buffer(name + ".running_mean", Tensor({channels}, 0.0));
  store.add_buffer(name + ".running_var", Tensor({channels}, 1.0));
}

ad::Var conv_bn_relu(const ad::Var& x, ParamStore& store, const std::string& conv, const std::string& bn,
                     const ops::Conv2dOptions& opt, ops::Mode mode) {
  ad::Var y = ad::conv2d(x, store.get(conv + ".weight"), nullptr, opt);
  y = ad::batchnorm2d(y, store.get(bn + ".gamma"), store.get(bn + ".beta"), store.buffer(bn + ".running_mean"),
                      store.buffer(bn + ".running_var"), mode);
  return ad::relu(y);
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore store;

  std::size_t cin = 3;
  std::size_t idx = 0;
  for (const auto& block : backbone_blocks(cfg.backbone)) {
    for (std::size_t i = 0; i < block.convs; ++i, ++idx) {
      add_conv(store, fmt::format("backbone.conv{}", idx), cin, block.width, 3, true, rng);
      cin = block.width;
    }
  }

  const std::size_t c = cfg.backbone_channels();
  const std::size_t cb = cfg.effective_branch_channels();
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    add_conv(store, fmt::format("msc.branch{}.proj", s), c, cb, 1, true, rng);
  }
  const std::size_t gate_sets = cfg.share_gate_params ? 1 : cfg.scales.size();
  for (std::size_t s = 0; s < gate_sets; ++s) {
    attn::add_channel_gate(store, gate_prefix(cfg, s, "cg"), cb, cfg.reduction, rng);
    if (cfg.levels != AttentionLevels::channel) {
      attn::add_spatial_gate(store, gate_prefix(cfg, s, "sg"), cfg.spatial_kernel, rng);
    }
  }

  const std::size_t cm = cfg.context_channels();
  if (cfg.levels == AttentionLevels::channel_spatial_triplet) {
    for (attn::Axis axis : attn::kAxes) {
      attn::add_branch(store, fmt::format("triplet.{}", attn::axis_name(axis)), cm, rng);
    }
  }

  const auto& w = cfg.head_widths;
  add_conv(store, "head.conv0", cm, w[0], 3, false, rng);
  add_bn(store, "head.bn0", w[0]);
  std::size_t prev = w[0];
  for (std::size_t i = 0; i < w.size(); ++i) {
    add_conv(store, fmt::format("head.dil{}", i), prev, w[i], 3, false, rng);
    add_bn(store, fmt::format("head.dil{}.bn", i), w[i]);
    prev = w[i];
  }
  add_conv(store, "head.out", prev, 1, 1, true, rng);
  for (double& w : store.get("head.out.weight").mutable_value().data()) w *= cfg.out_weight_scale;
  store.get("head.out.bias").mutable_value()[0] = cfg.out_bias;
  return store;
}

ad::Var backbone_forward(const ad::Var& image, const ModelConfig& cfg, const ParamStore& store) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError(fmt::format("backbone expects [N,3,H,W], got {}", shape_str(s)));
  }
  const std::size_t d = cfg.downsample();
  if (s[2] % d != 0 || s[3] % d != 0) {
    throw UsageError(fmt::format("image size {}x{} is not divisible by {}; pad or crop the input first", s[2], s[3],
                                 d));
  }
  ad::Var x = image;
  std::size_t idx = 0;
  for (const auto& block : backbone_blocks(cfg.backbone)) {
    for (std::size_t i = 0; i < block.convs; ++i, ++idx) {
      const std::string name = fmt::format("backbone.conv{}", idx);
      ad::Var bias = store.get(name + ".bias");
      x = ad::relu(ad::conv2d(x, store.get(name + ".weight"), &bias, {.stride = 1, .pad = 1, .dilation = 1}));
    }
    if (block.pool_after) x = ad::pool2d(x, ops::PoolKind::max, 2, 2);
  }
  return x;
}

ad::Var multi_scale_context(const ad::Var& features, const ModelConfig& cfg, ParamStore& store, ops::Mode mode) {
  const Shape& s = features.shape();
  const std::size_t h = s[2];
  const std::size_t w = s[3];
  std::vector<ad::Var> parts{features};
  for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
    const std::size_t bins = cfg.scales[i];
    if (bins > std::min(h, w)) {
      throw ConfigError(fmt::format("pooling scale {} (entry {}) exceeds the {}x{} feature map", bins, i, h, w));
    }
    const std::string proj = fmt::format("msc.branch{}.proj", i);
    ad::Var bias = store.get(proj + ".bias");
    ad::Var branch = ad::conv2d(ad::avg_pool_to_bins(features, bins), store.get(proj + ".weight"), &bias);
    branch = ad::bilinear_upsample(branch, h, w);
    branch = attn::channel_gate(branch, attn::channel_gate_params(store, gate_prefix(cfg, i, "cg")));
    if (cfg.levels != AttentionLevels::channel) {
      branch = attn::spatial_gate(branch, attn::spatial_gate_params(store, gate_prefix(cfg, i, "sg")), mode);
    }
    parts.push_back(branch);
  }
  return ad::concat(parts, 1);
}

ad::Var head_forward(const ad::Var& fused, const ModelConfig& cfg, ParamStore& store, ops::Mode mode) {
  ad::Var x = conv_bn_relu(fused, store, "head.conv0", "head.bn0", {.stride = 1, .pad = 1, .dilation = 1}, mode);
  for (std::size_t i = 0; i < cfg.head_widths.size(); ++i) {
    const std::string name = fmt::format("head.dil{}", i);
    x = conv_bn_relu(x, store, name, name + ".bn", {.stride = 1, .pad = kHeadDilation, .dilation = kHeadDilation},
                     mode);
  }
  ad::Var bias = store.get("head.out.bias");
  return ad::relu(ad::conv2d(x, store.get("head.out.weight"), &bias));
}

attn::TripletParams triplet_params(const ModelConfig& cfg, const ParamStore& store) {
  attn::TripletParams p;
  p.channel = attn::branch_params(store, "triplet.channel");
  p.row = attn::branch_params(store, "triplet.row");
  p.column = attn::branch_params(store, "triplet.column");
  p.fusion = cfg.fusion;
  return p;
}

ad::Var model_forward(const ad::Var& image, const ModelConfig& cfg, ParamStore& store, ops::Mode mode) {
  ad::Var features = backbone_forward(image, cfg, store);
  ad::Var context = multi_scale_context(features, cfg, store, mode);
  if (cfg.levels == AttentionLevels::channel_spatial_triplet) {
    context = attn::triplet_attention(context, triplet_params(cfg, store));
  }
  return head_forward(context, cfg, store, mode);
}

Tensor predict_density(const Tensor& image, const ModelConfig& cfg, ParamStore& store) {
  ad::NoGradGuard no_grad;
  return model_forward(ad::constant(image), cfg, store, ops::Mode::eval).value();
}

}  // namespace mlattn
