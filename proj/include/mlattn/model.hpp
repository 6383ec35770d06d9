#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlattn/attention.hpp"
#include "mlattn/autodiff.hpp"
#include "mlattn/params.hpp"

namespace mlattn {

enum class Backbone {
  vgg16_2pool,  // 2(64,3)+MP, 2(128,3)+MP, 3(256,3), 3(512,3): stride 4
  vgg16_3pool,  // 2(64,3)+MP, 2(128,3)+MP, 3(256,3)+MP, 3(512,3): stride 8
  tiny,         // 2(16,3)+MP, 2(32,3)+MP: stride 4, for tests and desk-scale runs
};

enum class AttentionLevels {
  channel,              // level 1 only
  channel_spatial,      // levels 1 + 2
  channel_spatial_triplet,  // levels 1 + 2 + 3
};

// Multi-scale pooling bin sets.
inline const std::vector<std::size_t> kScalesMS1{1, 2, 3, 6};
inline const std::vector<std::size_t> kScalesMS2{3, 5, 7, 9};
inline const std::vector<std::size_t> kScalesMS3{1, 3, 5, 7, 9};
inline const std::vector<std::size_t> kScalesMS4{1, 3, 5, 7};

struct ModelConfig {
  Backbone backbone = Backbone::vgg16_2pool;
  std::vector<std::size_t> scales = kScalesMS3;
  AttentionLevels levels = AttentionLevels::channel_spatial_triplet;
  std::size_t branch_channels = 0;  // 0: backbone channels / number of scales
  std::vector<std::size_t> head_widths{512, 256, 128, 64};
  attn::FusionWeights fusion;
  std::size_t reduction = 16;
  std::size_t spatial_kernel = 7;
  bool share_gate_params = false;
  // Output 1x1 conv init: He-uniform weights times `out_weight_scale`, bias
  // `out_bias`. A small positive start keeps the final ReLU active.
  double out_weight_scale = 0.01;
  double out_bias = 0.05;

  // Small configuration used for gradient checks and desk-scale training.
  static ModelConfig tiny();

  void validate() const;
  std::size_t backbone_channels() const;
  std::size_t downsample() const;
  std::size_t effective_branch_channels() const;
  std::size_t context_channels() const;  // C + S * Cb
};

const char* backbone_name(Backbone b);
const char* levels_name(AttentionLevels l);
Backbone parse_backbone(const std::string& s);
AttentionLevels parse_levels(const std::string& s);
// Accepts "MS1".."MS4".
std::vector<std::size_t> scale_preset(const std::string& name);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// He-uniform convolution and FC weights, zero biases, identity batchnorm,
// zero triplet scales; the output conv follows `out_weight_scale` and
// `out_bias`. Deterministic in `seed`.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

ad::Var backbone_forward(const ad::Var& image, const ModelConfig& cfg, const ParamStore& store);
// [N,C,h,w] -> [N, C + S*Cb, h, w]; the backbone map bypasses the gates.
ad::Var multi_scale_context(const ad::Var& features, const ModelConfig& cfg, ParamStore& store, ops::Mode mode);
// 3x3 conv+bn+relu, four dilated 3x3 conv+bn+relu, 1x1 conv, relu.
ad::Var head_forward(const ad::Var& fused, const ModelConfig& cfg, ParamStore& store, ops::Mode mode);
attn::TripletParams triplet_params(const ModelConfig& cfg, const ParamStore& store);
ad::Var model_forward(const ad::Var& image, const ModelConfig& cfg, ParamStore& store, ops::Mode mode);

// Eval-mode forward without gradient tracking: [N,3,H,W] -> [N,1,H/s,W/s].
Tensor predict_density(const Tensor& image, const ModelConfig& cfg, ParamStore& store);

}  // namespace mlattn
