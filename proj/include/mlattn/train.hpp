#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlattn/data.hpp"
#include "mlattn/density.hpp"
#include "mlattn/model.hpp"
#include "mlattn/params.hpp"

namespace mlattn {

struct OptimizerConfig {
  AdamOptions adam;
  std::size_t batch_size = 1;
  std::size_t steps = 200;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::vector<std::string> freeze;   // parameter-name prefixes kept fixed
};

struct DatasetConfig {
  // Either a synthetic preset ("tiny-overfit", "synth") or an annotation index.
  std::string synth_preset = "synth";
  SynthConfig synth;
  std::size_t n_train = 32;
  std::size_t n_val = 8;
  std::filesystem::path annotations;
  double val_fraction = 0.0;  // held-out share of an annotation index
};

struct AugmentConfig {
  // Square crop side. Unset: half the shorter image side, rounded down to a
  // multiple of the model stride. 0 keeps whole images.
  std::optional<std::size_t> crop;
  double flip_prob = 0.5;

  std::size_t crop_for(std::size_t height, std::size_t width, std::size_t stride) const;
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  double sigma = 4.0;
  DatasetConfig dataset;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/default";

  // Tiny model, 8 synthetic 64x64 scenes, full batch, lr 1e-4, 200 steps.
  static RunConfig tiny_overfit();

  // Every problem found, one per entry; empty when the config is usable.
  std::vector<std::string> problems() const;
  // Throws ConfigError carrying the full problem report.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {});
// Missing keys take the defaults of the named preset ("preset" key), or of
// RunConfig{} when absent. Relative paths resolve against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct Dataset {
  std::vector<AnnotatedImage> train;
  std::vector<AnnotatedImage> val;
};

Dataset build_dataset(const RunConfig& cfg);

// Ground-truth density for one sample at the model's output resolution.
Tensor target_density(const AnnotatedImage& sample, double sigma, std::size_t downsample);

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::filesystem::path final_checkpoint;
  double seconds = 0.0;
};

struct TrainHooks {
  // Called after every optimizer step.
  std::function<void(const StepRecord&)> on_step;
};

// Adam on the Euclidean loss. Writes <out>/loss_log.jsonl, periodic
// checkpoints and <out>/final.mlaw. A non-finite loss throws NumericalError
// naming the step and listing every parameter norm.
TrainResult train(const RunConfig& cfg, const std::vector<AnnotatedImage>& data, ParamStore& store,
                  const TrainHooks& hooks = {});

struct ImageCount {
  std::string id;
  double truth = 0.0;
  double predicted = 0.0;
};

struct EvalResult {
  std::vector<ImageCount> images;
  CountErrors errors;
};

// Eval-mode counts for every sample; truth is the annotated point count.
EvalResult evaluate(const std::vector<AnnotatedImage>& data, const ModelConfig& model, ParamStore& store);

// Checkpoint metadata: {"model": ..., "step": ..., "seed": ...}.
std::string checkpoint_metadata(const ModelConfig& model, std::size_t step, std::uint64_t seed);
// Model configuration recorded in a checkpoint written by train().
std::optional<ModelConfig> checkpoint_model_config(const std::filesystem::path& path);

std::vector<StepRecord> read_loss_log(const std::filesystem::path& path);

}  // namespace mlattn
