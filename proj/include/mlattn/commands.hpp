#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>

#include "mlattn/gradcheck_suite.hpp"
#include "mlattn/train.hpp"

namespace mlattn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumerical = 2;

// Runs `body`, mapping ConfigError/UsageError/ShapeError/FormatError/IoError
// to kExitValidation and NumericalError to kExitNumerical. Messages go to `err`.
int guarded(const std::function<int()>& body, std::ostream& err);

struct TrainOptions {
  std::filesystem::path config;  // empty: the tiny-overfit preset
  std::filesystem::path checkpoint;  // optional initialization (subset load)
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;  // overrides out_dir
};
int cmd_train(const TrainOptions& opt, std::ostream& out);

struct EvalOptions {
  std::filesystem::path config;
  std::filesystem::path checkpoint;
  std::size_t kfold = 0;  // >= 2 trains and tests one model per fold
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
};
int cmd_eval(const EvalOptions& opt, std::ostream& out);

struct PredictOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path image;
  std::filesystem::path out;  // density PGM; raw values go to <out>.json
  std::filesystem::path config;  // only needed for checkpoints without model metadata
};
int cmd_predict(const PredictOptions& opt, std::ostream& out);

struct GradcheckOptions {
  std::filesystem::path config;  // optional run config; its attention settings are checked
  std::filesystem::path out;     // optional JSON report
  std::optional<std::uint64_t> seed;
  std::string fault_op;          // scales this op's backward rule by fault_factor
  double fault_factor = 1.5;
};
int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out);

struct SynthOptions {
  std::filesystem::path config;  // optional synth section JSON
  std::filesystem::path out;
  std::size_t n = 0;
  std::optional<std::uint64_t> seed;
};
int cmd_synth(const SynthOptions& opt, std::ostream& out);

struct ImportCommandOptions {
  std::string format;
  std::filesystem::path root;
  std::filesystem::path out;  // index path
};
int cmd_import(const ImportCommandOptions& opt, std::ostream& out);

// The model configuration cmd_gradcheck checks for a run config: the run's
// own model when it uses the tiny backbone, otherwise the tiny preset with
// the run's attention settings.
ModelConfig gradcheck_model(const ModelConfig& requested);

}  // namespace mlattn::cli
