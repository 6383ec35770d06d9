#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "mlattn/commands.hpp"

using namespace mlattn;

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("mlattn"));

  CLI::App app{"Multi-level attention crowd counting: train, evaluate and inspect density models"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  cli::TrainOptions train_opt;
  std::uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", train_opt.config, "Run config JSON (default: tiny-overfit preset)");
  train->add_option("--checkpoint", train_opt.checkpoint, "Initialize matching tensors from this weight file");
  auto* train_seed = train->add_option("--seed", seed, "Override the run seed");
  train->add_option("--out", train_opt.out, "Override the output directory");

  cli::EvalOptions eval_opt;
  auto* eval = app.add_subcommand("eval", "Per-image counts and MAE/MSE of a checkpoint, or k-fold cross validation");
  eval->add_option("--config", eval_opt.config, "Run config JSON (default: tiny-overfit preset)");
  eval->add_option("--checkpoint", eval_opt.checkpoint, "Weight file to evaluate (k-fold: initialization)");
  eval->add_option("--kfold", eval_opt.kfold, "Train and test one model per fold")->check(CLI::Range(2, 1000));
  auto* eval_seed = eval->add_option("--seed", seed, "Override the run seed");
  eval->add_option("--out", eval_opt.out, "Override the output directory");

  cli::PredictOptions predict_opt;
  auto* predict = app.add_subcommand("predict", "Density map and count for one image");
  predict->add_option("--checkpoint", predict_opt.checkpoint, "Weight file")->required();
  predict->add_option("image", predict_opt.image, "Input image (PNM, PNG or JPEG)")->required();
  predict->add_option("--out", predict_opt.out, "Density map PGM (raw values go to <out>.json)");
  predict->add_option("--config", predict_opt.config, "Run config, for checkpoints without model metadata");

  cli::GradcheckOptions grad_opt;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every attention module and the tiny model");
  grad->add_option("--config", grad_opt.config, "Run config whose attention settings are checked");
  grad->add_option("--out", grad_opt.out, "Write the report as JSON");
  auto* grad_seed = grad->add_option("--seed", seed, "Seed for inputs and sampled entries");
  grad->add_option("--fault", grad_opt.fault_op, "Corrupt this op's backward rule (self-test)");
  grad->add_option("--fault-factor", grad_opt.fault_factor, "Scale applied by --fault");

  cli::SynthOptions synth_opt;
  auto* synth = app.add_subcommand("synth", "Write a synthetic annotated dataset");
  synth->add_option("--config", synth_opt.config, "Synth config JSON");
  synth->add_option("--out", synth_opt.out, "Output directory")->required();
  synth->add_option("-n,--count", synth_opt.n, "Number of scenes")->required();
  auto* synth_seed = synth->add_option("--seed", seed, "Override the synth seed");

  cli::ImportCommandOptions import_opt;
  auto* import = app.add_subcommand("import", "Convert a benchmark dataset's MAT annotations to an annotation index");
  import->add_option("--format", import_opt.format, "ucf_cc_50, shanghaitech or ucf_qnrf")->required();
  import->add_option("root", import_opt.root, "Dataset directory")->required();
  import->add_option("--out", import_opt.out, "Index file to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitValidation;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  auto with_seed = [&](CLI::Option* flag) { return flag->count() ? std::optional<std::uint64_t>(seed) : std::nullopt; };
  return cli::guarded(
      [&] {
        if (*train) {
          train_opt.seed = with_seed(train_seed);
          return cli::cmd_train(train_opt, std::cout);
        }
        if (*eval) {
          eval_opt.seed = with_seed(eval_seed);
          return cli::cmd_eval(eval_opt, std::cout);
        }
        if (*predict) return cli::cmd_predict(predict_opt, std::cout);
        if (*grad) {
          grad_opt.seed = with_seed(grad_seed);
          return cli::cmd_gradcheck(grad_opt, std::cout);
        }
        if (*synth) {
          synth_opt.seed = with_seed(synth_seed);
          return cli::cmd_synth(synth_opt, std::cout);
        }
        return cli::cmd_import(import_opt, std::cout);
      },
      std::cerr);
}
