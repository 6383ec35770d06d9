#include "mlattn/commands.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mlattn/error.hpp"
#include "mlattn/image_io.hpp"
#include "mlattn/importer.hpp"
#include "mlattn/ops.hpp"

namespace mlattn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

RunConfig resolve_run_config(const fs::path& config, const std::optional<std::uint64_t>& seed, const fs::path& out) {
  RunConfig cfg = config.empty() ? RunConfig::tiny_overfit() : load_run_config(config);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write '{}'", path.string()));
  f << j.dump(2) << '\n';
}

json errors_json(const CountErrors& e, std::size_t n) { return {{"mae", e.mae}, {"mse", e.mse}, {"n", n}}; }

json image_record(const ImageCount& c, const std::string& split) {
  return {{"id", c.id},
          {"split", split},
          {"truth", c.truth},
          {"predicted", c.predicted},
          {"abs_error", std::abs(c.predicted - c.truth)}};
}

void print_errors(std::ostream& out, const std::string& label, const CountErrors& e, std::size_t n) {
  out << fmt::format("{:<10} n={:<5} MAE={:<12.6g} MSE={:.6g}\n", label, n, e.mae, e.mse);
}

ParamStore fresh_params(const RunConfig& cfg, const fs::path& init_checkpoint) {
  ParamStore store = init_params(cfg.model, cfg.seed);
  if (!init_checkpoint.empty()) {
    const LoadReport r = load_weights(store, init_checkpoint, LoadMode::subset);
    spdlog::info("initialized {} tensors from {} ({} skipped)", r.loaded, init_checkpoint.string(), r.skipped.size());
  }
  return store;
}

std::vector<AnnotatedImage> select(const std::vector<AnnotatedImage>& all, const std::vector<std::string>& ids) {
  std::map<std::string, const AnnotatedImage*> by_id;
  for (const auto& s : all) by_id[s.id] = &s;
  std::vector<AnnotatedImage> out;
  for (const auto& id : ids) out.push_back(*by_id.at(id));
  return out;
}

}  // namespace

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
  }
  return kExitValidation;
}

int cmd_train(const TrainOptions& opt, std::ostream& out) {
  const RunConfig cfg = resolve_run_config(opt.config, opt.seed, opt.out);
  const Dataset data = build_dataset(cfg);
  fs::create_directories(cfg.out_dir);
  write_json(cfg.out_dir / "config.json", to_json(cfg));
  ParamStore store = fresh_params(cfg, opt.checkpoint);
  spdlog::info("train: {} train / {} val images, {} parameters, {} steps", data.train.size(), data.val.size(),
               store.num_scalars(), cfg.optimizer.steps);

  const TrainResult r = train(cfg, data.train, store, {[&](const StepRecord& s) {
                                if (s.step == 1 || s.step % 20 == 0 || s.step == cfg.optimizer.steps) {
                                  spdlog::info("step {:>5}  loss {:.6g}  |g| {:.4g}", s.step, s.loss, s.grad_norm);
                                }
                              }});
  const EvalResult train_eval = evaluate(data.train, cfg.model, store);
  json metrics = {{"steps", cfg.optimizer.steps},
                  {"initial_loss", r.initial_loss},
                  {"final_loss", r.final_loss},
                  {"loss_ratio", r.initial_loss > 0.0 ? r.final_loss / r.initial_loss : 0.0},
                  {"seconds", r.seconds},
                  {"train", errors_json(train_eval.errors, train_eval.images.size())}};
  print_errors(out, "train", train_eval.errors, train_eval.images.size());
  if (!data.val.empty()) {
    const EvalResult val_eval = evaluate(data.val, cfg.model, store);
    metrics["val"] = errors_json(val_eval.errors, val_eval.images.size());
    print_errors(out, "val", val_eval.errors, val_eval.images.size());
  }
  write_json(cfg.out_dir / "metrics.json", metrics);
  out << fmt::format("loss {:.6g} -> {:.6g} over {} steps; checkpoint {}\n", r.initial_loss, r.final_loss,
                     cfg.optimizer.steps, r.final_checkpoint.string());
  return kExitOk;
}

int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  const RunConfig cfg = resolve_run_config(opt.config, opt.seed, opt.out);
  const Dataset data = build_dataset(cfg);
  fs::create_directories(cfg.out_dir);
  std::ofstream records(cfg.out_dir / "eval.jsonl");
  if (!records) throw IoError(fmt::format("cannot write '{}'", (cfg.out_dir / "eval.jsonl").string()));
  json summary;

  if (opt.kfold == 0) {
    if (opt.checkpoint.empty()) throw UsageError("eval: --checkpoint is required unless --kfold is given");
    ParamStore store = init_params(cfg.model, cfg.seed);
    load_weights(store, opt.checkpoint, LoadMode::strict);
    for (const auto& [split, samples] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}}) {
      if (samples->empty()) continue;
      const EvalResult r = evaluate(*samples, cfg.model, store);
      for (const auto& c : r.images) records << image_record(c, split).dump() << '\n';
      summary[split] = errors_json(r.errors, r.images.size());
      print_errors(out, split, r.errors, r.images.size());
    }
  } else {
    std::vector<AnnotatedImage> all = data.train;
    all.insert(all.end(), data.val.begin(), data.val.end());
    std::vector<std::string> ids;
    for (const auto& s : all) ids.push_back(s.id);
    const auto folds = kfold_splits(ids, opt.kfold, cfg.seed);
    double mae = 0.0, mse = 0.0;
    json per_fold = json::array();
    for (std::size_t k = 0; k < folds.size(); ++k) {
      RunConfig fold_cfg = cfg;
      fold_cfg.seed = split_seed(cfg.seed, 100 + k);
      fold_cfg.out_dir = cfg.out_dir / fmt::format("fold_{}", k);
      const auto train_set = select(all, folds[k].train);
      const auto test_set = select(all, folds[k].test);
      fold_cfg.optimizer.batch_size = std::min(fold_cfg.optimizer.batch_size, train_set.size());
      ParamStore store = fresh_params(fold_cfg, opt.checkpoint);
      train(fold_cfg, train_set, store);
      const EvalResult r = evaluate(test_set, cfg.model, store);
      for (const auto& c : r.images) {
        json rec = image_record(c, "test");
        rec["fold"] = k;
        records << rec.dump() << '\n';
      }
      per_fold.push_back(errors_json(r.errors, r.images.size()));
      print_errors(out, fmt::format("fold {}", k), r.errors, r.images.size());
      mae += r.errors.mae;
      mse += r.errors.mse;
    }
    const CountErrors avg{mae / static_cast<double>(folds.size()), mse / static_cast<double>(folds.size())};
    summary["folds"] = per_fold;
    summary["average"] = {{"mae", avg.mae}, {"mse", avg.mse}, {"k", folds.size()}};
    print_errors(out, "average", avg, all.size());
  }
  write_json(cfg.out_dir / "eval_metrics.json", summary);
  return kExitOk;
}

int cmd_predict(const PredictOptions& opt, std::ostream& out) {
  ModelConfig model;
  if (auto from_ckpt = checkpoint_model_config(opt.checkpoint)) {
    model = *from_ckpt;
  } else if (!opt.config.empty()) {
    model = load_run_config(opt.config).model;
  } else {
    throw UsageError(fmt::format("predict: '{}' carries no model metadata; pass --config", opt.checkpoint.string()));
  }
  ParamStore store = init_params(model, 0);
  load_weights(store, opt.checkpoint, LoadMode::strict);

  const Tensor image = read_image(opt.image);
  const std::size_t H = image.dim(1), W = image.dim(2), s = model.downsample();
  Tensor batch = image.reshaped({1, 3, H, W});
  const std::size_t pad_h = (s - H % s) % s, pad_w = (s - W % s) % s;
  if (pad_h != 0 || pad_w != 0) {
    spdlog::info("predict: {}x{} is not divisible by {}; reflection-padding by {} rows, {} columns", W, H, s, pad_h,
                 pad_w);
    batch = ops::reflect_pad(batch, pad_h, pad_w);
  }
  Tensor density = predict_density(batch, model, store);
  const std::size_t oh = (H + s - 1) / s, ow = (W + s - 1) / s;
  if (density.dim(2) != oh || density.dim(3) != ow) density = ops::crop(density, 0, 0, oh, ow);

  DensityMap map{density.reshaped({1, oh, ow}), s};
  const double total = count(map);
  if (!opt.out.empty()) {
    if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
    write_density_pgm(map, opt.out);
    fs::path raw = opt.out;
    raw += ".json";
    write_json(raw, {{"height", oh},
                     {"width", ow},
                     {"scale", s},
                     {"count", total},
                     {"values", map.values.vec()}});
  }
  out << fmt::format("{} count {:.6f} ({}x{} map)\n", opt.image.string(), total, ow, oh);
  return kExitOk;
}

ModelConfig gradcheck_model(const ModelConfig& requested) {
  if (requested.backbone == Backbone::tiny) return requested;
  ModelConfig cfg = ModelConfig::tiny();
  cfg.levels = requested.levels;
  cfg.fusion = requested.fusion;
  cfg.reduction = requested.reduction;
  cfg.spatial_kernel = requested.spatial_kernel;
  cfg.share_gate_params = requested.share_gate_params;
  cfg.scales = requested.scales;
  return cfg;
}

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out) {
  const ModelConfig model =
      opt.config.empty() ? ModelConfig::tiny() : gradcheck_model(load_run_config(opt.config).model);
  GradSuiteOptions suite;
  if (opt.seed) suite.seed = *opt.seed;
  suite.fault_op = opt.fault_op;
  suite.fault_factor = opt.fault_factor;
  if (!opt.fault_op.empty()) {
    spdlog::warn("gradcheck: backward rule of '{}' scaled by {}", opt.fault_op, opt.fault_factor);
  }

  const auto start = std::chrono::steady_clock::now();
  const auto checks = run_gradcheck_suite(model, suite);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  bool ok = true;
  json report = {{"tolerance", kGradCheckTolerance}, {"eps", suite.check.eps}, {"modules", json::array()}};
  out << fmt::format("{:<28} {:>12} {:>8} {:>9} {:>8}  {:<6} {}\n", "module", "max_rel_err", "checked", "nonsmooth",
                     "seconds", "status", "worst leaf");
  for (const auto& c : checks) {
    const LeafError* worst = nullptr;
    for (const auto& leaf : c.result.leaves) {
      if (worst == nullptr || leaf.max_rel_error > worst->max_rel_error) worst = &leaf;
    }
    ok = ok && c.passed();
    out << fmt::format("{:<28} {:>12.3e} {:>8} {:>9} {:>8.2f}  {:<6} {}\n", c.module, c.result.max_rel_error,
                       c.result.checked, c.result.nonsmooth, c.seconds, c.passed() ? "PASS" : "FAIL",
                       worst ? worst->name : "-");
    report["modules"].push_back({{"module", c.module},
                                 {"max_rel_error", c.result.max_rel_error},
                                 {"checked", c.result.checked},
                                 {"nonsmooth", c.result.nonsmooth},
                                 {"seconds", c.seconds},
                                 {"passed", c.passed()},
                                 {"worst_leaf", worst ? worst->name : ""}});
  }
  report["seconds"] = seconds;
  report["passed"] = ok;
  out << fmt::format("gradcheck {} in {:.1f} s\n", ok ? "passed" : "FAILED", seconds);
  if (!opt.out.empty()) {
    if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
    write_json(opt.out, report);
  }
  return ok ? kExitOk : kExitNumerical;
}

int cmd_synth(const SynthOptions& opt, std::ostream& out) {
  if (opt.out.empty()) throw UsageError("synth: --out is required");
  SynthConfig cfg;
  if (!opt.config.empty()) {
    std::ifstream in(opt.config);
    if (!in) throw IoError(fmt::format("cannot open synth config '{}'", opt.config.string()));
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError(fmt::format("{}: not valid JSON", opt.config.string()));
    cfg = synth_config_from_json(j.contains("synth") ? j.at("synth") : j);
  }
  if (opt.seed) cfg.seed = *opt.seed;
  cfg.validate();

  std::error_code ec;
  fs::create_directories(opt.out / "images", ec);
  if (ec) throw IoError(fmt::format("cannot create '{}': {}", (opt.out / "images").string(), ec.message()));
  std::vector<AnnotationRecord> records;
  std::size_t points = 0;
  for (const auto& s : synth_dataset(cfg, opt.n)) {
    const std::string rel = fmt::format("images/{}.ppm", s.id);
    write_ppm(s.image, opt.out / rel);
    records.push_back({s.id, rel, s.points});
    points += s.points.size();
  }
  write_annotation_index(records, opt.out / "index.txt");
  out << fmt::format("wrote {} scenes ({} heads) to {}\n", records.size(), points, (opt.out / "index.txt").string());
  return kExitOk;
}

int cmd_import(const ImportCommandOptions& opt, std::ostream& out) {
  if (opt.out.empty()) throw UsageError("import: --out is required");
  ImportOptions io{parse_benchmark_format(opt.format), opt.root, opt.out};
  const ImportReport r = import_benchmark(io);
  out << fmt::format("imported {} images, {} points ({} dropped out of bounds, {} without annotations) into {}\n",
                     r.images, r.points, r.dropped_points, r.missing_annotations.size(), opt.out.string());
  return kExitOk;
}

}  // namespace mlattn::cli
