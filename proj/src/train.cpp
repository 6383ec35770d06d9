#include "mlattn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mlattn/error.hpp"
#include "mlattn/ops.hpp"

namespace mlattn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kLossLog = "loss_log.jsonl";

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data()) acc += v * v;
  return std::sqrt(acc);
}

Tensor stack(const std::vector<const Tensor*>& items) {
  for (const Tensor* t : items) {
    if (t->shape() != items.front()->shape()) {
      throw UsageError(fmt::format("train: cannot batch {} with {}; use batch_size 1 or a fixed augment.crop",
                                   shape_str(t->shape()), shape_str(items.front()->shape())));
    }
  }
  Shape shape = items.front()->shape();
  shape.insert(shape.begin(), items.size());
  Tensor out(shape);
  std::size_t offset = 0;
  for (const Tensor* t : items) {
    std::copy(t->data().begin(), t->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += t->size();
  }
  return out;
}

std::string parameter_norms(const ParamStore& store) {
  std::string out;
  for (const auto& [name, p] : store.params()) {
    out += fmt::format("\n  {}: |w| = {:.6g}", name, l2_norm(p.var.value()));
  }
  return out;
}

}  // namespace

std::size_t AugmentConfig::crop_for(std::size_t height, std::size_t width, std::size_t stride) const {
  if (crop) return *crop;
  const std::size_t half = std::min(height, width) / 2;
  return std::max(stride, half - half % stride);
}

RunConfig RunConfig::tiny_overfit() {
  RunConfig cfg;
  cfg.model = ModelConfig::tiny();
  cfg.optimizer.batch_size = 8;
  cfg.optimizer.steps = 200;
  cfg.sigma = 4.0;
  cfg.dataset.synth_preset = "tiny-overfit";
  cfg.dataset.synth.width = 64;
  cfg.dataset.synth.height = 64;
  cfg.dataset.synth.count_lo = 10;
  cfg.dataset.synth.count_hi = 20;
  cfg.dataset.synth.margin = 12.0;
  cfg.dataset.n_train = 8;
  cfg.dataset.n_val = 0;
  cfg.augment.crop = 0;
  cfg.augment.flip_prob = 0.0;
  cfg.out_dir = "runs/tiny-overfit";
  return cfg;
}

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> out;
  auto check = [&](bool ok, std::string msg) {
    if (!ok) out.push_back(std::move(msg));
  };
  try {
    model.validate();
  } catch (const std::exception& e) {
    out.push_back(fmt::format("model: {}", e.what()));
  }
  const AdamOptions& a = optimizer.adam;
  check(a.lr > 0.0 && a.lr < 1.0, fmt::format("optimizer.lr = {} must lie in (0, 1)", a.lr));
  check(a.beta1 >= 0.0 && a.beta1 < 1.0, fmt::format("optimizer.beta1 = {} must lie in [0, 1)", a.beta1));
  check(a.beta2 >= 0.0 && a.beta2 < 1.0, fmt::format("optimizer.beta2 = {} must lie in [0, 1)", a.beta2));
  check(a.eps > 0.0, fmt::format("optimizer.eps = {} must be positive", a.eps));
  check(optimizer.batch_size >= 1, "optimizer.batch_size must be at least 1");
  check(sigma > 0.0 && sigma <= 100.0, fmt::format("sigma = {} must lie in (0, 100]", sigma));
  check(augment.flip_prob >= 0.0 && augment.flip_prob <= 1.0,
        fmt::format("augment.flip_prob = {} must lie in [0, 1]", augment.flip_prob));
  const std::size_t stride = model.downsample();
  if (augment.crop) {
    check(*augment.crop % stride == 0,
          fmt::format("augment.crop = {} must be divisible by the model stride {}", *augment.crop, stride));
  }
  check(!out_dir.empty(), "out_dir must be set");

  const bool synth = !dataset.synth_preset.empty();
  check(synth != !dataset.annotations.empty(), "dataset needs exactly one of synth_preset or annotations");
  if (synth) {
    check(dataset.synth_preset == "tiny-overfit" || dataset.synth_preset == "synth",
          fmt::format("unknown dataset.synth_preset '{}' (tiny-overfit, synth)", dataset.synth_preset));
    try {
      dataset.synth.validate();
    } catch (const std::exception& e) {
      out.push_back(fmt::format("dataset.synth: {}", e.what()));
    }
    check(dataset.n_train >= 1, "dataset.n_train must be at least 1");
    const std::size_t crop = augment.crop_for(dataset.synth.height, dataset.synth.width, stride);
    check(crop <= std::min(dataset.synth.width, dataset.synth.height),
          fmt::format("augment.crop = {} exceeds the {}x{} synthetic images", crop, dataset.synth.width,
                      dataset.synth.height));
    check(optimizer.batch_size <= dataset.n_train,
          fmt::format("optimizer.batch_size = {} exceeds dataset.n_train = {}", optimizer.batch_size, dataset.n_train));
  } else if (!dataset.annotations.empty()) {
    check(fs::exists(dataset.annotations), fmt::format("dataset.annotations '{}' does not exist",
                                                       dataset.annotations.string()));
    check(dataset.val_fraction >= 0.0 && dataset.val_fraction < 1.0,
          fmt::format("dataset.val_fraction = {} must lie in [0, 1)", dataset.val_fraction));
  }
  return out;
}

void RunConfig::validate() const {
  const auto found = problems();
  if (found.empty()) return;
  std::string report = fmt::format("invalid run config ({} problem{}):", found.size(), found.size() == 1 ? "" : "s");
  for (const auto& p : found) report += "\n  - " + p;
  throw ConfigError(report);
}

json to_json(const SynthConfig& cfg) {
  return {{"width", cfg.width},         {"height", cfg.height},
          {"count", {cfg.count_lo, cfg.count_hi}}, {"radius", {cfg.radius_lo, cfg.radius_hi}},
          {"background_amplitude", cfg.background_amplitude}, {"margin", cfg.margin},
          {"seed", cfg.seed}};
}

SynthConfig synth_config_from_json(const json& j, SynthConfig cfg) {
  if (!j.is_object()) throw ConfigError("synth section must be an object");
  try {
    read_opt(j, "width", cfg.width);
    read_opt(j, "height", cfg.height);
    if (j.contains("count")) {
      const auto c = j.at("count").get<std::vector<std::size_t>>();
      if (c.size() != 2) throw ConfigError("synth.count must be [lo, hi]");
      cfg.count_lo = c[0];
      cfg.count_hi = c[1];
    }
    if (j.contains("radius")) {
      const auto r = j.at("radius").get<std::vector<double>>();
      if (r.size() != 2) throw ConfigError("synth.radius must be [lo, hi]");
      cfg.radius_lo = r[0];
      cfg.radius_hi = r[1];
    }
    read_opt(j, "background_amplitude", cfg.background_amplitude);
    read_opt(j, "margin", cfg.margin);
    read_opt(j, "seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("synth section: {}", e.what()));
  }
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const auto& o = cfg.optimizer;
  json dataset;
  if (!cfg.dataset.synth_preset.empty()) {
    dataset = {{"synth_preset", cfg.dataset.synth_preset},
               {"synth", to_json(cfg.dataset.synth)},
               {"n_train", cfg.dataset.n_train},
               {"n_val", cfg.dataset.n_val}};
  } else {
    dataset = {{"annotations", cfg.dataset.annotations.string()}, {"val_fraction", cfg.dataset.val_fraction}};
  }
  return {{"model", to_json(cfg.model)},
          {"optimizer",
           {{"lr", o.adam.lr},
            {"beta1", o.adam.beta1},
            {"beta2", o.adam.beta2},
            {"eps", o.adam.eps},
            {"batch_size", o.batch_size},
            {"steps", o.steps},
            {"checkpoint_every", o.checkpoint_every},
            {"freeze", o.freeze}}},
          {"sigma", cfg.sigma},
          {"dataset", dataset},
          {"augment",
           {{"crop", cfg.augment.crop ? json(*cfg.augment.crop) : json(nullptr)},
            {"flip_prob", cfg.augment.flip_prob}}},
          {"seed", cfg.seed},
          {"out_dir", cfg.out_dir.string()}};
}

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig cfg;
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset != "tiny-overfit") throw ConfigError(fmt::format("unknown run preset '{}' (tiny-overfit)", preset));
    cfg = RunConfig::tiny_overfit();
  }
  try {
    if (j.contains("model")) {
      json m = to_json(cfg.model);
      m.merge_patch(j.at("model"));
      if (j.at("model").contains("preset")) m = j.at("model");
      cfg.model = model_config_from_json(m);
    }
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      read_opt(o, "lr", cfg.optimizer.adam.lr);
      read_opt(o, "beta1", cfg.optimizer.adam.beta1);
      read_opt(o, "beta2", cfg.optimizer.adam.beta2);
      read_opt(o, "eps", cfg.optimizer.adam.eps);
      read_opt(o, "batch_size", cfg.optimizer.batch_size);
      read_opt(o, "steps", cfg.optimizer.steps);
      read_opt(o, "checkpoint_every", cfg.optimizer.checkpoint_every);
      read_opt(o, "freeze", cfg.optimizer.freeze);
    }
    read_opt(j, "sigma", cfg.sigma);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      if (d.contains("annotations")) {
        cfg.dataset.synth_preset.clear();
        cfg.dataset.annotations = resolve(d.at("annotations").get<std::string>(), base_dir);
      }
      read_opt(d, "synth_preset", cfg.dataset.synth_preset);
      if (d.contains("synth")) cfg.dataset.synth = synth_config_from_json(d.at("synth"), cfg.dataset.synth);
      read_opt(d, "n_train", cfg.dataset.n_train);
      read_opt(d, "n_val", cfg.dataset.n_val);
      read_opt(d, "val_fraction", cfg.dataset.val_fraction);
    }
    if (j.contains("augment")) {
      const json& a = j.at("augment");
      if (a.contains("crop")) {
        cfg.augment.crop = a.at("crop").is_null() ? std::nullopt
                                                  : std::optional<std::size_t>(a.at("crop").get<std::size_t>());
      }
      read_opt(j.at("augment"), "flip_prob", cfg.augment.flip_prob);
    }
    read_opt(j, "seed", cfg.seed);
    if (j.contains("out_dir")) cfg.out_dir = resolve(j.at("out_dir").get<std::string>(), base_dir);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("run config: {}", e.what()));
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open run config '{}'", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return run_config_from_json(j, path.parent_path());
}

Dataset build_dataset(const RunConfig& cfg) {
  Dataset out;
  if (!cfg.dataset.synth_preset.empty()) {
    SynthConfig sc = cfg.dataset.synth;
    sc.seed = split_seed(cfg.seed, sc.seed);
    auto all = synth_dataset(sc, cfg.dataset.n_train + cfg.dataset.n_val);
    out.train.assign(std::make_move_iterator(all.begin()),
                     std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.dataset.n_train)));
    out.val.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.dataset.n_train)),
                   std::make_move_iterator(all.end()));
    return out;
  }
  auto all = load_annotations(cfg.dataset.annotations);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.dataset.val_fraction * static_cast<double>(all.size())));
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(split_seed(cfg.seed, 0x76616c));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> held(all.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) held[order[i]] = true;
  for (std::size_t i = 0; i < all.size(); ++i) (held[i] ? out.val : out.train).push_back(std::move(all[i]));
  return out;
}

Tensor target_density(const AnnotatedImage& sample, double sigma, std::size_t downsample) {
  DensityMap full = make_density_map(sample.points, sample.height(), sample.width(), sigma);
  return downsample_count_preserving(full, downsample).values;
}

std::string checkpoint_metadata(const ModelConfig& model, std::size_t step, std::uint64_t seed) {
  return json{{"model", to_json(model)}, {"step", step}, {"seed", seed}}.dump();
}

std::optional<ModelConfig> checkpoint_model_config(const fs::path& path) {
  const std::string meta = read_weights_metadata(path);
  const json j = json::parse(meta, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("model")) return std::nullopt;
  return model_config_from_json(j.at("model"));
}

TrainResult train(const RunConfig& cfg, const std::vector<AnnotatedImage>& data, ParamStore& store,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw UsageError("train: empty training set");
  const auto& opt = cfg.optimizer;
  const std::size_t batch = std::min(opt.batch_size, data.size());
  const std::size_t down = cfg.model.downsample();
  const bool cropping = !(cfg.augment.crop && *cfg.augment.crop == 0);
  const bool augmenting = cropping || cfg.augment.flip_prob > 0.0;
  for (const auto& s : data) {
    if (!cropping && (s.height() % down != 0 || s.width() % down != 0)) {
      throw UsageError(fmt::format("train: '{}' is {}x{}, not divisible by the model stride {}; set augment.crop",
                                   s.id, s.height(), s.width(), down));
    }
    if (batch > 1 && !cropping && s.image.shape() != data.front().image.shape()) {
      throw UsageError(fmt::format(
          "train: batch_size {} needs equally sized images ('{}' is {}x{}, '{}' is {}x{}); set augment.crop", batch,
          data.front().id, data.front().height(), data.front().width(), s.id, s.height(), s.width()));
    }
  }
  const std::size_t freed = store.freeze(opt.freeze);
  if (!opt.freeze.empty()) spdlog::info("train: froze {} parameter tensors", freed);

  fs::create_directories(cfg.out_dir);
  std::ofstream log(cfg.out_dir / kLossLog);
  if (!log) throw IoError(fmt::format("cannot write '{}'", (cfg.out_dir / kLossLog).string()));

  std::vector<Tensor> fixed_targets;
  if (!augmenting) {
    for (const auto& s : data) fixed_targets.push_back(target_density(s, cfg.sigma, down));
  }

  std::mt19937_64 order_rng(split_seed(cfg.seed, 1));
  std::mt19937_64 aug_rng(split_seed(cfg.seed, 2));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    std::vector<std::size_t> picked;
    while (picked.size() < batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      picked.push_back(order[cursor++]);
    }
    std::vector<AnnotatedImage> augmented;
    std::vector<Tensor> aug_targets;
    std::vector<const Tensor*> images, targets;
    for (std::size_t idx : picked) {
      if (augmenting) {
        const AnnotatedImage& src = data[idx];
        const std::size_t crop = cfg.augment.crop_for(src.height(), src.width(), down);
        augmented.push_back(augment(src, aug_rng, crop, cfg.augment.flip_prob));
        aug_targets.push_back(target_density(augmented.back(), cfg.sigma, down));
      } else {
        images.push_back(&data[idx].image);
        targets.push_back(&fixed_targets[idx]);
      }
    }
    for (std::size_t i = 0; i < augmented.size(); ++i) {
      images.push_back(&augmented[i].image);
      targets.push_back(&aug_targets[i]);
    }

    store.zero_grad();
    ad::Var loss;
    try {
      ad::Var pred = model_forward(ad::constant(stack(images)), cfg.model, store, ops::Mode::train);
      loss = euclidean_loss(pred, stack(targets), batch);
    } catch (const NumericalError& e) {
      throw NumericalError(fmt::format("{} at step {}; parameter norms:{}", e.what(), step, parameter_norms(store)));
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw NumericalError(
          fmt::format("non-finite loss {} at step {}; parameter norms:{}", value, step, parameter_norms(store)));
    }
    ad::backward(loss);
    double g2 = 0.0;
    for (const auto& [_, p] : store.params()) {
      if (p.frozen) continue;
      const Tensor g = p.var.grad();
      for (double v : g.data()) g2 += v * v;
    }
    adam_step(store, opt.adam);

    StepRecord rec{step, value, std::sqrt(g2),
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    log << json{{"step", rec.step}, {"loss", rec.loss}, {"grad_norm", rec.grad_norm}, {"seconds", rec.seconds}}.dump()
        << '\n';
    log.flush();
    result.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (opt.checkpoint_every != 0 && step % opt.checkpoint_every == 0 && step != opt.steps) {
      save_weights(store, cfg.out_dir / fmt::format("checkpoint_{:06d}.mlaw", step),
                   checkpoint_metadata(cfg.model, step, cfg.seed));
    }
  }
  result.final_checkpoint = cfg.out_dir / "final.mlaw";
  save_weights(store, result.final_checkpoint, checkpoint_metadata(cfg.model, opt.steps, cfg.seed));
  if (!result.log.empty()) {
    result.initial_loss = result.log.front().loss;
    result.final_loss = result.log.back().loss;
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

EvalResult evaluate(const std::vector<AnnotatedImage>& data, const ModelConfig& model, ParamStore& store) {
  EvalResult out;
  std::vector<double> truth, predicted;
  for (const auto& s : data) {
    const Tensor density = predict_density(s.image.reshaped({1, 3, s.height(), s.width()}), model, store);
    out.images.push_back({s.id, static_cast<double>(s.points.size()), density.sum()});
    truth.push_back(out.images.back().truth);
    predicted.push_back(out.images.back().predicted);
  }
  if (!data.empty()) out.errors = mae_mse(truth, predicted);
  return out;
}

std::vector<StepRecord> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open loss log '{}'", path.string()));
  std::vector<StepRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("step") || !j.contains("loss")) {
      throw FormatError(fmt::format("{}:{}: not a loss record", path.string(), lineno));
    }
    out.push_back({j.at("step").get<std::size_t>(), j.at("loss").get<double>(), j.value("grad_norm", 0.0),
                   j.value("seconds", 0.0)});
  }
  return out;
}

}  // namespace mlattn
