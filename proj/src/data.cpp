#include "mlattn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mlattn/error.hpp"
#include "mlattn/image_io.hpp"
#include "mlattn/ops.hpp"

namespace mlattn {

std::vector<AnnotationRecord> read_annotation_index(const std::filesystem::path& index) {
  std::ifstream in(index);
  if (!in) throw IoError("cannot open annotation index " + index.string());
  std::string line;
  if (!std::getline(in, line) || line.substr(0, line.find_last_not_of(" \t\r") + 1) != kAnnotationHeader) {
    throw FormatError(fmt::format("{}: missing '{}' header line", index.string(), kAnnotationHeader));
  }
  std::vector<AnnotationRecord> records;
  std::vector<std::string> problems;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const std::size_t rec_idx = records.size();
    std::istringstream fields(line);
    AnnotationRecord rec;
    std::size_t n = 0;
    if (!(fields >> rec.id >> rec.image_path >> n)) {
      problems.push_back(fmt::format("record {} (line {}): expected '<id> <image-path> <n> coords...'", rec_idx, line_no));
      records.push_back(std::move(rec));
      continue;
    }
    rec.points.resize(n);
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) ok = static_cast<bool>(fields >> rec.points[i].x >> rec.points[i].y);
    std::string extra;
    if (!ok) {
      problems.push_back(fmt::format("record {} ('{}'): declares {} points but coordinates are missing or malformed",
                                     rec_idx, rec.id, n));
    } else if (fields >> extra) {
      problems.push_back(fmt::format("record {} ('{}'): unexpected trailing field '{}'", rec_idx, rec.id, extra));
    }
    records.push_back(std::move(rec));
  }
  if (!problems.empty()) {
    throw FormatError(fmt::format("{}: {} malformed record(s)\n  {}", index.string(), problems.size(),
                                  fmt::join(problems, "\n  ")));
  }
  return records;
}

void write_annotation_index(const std::vector<AnnotationRecord>& records, const std::filesystem::path& index) {
  std::ofstream out(index, std::ios::trunc);
  if (!out) throw IoError("cannot write annotation index " + index.string());
  out << kAnnotationHeader << '\n';
  for (const auto& rec : records) {
    if (rec.id.find_first_of(" \t\n") != std::string::npos ||
        rec.image_path.find_first_of(" \t\n") != std::string::npos) {
      throw UsageError(fmt::format("annotation id/path must not contain whitespace: '{}' '{}'", rec.id,
                                   rec.image_path));
    }
    out << rec.id << ' ' << rec.image_path << ' ' << rec.points.size();
    for (const Point& p : rec.points) out << fmt::format(" {:.17g} {:.17g}", p.x, p.y);
    out << '\n';
  }
  if (!out) throw IoError("failed writing annotation index " + index.string());
}

std::vector<AnnotatedImage> load_annotations(const std::filesystem::path& index) {
  const auto records = read_annotation_index(index);
  const auto base = index.parent_path();
  std::vector<AnnotatedImage> out;
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    std::filesystem::path img = rec.image_path;
    if (img.is_relative()) img = base / img;
    if (!std::filesystem::exists(img)) {
      problems.push_back(fmt::format("record {} ('{}'): missing image file {}", i, rec.id, img.string()));
      continue;
    }
    AnnotatedImage sample;
    try {
      sample.image = read_image(img);
    } catch (const std::exception& e) {
      problems.push_back(fmt::format("record {} ('{}'): {}", i, rec.id, e.what()));
      continue;
    }
    bool ok = true;
    for (std::size_t p = 0; p < rec.points.size(); ++p) {
      if (!in_bounds(rec.points[p], sample.width(), sample.height())) {
        problems.push_back(fmt::format("record {} ('{}'): point {} at ({}, {}) outside the {}x{} image", i, rec.id, p,
                                       rec.points[p].x, rec.points[p].y, sample.width(), sample.height()));
        ok = false;
      }
    }
    if (!ok) continue;
    sample.points = rec.points;
    sample.id = rec.id;
    out.push_back(std::move(sample));
  }
  if (!problems.empty()) {
    throw FormatError(fmt::format("{}: {} problem(s)\n  {}", index.string(), problems.size(),
                                  fmt::join(problems, "\n  ")));
  }
  return out;
}

void SynthConfig::validate() const {
  if (width == 0 || height == 0 || width % 4 != 0 || height % 4 != 0) {
    throw ConfigError(fmt::format("synth image size {}x{} must be positive and divisible by 4", width, height));
  }
  if (count_lo > count_hi) throw ConfigError(fmt::format("synth count range [{}, {}] is empty", count_lo, count_hi));
  if (!(radius_lo > 0.0) || radius_lo > radius_hi) {
    throw ConfigError(fmt::format("synth radius range [{}, {}] is invalid", radius_lo, radius_hi));
  }
  if (margin < 0.0 || 2.0 * margin >= static_cast<double>(std::min(width, height))) {
    throw ConfigError(fmt::format("synth margin {} leaves no room in a {}x{} image", margin, width, height));
  }
  if (background_amplitude < 0.0) throw ConfigError("synth background amplitude must be >= 0");
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

constexpr std::size_t kNoiseGrid = 5;
constexpr int kPlacementAttempts = 200;
constexpr double kRelaxFactor = 0.8;

Tensor noise_background(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> base(0.25, 0.45);
  Tensor coarse({1, 3, kNoiseGrid, kNoiseGrid});
  for (std::size_t c = 0; c < 3; ++c) {
    const double b = base(rng);
    for (std::size_t i = 0; i < kNoiseGrid * kNoiseGrid; ++i) {
      coarse[c * kNoiseGrid * kNoiseGrid + i] = b + cfg.background_amplitude * unit(rng);
    }
  }
  return ops::bilinear_upsample(coarse, cfg.height, cfg.width).reshaped({3, cfg.height, cfg.width});
}

}  // namespace

AnnotatedImage synth_scene(const SynthConfig& cfg, std::mt19937_64& rng, std::string id) {
  cfg.validate();
  AnnotatedImage scene;
  scene.id = std::move(id);
  scene.image = noise_background(cfg, rng);

  std::uniform_int_distribution<std::size_t> count_dist(cfg.count_lo, cfg.count_hi);
  const std::size_t n = count_dist(rng);
  std::uniform_real_distribution<double> xs(cfg.margin, static_cast<double>(cfg.width) - cfg.margin);
  std::uniform_real_distribution<double> ys(cfg.margin, static_cast<double>(cfg.height) - cfg.margin);
  std::uniform_real_distribution<double> radius_dist(cfg.radius_lo, cfg.radius_hi);

  double separation = 2.0 * cfg.radius_hi;
  std::vector<double> radii;
  while (scene.points.size() < n) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const Point p{xs(rng), ys(rng)};
      if (p.x >= static_cast<double>(cfg.width) || p.y >= static_cast<double>(cfg.height)) continue;
      const bool clear = std::all_of(scene.points.begin(), scene.points.end(), [&](const Point& q) {
        return std::hypot(p.x - q.x, p.y - q.y) >= separation;
      });
      if (clear) {
        scene.points.push_back(p);
        radii.push_back(radius_dist(rng));
        placed = true;
      }
    }
    if (!placed) {
      separation *= kRelaxFactor;
      spdlog::info("synth '{}': could not place head {} of {}; relaxing separation to {:.3f}px", scene.id,
                   scene.points.size() + 1, n, separation);
    }
  }

  // Shaded discs with a one-pixel antialiased rim.
  const double tone[3] = {0.95, 0.80, 0.65};
  const std::size_t H = cfg.height;
  const std::size_t W = cfg.width;
  for (std::size_t k = 0; k < scene.points.size(); ++k) {
    const Point& p = scene.points[k];
    const double r = radii[k];
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(p.y - r - 1.0)));
    const auto y1 = static_cast<std::size_t>(std::min(static_cast<double>(H - 1), std::ceil(p.y + r + 1.0)));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(p.x - r - 1.0)));
    const auto x1 = static_cast<std::size_t>(std::min(static_cast<double>(W - 1), std::ceil(p.x + r + 1.0)));
    for (std::size_t y = y0; y <= y1; ++y) {
      for (std::size_t x = x0; x <= x1; ++x) {
        const double d = std::hypot(static_cast<double>(x) + 0.5 - p.x, static_cast<double>(y) + 0.5 - p.y);
        const double alpha = std::clamp(r - d + 0.5, 0.0, 1.0);
        if (alpha <= 0.0) continue;
        const double rel = std::min(d / r, 1.0);
        const double shade = 0.55 + 0.45 * std::sqrt(1.0 - rel * rel);
        for (std::size_t c = 0; c < 3; ++c) {
          double& px = scene.image[(c * H + y) * W + x];
          px = px * (1.0 - alpha) + tone[c] * shade * alpha;
        }
      }
    }
  }
  return scene;
}

std::vector<AnnotatedImage> synth_dataset(const SynthConfig& cfg, std::size_t n) {
  std::vector<AnnotatedImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(split_seed(cfg.seed, i));
    out.push_back(synth_scene(cfg, rng, fmt::format("synth_{:05d}", i)));
  }
  return out;
}

AnnotatedImage crop_sample(const AnnotatedImage& sample, std::size_t top, std::size_t left, std::size_t height,
                           std::size_t width) {
  const Tensor batched = sample.image.reshaped({1, 3, sample.height(), sample.width()});
  AnnotatedImage out;
  out.id = sample.id;
  out.image = ops::crop(batched, top, left, height, width).reshaped({3, height, width});
  const auto t = static_cast<double>(top);
  const auto l = static_cast<double>(left);
  for (const Point& p : sample.points) {
    const Point q{p.x - l, p.y - t};
    if (in_bounds(q, width, height)) out.points.push_back(q);
  }
  return out;
}

AnnotatedImage flip_horizontal(const AnnotatedImage& sample) {
  const std::size_t H = sample.height();
  const std::size_t W = sample.width();
  AnnotatedImage out;
  out.id = sample.id;
  out.image = Tensor(sample.image.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) out.image[(c * H + y) * W + x] = sample.image[(c * H + y) * W + (W - 1 - x)];
    }
  }
  // Pixel j maps to W-1-j, i.e. continuous x maps to W-x. The single
  // coordinate x = 0 would land on the excluded edge W; pull it inside.
  const auto w = static_cast<double>(W);
  for (const Point& p : sample.points) {
    double x = w - p.x;
    if (x >= w) x = std::nextafter(w, 0.0);
    out.points.push_back({x, p.y});
  }
  return out;
}

AnnotatedImage augment(const AnnotatedImage& sample, std::mt19937_64& rng, std::size_t crop_size, double flip_prob) {
  const std::size_t H = sample.height();
  const std::size_t W = sample.width();
  AnnotatedImage out = sample;
  if (crop_size != 0 && (crop_size < H || crop_size < W)) {
    if (crop_size > H || crop_size > W) {
      throw UsageError(fmt::format("crop size {} exceeds image {}x{}", crop_size, W, H));
    }
    if (crop_size % 4 != 0) throw UsageError(fmt::format("crop size {} must be divisible by 4", crop_size));
    std::uniform_int_distribution<std::size_t> top(0, H - crop_size);
    std::uniform_int_distribution<std::size_t> left(0, W - crop_size);
    const std::size_t t = top(rng);
    const std::size_t l = left(rng);
    out = crop_sample(sample, t, l, crop_size, crop_size);
  }
  std::bernoulli_distribution flip(std::clamp(flip_prob, 0.0, 1.0));
  if (flip(rng)) out = flip_horizontal(out);
  return out;
}

std::vector<Fold> kfold_splits(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw UsageError(fmt::format("k-fold needs k >= 2, got {}", k));
  if (k > ids.size()) throw UsageError(fmt::format("k-fold with k = {} needs at least {} ids, got {}", k, k, ids.size()));
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with explicit draws so the partition does not depend on the
  // standard library's shuffle.
  for (std::size_t i = order.size(); i-- > 1;) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  std::vector<Fold> folds(k);
  const std::size_t base = ids.size() / k;
  const std::size_t extra = ids.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
      const bool in_test = i >= pos && i < pos + size;
      (in_test ? folds[f].test : folds[f].train).push_back(ids[order[i]]);
    }
    pos += size;
  }
  return folds;
}

}  // namespace mlattn
