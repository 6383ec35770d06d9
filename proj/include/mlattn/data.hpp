#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mlattn/density.hpp"
#include "mlattn/tensor.hpp"

namespace mlattn {

struct AnnotatedImage {
  Tensor image;  // [3,H,W] in [0,1]
  PointSet points;
  std::string id;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

// One line of an annotation index. `image_path` is stored as written in the
// index (relative paths resolve against the index file's directory).
struct AnnotationRecord {
  std::string id;
  std::string image_path;
  PointSet points;
};

inline constexpr const char* kAnnotationHeader = "MLA-ANN 1";

// Index format, one record per line after the header:
//   MLA-ANN 1
//   <id> <image-path> <n> <x1> <y1> ... <xn> <yn>
// Blank lines and lines starting with '#' are ignored.
std::vector<AnnotationRecord> read_annotation_index(const std::filesystem::path& index);
void write_annotation_index(const std::vector<AnnotationRecord>& records, const std::filesystem::path& index);

// Parses the index and loads every image. Problems are collected across all
// records and reported together as a FormatError.
std::vector<AnnotatedImage> load_annotations(const std::filesystem::path& index);

struct SynthConfig {
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t count_lo = 10;
  std::size_t count_hi = 30;
  double radius_lo = 2.0;
  double radius_hi = 3.5;
  double background_amplitude = 0.15;
  double margin = 0.0;  // minimum distance of head centers from the border
  std::uint64_t seed = 0;

  void validate() const;
};

// Deterministic per-index seed derivation (SplitMix64).
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index);

// Renders `n` shaded discs over low-frequency noise; the returned points are
// the exact disc centers.
AnnotatedImage synth_scene(const SynthConfig& cfg, std::mt19937_64& rng, std::string id = "scene");
// Scene i is drawn from its own generator seeded by split_seed(cfg.seed, i).
std::vector<AnnotatedImage> synth_dataset(const SynthConfig& cfg, std::size_t n);

// Random square crop of side `crop_size` (0 keeps the full image) followed by
// a horizontal flip with probability `flip_prob`. Points outside the crop are
// dropped.
AnnotatedImage augment(const AnnotatedImage& sample, std::mt19937_64& rng, std::size_t crop_size, double flip_prob);
AnnotatedImage crop_sample(const AnnotatedImage& sample, std::size_t top, std::size_t left, std::size_t height,
                           std::size_t width);
AnnotatedImage flip_horizontal(const AnnotatedImage& sample);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Shuffled partition into k test folds whose sizes differ by at most one.
std::vector<Fold> kfold_splits(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed);

}  // namespace mlattn
