#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mlattn/data.hpp"
#include "mlattn/mat.hpp"

namespace mlattn {

enum class BenchmarkFormat {
  ucf_cc_50,     // <n>.jpg + <n>_ann.mat holding annPoints
  shanghaitech,  // images/IMG_<n>.jpg + ground-truth/GT_IMG_<n>.mat holding image_info{1}.location
  ucf_qnrf,      // img_<n>.jpg + img_<n>_ann.mat holding annPoints
};

BenchmarkFormat parse_benchmark_format(const std::string& name);
const char* benchmark_format_name(BenchmarkFormat f);

// Head points stored in a benchmark MAT-file, converted from MATLAB's
// 1-based pixel-center coordinates to this library's convention (x - 0.5).
PointSet read_mat_points(const std::filesystem::path& path);
// Locates the N x 2 point array: annPoints, image_info{1}.location, or the
// first numeric N x 2 array found depth-first.
const mat::Array* find_point_array(const std::vector<mat::Array>& vars);

struct ImportOptions {
  BenchmarkFormat format = BenchmarkFormat::ucf_cc_50;
  std::filesystem::path root;  // dataset directory (for ShanghaiTech: the part/split directory)
  std::filesystem::path index;  // annotation index to write
};

struct ImportReport {
  std::size_t images = 0;
  std::size_t points = 0;
  std::size_t dropped_points = 0;  // outside [0,W) x [0,H) after conversion
  std::vector<std::string> missing_annotations;
};

// Pairs images with annotation files, converts them and writes an
// "MLA-ANN 1" index whose image paths are relative to the index directory.
ImportReport import_benchmark(const ImportOptions& opt);

}  // namespace mlattn
