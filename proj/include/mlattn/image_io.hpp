#pragma once

#include <filesystem>

#include "mlattn/density.hpp"
#include "mlattn/tensor.hpp"

namespace mlattn {

// Reads 8-bit PNM (P2/P3/P5/P6), PNG or JPEG, detected by content, into a
// [3,H,W] tensor scaled to [0,1]. Grayscale is replicated across channels.
Tensor read_image(const std::filesystem::path& path);

// Writes a [3,H,W] tensor in [0,1] as binary 8-bit PPM (P6).
void write_ppm(const Tensor& image, const std::filesystem::path& path);

// 16-bit binary PGM export of a density map. Samples are
// round(65535 * v / max); the header comment line
//   # mlattn-density max=<max> count=<raw count> scale=<divisor>
// records the normalization factor and the raw (pre-quantization) count.
void write_density_pgm(const DensityMap& map, const std::filesystem::path& path);

struct DensityImage {
  DensityMap map;  // dequantized values
  double max = 0.0;
  double raw_count = 0.0;
};
DensityImage read_density_pgm(const std::filesystem::path& path);

}  // namespace mlattn
