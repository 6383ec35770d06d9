#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace mlattn::mat {

enum class ArrayClass { numeric, character, cell, structure, unsupported };

// One MATLAB array. Numeric and character data are widened to double and kept
// in column-major order. Cell elements live in `elements`; a struct array
// stores element e, field f at elements[e * fields.size() + f].
struct Array {
  std::string name;
  ArrayClass kind = ArrayClass::unsupported;
  std::vector<std::size_t> dims;
  std::vector<double> real;
  std::vector<std::string> fields;
  std::vector<Array> elements;

  std::size_t numel() const;
  // Field `field` of struct element `index`; nullptr when absent.
  const Array* field(const std::string& field, std::size_t index = 0) const;
};

// Top-level variables of a little-endian Level 5 MAT-file (v6/v7, with or
// without compression). HDF5-based v7.3 files are rejected with FormatError.
std::vector<Array> read_file(const std::filesystem::path& path);
std::vector<Array> read_bytes(const std::vector<unsigned char>& bytes, const std::string& origin = "<memory>");

}  // namespace mlattn::mat
