#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mlattn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of 64-bit scalars. Rank-4 tensors are laid out as
// (batch, channel, height, width).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }
  // Rank-2 convenience for hand-written fixtures.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 4-D element access (n, c, h, w).
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  double* ptr(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return &at(n, c, h, w); }
  const double* ptr(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_.data() + ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  // Same buffer, new shape; element counts must agree.
  Tensor reshaped(Shape shape) const;

  double sum() const;
  double max_abs() const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Strict elementwise comparison helpers used across tests and checks.
bool same_shape(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Checked mode turns on NaN/Inf guards at op boundaries.
void set_checked_mode(bool enabled);
bool checked_mode();
// Throws NumericalError naming `where` when checked mode is on and `t` has
// a non-finite entry.
void check_finite(const Tensor& t, const char* where);

}  // namespace mlattn
