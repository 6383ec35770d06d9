#include "mlattn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn {

namespace {
std::atomic<bool> g_checked{false};
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ","));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError(fmt::format("tensor shape {} needs {} elements, buffer has {}", shape_str(shape_),
                                 shape_numel(shape_), data_.size()));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError(fmt::format("axis {} out of range for shape {}", axis, shape_str(shape_)));
  }
  return shape_[axis];
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError(fmt::format("cannot reshape {} to {}", shape_str(shape_), shape_str(shape)));
  }
  return Tensor(std::move(shape), data_);
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw ShapeError(fmt::format("compare {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void set_checked_mode(bool enabled) { g_checked.store(enabled, std::memory_order_relaxed); }

bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }

void check_finite(const Tensor& t, const char* where) {
  if (!checked_mode()) return;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericalError(fmt::format("{}: non-finite value {} at flat index {} (shape {})", where, t[i], i,
                                       shape_str(t.shape())));
    }
  }
}

}  // namespace mlattn
