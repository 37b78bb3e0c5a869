#include "svil/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace svil {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_string(shape_));
  }
  values_.assign(shape_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  for (auto d : shape_) {
    if (d == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_string(shape_));
  }
  if (values_.size() != shape_volume(shape_)) {
    throw std::invalid_argument("Tensor: " + std::to_string(values_.size()) +
                                " values do not fill shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

double Tensor::item() const {
  if (values_.size() != 1) {
    throw std::logic_error("Tensor::item on non-scalar shape " + shape_string(shape_));
  }
  return values_[0];
}

std::size_t Tensor::row_size() const { return shape_.empty() ? 0 : values_.size() / shape_[0]; }

std::span<double> Tensor::row(std::size_t i) {
  const auto n = row_size();
  return std::span<double>(values_).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const auto n = row_size();
  return std::span<const double>(values_).subspan(i * n, n);
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace svil
