#include "jstts/tensor.hpp"

#include <cmath>
#include <sstream>

#include "jstts/error.hpp"

namespace jstts {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

uint64_t checksum(const Tensor& t, uint64_t seed) {
  uint64_t h = seed;
  auto feed = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (int64_t d : t.shape()) feed(&d, sizeof d);
  feed(t.data(), t.values().size() * sizeof(double));
  return h;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (int64_t d : shape_) {
    if (d < 0) throw ShapeError("tensor: negative dimension in " + shape_str(shape_));
  }
  values_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<int64_t>(values_.size())) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not hold " + std::to_string(values_.size()) +
                     " values");
  }
}

Tensor Tensor::row(std::vector<double> v) {
  auto n = static_cast<int64_t>(v.size());
  return Tensor({1, n}, std::move(v));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  return Tensor(std::move(shape), values_);
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

void Tensor::add_(const Tensor& other, double scale) {
  if (other.numel() != numel()) {
    throw ShapeError("add_: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  }
  for (size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
}

void Tensor::scale_(double s) {
  for (double& v : values_) v *= s;
}

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return s;
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace jstts
