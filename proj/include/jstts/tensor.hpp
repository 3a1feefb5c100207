#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace jstts {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

class Tensor;
// FNV-1a over the shape and the raw bytes of the values.
uint64_t checksum(const Tensor& t, uint64_t seed = 1469598103934665603ULL);

// Dense row-major float64 array. Most code treats a tensor as a matrix:
// rows() is the leading dimension and cols() the product of the rest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor row(std::vector<double> v);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(values_.size()); }
  int64_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int64_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }
  bool empty() const { return values_.empty(); }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> row_span(int64_t r) { return {data() + r * cols(), static_cast<size_t>(cols())}; }
  std::span<const double> row_span(int64_t r) const {
    return {data() + r * cols(), static_cast<size_t>(cols())};
  }

  double& operator()(int64_t r, int64_t c) { return values_[r * cols() + c]; }
  double operator()(int64_t r, int64_t c) const { return values_[r * cols() + c]; }
  double& operator[](int64_t i) { return values_[i]; }
  double operator[](int64_t i) const { return values_[i]; }

  double item() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  // this += scale * other
  void add_(const Tensor& other, double scale = 1.0);
  void scale_(double s);
  double squared_norm() const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> values_;
};

}  // namespace jstts
