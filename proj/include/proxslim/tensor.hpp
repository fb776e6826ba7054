#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace proxslim {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major float64 array. Every extent is positive and the value
/// count always equals the product of the extents.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Scalar read for one-element tensors.
  double item() const;

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  /// this += other, elementwise; shapes must match.
  void accumulate(const Tensor& other);

 private:
  Shape shape_;
  std::vector<double> values_;
};

/// Throws ShapeError with a message naming `op` if the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);
/// Throws NumericError naming `op` if any value is NaN or infinite.
void require_finite(const Tensor& t, const char* op);

}  // namespace proxslim
