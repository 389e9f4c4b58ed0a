#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mechshift {

using Shape = std::vector<int>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major float32 tensor. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor scalar(float value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rows/cols view a tensor as a matrix: rows = product of leading dims,
  // cols = last dim.
  int rows() const;
  int cols() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  std::span<float> row(int r);
  std::span<const float> row(int r) const;

  float item() const;
  Tensor reshaped(Shape shape) const;

  void fill(float value);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Largest absolute element-wise difference; shapes must agree.
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mechshift
