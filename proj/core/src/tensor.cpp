#include "mechshift/tensor.hpp"

#include <cmath>
#include <numeric>

#include "mechshift/errors.hpp"

namespace mechshift {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

int Tensor::rows() const {
  if (shape_.empty()) return 1;
  return static_cast<int>(data_.size() / static_cast<std::size_t>(std::max(shape_.back(), 1)));
}

int Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

std::span<float> Tensor::row(int r) {
  const auto c = static_cast<std::size_t>(cols());
  return std::span<float>(data_).subspan(static_cast<std::size_t>(r) * c, c);
}

std::span<const float> Tensor::row(int r) const {
  const auto c = static_cast<std::size_t>(cols());
  return std::span<const float>(data_).subspan(static_cast<std::size_t>(r) * c, c);
}

float Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mechshift
