#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lpt/errors.hpp"

namespace lpt {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint32_t;

// 1 = position may be attended to, 0 = padding.
using ValidMask = std::vector<std::uint8_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <std::floating_point T>
class Tape;

// Dense row-major tensor. Storage is shared between copies; tensors produced
// by tape operations are never written to afterwards. Parameters are the one
// exception: the optimizer updates their storage in place between steps.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size()) {
      throw DimensionError("tensor of shape " + shape_string(shape_) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const noexcept {
    return shape_.size() < 2 ? 1 : numel() / (shape_[0] == 0 ? 1 : shape_[0]);
  }

  std::span<const T> values() const noexcept { return *data_; }
  // Write access for parameter updates and test fixtures.
  std::span<T> mutable_values() noexcept { return *data_; }

  T operator[](std::size_t i) const { return (*data_)[i]; }
  T at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

  std::optional<NodeId> node() const noexcept { return node_; }
  bool recorded() const noexcept { return node_.has_value(); }

  // Deep copy with fresh storage and no tape node.
  Tensor clone() const { return Tensor(shape_, *data_); }

  bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

 private:
  friend class Tape<T>;
  template <std::floating_point U>
  friend Tensor<U> detach(const Tensor<U>& x);

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::optional<NodeId> node_;
};

// Same values, no node: gradient flow stops here.
template <std::floating_point T>
Tensor<T> detach(const Tensor<T>& x) {
  Tensor<T> out = x;
  out.node_.reset();
  return out;
}

template <std::floating_point T>
Tensor<T> matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
  return Tensor<T>(Shape{rows, cols}, std::move(values));
}

}  // namespace lpt
