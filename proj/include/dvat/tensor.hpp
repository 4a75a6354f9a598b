#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dvat/error.hpp"

namespace dvat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. Image batches use (batch, channels, height, width).
template <typename T>
struct Tensor {
  using value_type = T;

  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      throw ConfigError("tensor of shape " + shape_str(shape) + " needs " +
                        std::to_string(numel(shape)) + " values, got " +
                        std::to_string(data.size()));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  std::span<T> span() noexcept { return data; }
  std::span<const T> span() const noexcept { return data; }

  // 4-d element access for image batches.
  T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return data[((b * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  const T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((b * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  // Copy of samples [first, first + count) along the leading axis.
  Tensor slice_batch(std::size_t first, std::size_t count) const {
    if (shape.empty() || first + count > shape[0])
      throw InputError("slice_batch: rows [" + std::to_string(first) + ", " + std::to_string(first + count) +
                       ") out of range for " + shape_str(shape));
    Shape s = shape;
    const std::size_t per = s[0] == 0 ? 0 : data.size() / s[0];
    s[0] = count;
    Tensor out(s);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(first * per), count * per,
                out.data.begin());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

// Stacks samples given by index into a new batch.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& src, std::span<const std::size_t> indices) {
  Shape s = src.shape;
  const std::size_t per = src.data.size() / s[0];
  s[0] = indices.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

}  // namespace dvat
