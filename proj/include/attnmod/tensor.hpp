#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "attnmod/error.hpp"

namespace attnmod {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major f32 tensor. Everything downstream of the loader is f32.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), 0.0f) {}
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      fail(ErrorKind::model, "tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  std::span<const float> view() const { return data; }
  std::span<float> view() { return data; }

  // Row r of a 2-D tensor.
  std::span<const float> row(int64_t r) const {
    const auto cols = static_cast<size_t>(shape.back());
    return std::span<const float>(data).subspan(static_cast<size_t>(r) * cols, cols);
  }

  bool operator==(const Tensor&) const = default;
};

using TensorPtr = std::shared_ptr<const Tensor>;

// Named tensors as they come out of (or go into) a checkpoint container.
using TensorStore = std::map<std::string, Tensor>;

}  // namespace attnmod
