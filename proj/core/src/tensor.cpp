#include "prunelab/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "prunelab/errors.hpp"

namespace prunelab {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape s, bool rg) : shape(std::move(s)), requires_grad(rg) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  data.assign(shape_numel(shape), 0.0);
}

Tensor::Tensor(Shape s, std::vector<double> values, bool rg)
    : shape(std::move(s)), data(std::move(values)), requires_grad(rg) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
}

std::size_t Tensor::rows() const { return shape.empty() ? 0 : data.size() / shape.back(); }

std::size_t Tensor::cols() const { return shape.empty() ? 0 : shape.back(); }

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

}  // namespace prunelab
