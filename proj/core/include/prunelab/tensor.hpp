#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace prunelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// `grad` is either empty (no gradient) or exactly `data.size()` long.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, bool requires_grad = false);
  Tensor(Shape s, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  /// Row count when viewed as a matrix over the last axis.
  std::size_t rows() const;
  /// Length of the last axis.
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad();
};

}  // namespace prunelab
