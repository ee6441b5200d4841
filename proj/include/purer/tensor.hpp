#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace purer {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape);

/// Dense row-major n-d array. The storage is a flat Eigen column vector so that
/// elementwise work maps directly onto Eigen array expressions.
template <typename Scalar>
struct Tensor {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Vector data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(Vector::Zero(numel(shape))) {}
  Tensor(Shape s, Vector d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor constant(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }
  static Tensor scalar(Scalar v) { return constant({}, v); }

  Index size() const { return data.size(); }
  Index dim(std::size_t i) const { return shape.at(i); }
  Index rank() const { return static_cast<Index>(shape.size()); }

  Scalar& operator[](Index i) { return data[i]; }
  Scalar operator[](Index i) const { return data[i]; }

  /// Scalar value of a single-element tensor.
  Scalar item() const { return data[0]; }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }

  bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

/// Row-major offset of a 4-d index.
inline Index offset4(const Shape& s, Index a, Index b, Index c, Index d) {
  return ((a * s[1] + b) * s[2] + c) * s[3] + d;
}

}  // namespace purer
