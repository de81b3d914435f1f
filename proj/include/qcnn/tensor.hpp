#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace qcnn {

using Scalar = float;
using ArrayXs = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using RowMatrixXs = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowArrayXXs = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major (N,C,H,W) array of 32-bit reals with an optional gradient
// buffer of the same length. Storage is an Eigen array so callers can use
// coefficient-wise expressions directly on values() / grad().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, std::initializer_list<Scalar> values);
  Tensor(Shape shape, ArrayXs values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }

  ArrayXs& values() { return values_; }
  const ArrayXs& values() const { return values_; }
  Scalar& operator[](std::size_t i) { return values_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }
  std::span<Scalar> span() { return {values_.data(), size()}; }
  std::span<const Scalar> span() const { return {values_.data(), size()}; }

  // View as a matrix with `rows` leading rows (row-major), e.g. a conv kernel
  // [F,C,kH,kW] as [F, C*kH*kW].
  Eigen::Map<RowMatrixXs> as_matrix(int rows);
  Eigen::Map<const RowMatrixXs> as_matrix(int rows) const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool flag) { requires_grad_ = flag; }

  bool has_grad() const { return grad_.size() == values_.size() && values_.size() > 0; }
  ArrayXs& grad();  // allocates a zero buffer on first use
  const ArrayXs& grad() const { return grad_; }
  void zero_grad();
  void drop_grad() { grad_.resize(0); }

  void reshape(Shape shape);

 private:
  Shape shape_;
  ArrayXs values_;
  ArrayXs grad_;
  bool requires_grad_ = false;
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape shape, Scalar fill = Scalar(0)) {
  return std::make_shared<Tensor>(std::move(shape), fill);
}
inline TensorPtr make_tensor(Shape shape, std::initializer_list<Scalar> values) {
  return std::make_shared<Tensor>(std::move(shape), values);
}
inline TensorPtr make_tensor(Shape shape, ArrayXs values) {
  return std::make_shared<Tensor>(std::move(shape), std::move(values));
}
inline TensorPtr make_parameter(Shape shape, Scalar fill = Scalar(0)) {
  auto t = make_tensor(std::move(shape), fill);
  t->set_requires_grad(true);
  return t;
}

}  // namespace qcnn
