#include "qcnn/tensor.hpp"

#include "qcnn/errors.hpp"

#include <sstream>

namespace qcnn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  values_ = ArrayXs::Constant(static_cast<Eigen::Index>(numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
  if (numel(shape_) != values.size())
    throw DimensionError("tensor " + to_string(shape_) + " given " + std::to_string(values.size()) +
                         " values");
  values_.resize(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (Scalar v : values) values_[i++] = v;
}

Tensor::Tensor(Shape shape, ArrayXs values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (numel(shape_) != size())
    throw DimensionError("tensor " + to_string(shape_) + " given " + std::to_string(size()) +
                         " values");
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

Eigen::Map<RowMatrixXs> Tensor::as_matrix(int rows) {
  const auto cols = static_cast<Eigen::Index>(size()) / rows;
  return {values_.data(), rows, cols};
}

Eigen::Map<const RowMatrixXs> Tensor::as_matrix(int rows) const {
  const auto cols = static_cast<Eigen::Index>(size()) / rows;
  return {values_.data(), rows, cols};
}

ArrayXs& Tensor::grad() {
  if (grad_.size() != values_.size()) grad_ = ArrayXs::Zero(values_.size());
  return grad_;
}

void Tensor::zero_grad() {
  if (grad_.size() == values_.size()) grad_.setZero();
}

void Tensor::reshape(Shape shape) {
  if (numel(shape) != size())
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  shape_ = std::move(shape);
}

}  // namespace qcnn
