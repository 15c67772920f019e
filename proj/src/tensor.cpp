#include "qcnmt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace qcnmt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::runtime_error("tensor: non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  const std::size_t n = shape_numel(shape_);
  data_ = std::make_shared<std::vector<double>>(n, fill);
  if (requires_grad_) grad_ = std::make_shared<std::vector<double>>(n, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  if (shape_numel(shape_) != values.size()) {
    throw std::runtime_error("tensor: shape " + shape_str(shape_) + " does not match " +
                             std::to_string(values.size()) + " values");
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
  if (requires_grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw std::runtime_error("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("tensor: item() on non-scalar " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw std::runtime_error("tensor: index rank mismatch for " + shape_str(shape_));
  }
  std::size_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape_[axis]) throw std::runtime_error("tensor: index out of range");
    flat = flat * static_cast<std::size_t>(shape_[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return (*data_)[flat];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  return Tensor(shape_, *data_, false);
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace qcnmt
