#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace qcnmt {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

// Dense double tensor, row-major. Copies share the underlying buffers, so a
// Tensor behaves as an immutable value once built; in-place mutation through
// values_mut() is reserved for initialization and optimizer updates.
//
// When requires_grad is set, a same-sized grad buffer exists alongside the
// values and `node` links the tensor into the recorded graph (null for
// leaves). See ops.hpp for the op set and backward().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, double fill, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  const std::vector<double>& values() const { return *data_; }
  std::vector<double>& values_mut() { return *data_; }
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return requires_grad_; }
  std::vector<double>& grad() { return *grad_; }
  const std::vector<double>& grad() const { return *grad_; }
  bool has_grad_buffer() const { return grad_ != nullptr; }

  const std::shared_ptr<Node>& node() const { return node_; }
  void set_node(std::shared_ptr<Node> n) { node_ = std::move(n); }

  // Same values, detached from the graph and from gradient tracking.
  Tensor detached() const;
  // Deep copy of the values (fresh buffer).
  Tensor clone() const;

  bool all_finite() const;

  // Identity keys used by backward() to deduplicate shared buffers.
  const void* data_key() const { return data_.get(); }
  const void* grad_key() const { return grad_.get(); }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  std::shared_ptr<Node> node_;
  bool requires_grad_ = false;
};

}  // namespace qcnmt
