#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepbn/error.hpp"

namespace sepbn {

// Dense row-major N-d array of doubles with an optional gradient buffer of
// the same length. Parameters keep their gradient allocated; activations
// usually travel without one.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != count(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape (" + shape_str() + ")");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool has_grad() const { return !grad_.empty(); }
  std::vector<double>& grad() {
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    return grad_;
  }
  const std::vector<double>& grad() const { return grad_; }
  void zero_grad() {
    if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const {
    std::string s;
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s;
  }

  bool all_finite() const;

  static int64_t count(const std::vector<int>& shape);

private:
  std::vector<int> shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
};

// A named parameter tensor. `decay` marks whether weight decay applies
// (false for norm-layer scale/shift and all biases).
struct Param {
  std::string name;
  Tensor value;
  bool decay = true;

  Param() = default;
  Param(std::string n, Tensor v, bool d) : name(std::move(n)), value(std::move(v)), decay(d) {
    value.grad();  // parameters always carry an allocated gradient
  }
};

}  // namespace sepbn
