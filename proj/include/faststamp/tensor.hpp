#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace faststamp {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense tensor, flat row-major storage. Images are (C,H,W) with channel
/// outermost; vectors are (N,). Copies share storage; array_mut() detaches,
/// so a tensor already handed to other code is never mutated through a copy.
template <typename Scalar>
class Tensor {
 public:
  using Array = ArrayX<Scalar>;

  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<Array>(Array::Zero(shape_size(shape_)))) {}

  Tensor(Shape shape, Array values) : shape_(std::move(shape)) {
    if (values.size() != shape_size(shape_))
      throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape_));
    store_ = std::make_shared<Array>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, Scalar v) {
    std::int64_t n = shape_size(shape);
    return Tensor(std::move(shape), Array::Constant(n, v));
  }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& v) {
    Array a(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) a[static_cast<Eigen::Index>(i)] = v[i];
    return Tensor(std::move(shape), std::move(a));
  }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const { return store_ ? store_->size() : 0; }

  const Array& array() const { return *store_; }

  /// Mutable view; detaches from any sharing copies first.
  Array& array_mut() {
    if (store_.use_count() > 1) store_ = std::make_shared<Array>(*store_);
    return *store_;
  }

  Scalar value(std::int64_t i) const { return (*store_)[i]; }

  Scalar operator()(int i) const { return (*store_)[i]; }
  Scalar operator()(int c, int y, int x) const { return (*store_)[offset(c, y, x)]; }

  std::int64_t offset(int c, int y, int x) const {
    return (static_cast<std::int64_t>(c) * dim(rank() - 2) + y) * dim(rank() - 1) + x;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// Autodiff bookkeeping: which tape node produced this tensor (if any).
  bool requires_grad = false;
  int node = -1;
  std::uint64_t tape_id = 0;

 private:
  Shape shape_;
  std::shared_ptr<Array> store_;
};

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace faststamp
