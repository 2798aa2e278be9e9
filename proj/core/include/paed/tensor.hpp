#ifndef PAED_TENSOR_HPP
#define PAED_TENSOR_HPP

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace paed {

// Dense row-major tensor of doubles. Shapes are small vectors of extents;
// rank is whatever the op needs (1..4 in practice).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, double fill);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Multi-index access for tests and cold paths; hot loops index manually.
  double& at(std::initializer_list<int> idx) { return data_[static_cast<std::size_t>(offset(idx))]; }
  double at(std::initializer_list<int> idx) const {
    return data_[static_cast<std::size_t>(offset(idx))];
  }

  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

 private:
  std::int64_t offset(std::initializer_list<int> idx) const;

  std::vector<int> shape_;
  std::vector<double> data_;
};

std::int64_t shape_size(const std::vector<int>& shape);

}  // namespace paed

#endif  // PAED_TENSOR_HPP
