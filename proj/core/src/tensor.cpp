#include "paed/tensor.hpp"

#include <cmath>

#include "paed/error.hpp"

namespace paed {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeMismatch("negative tensor extent");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeMismatch("tensor data length does not match shape");
  }
}

void Tensor::fill(double v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::int64_t Tensor::offset(std::initializer_list<int> idx) const {
  std::int64_t off = 0;
  std::size_t k = 0;
  for (int i : idx) {
    off = off * shape_[k] + i;
    ++k;
  }
  return off;
}

}  // namespace paed
