#include "vppo/tensor.hpp"

#include <cmath>

namespace vppo::ad {

int64_t Tensor::shape_size(const std::vector<int>& shape) {
  if (shape.empty()) throw TensorError("tensor shape must have at least one extent");
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw TensorError("tensor extents must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

Tensor Tensor::zeros(std::vector<int> shape) {
  const int64_t n = shape_size(shape);
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(n, 0.0);
  return t;
}

Tensor Tensor::filled(std::vector<int> shape, double value) {
  const int64_t n = shape_size(shape);
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(n, value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  const int64_t n = shape_size(shape);
  if (n != static_cast<int64_t>(values.size()))
    throw TensorError("value count " + std::to_string(values.size()) +
                      " does not match shape size " + std::to_string(n));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

double* Tensor::mutable_data() {
  if (!data_) throw TensorError("mutable_data on empty tensor");
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return data_->data();
}

bool Tensor::all_finite() const {
  if (!data_) return true;
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace vppo::ad
