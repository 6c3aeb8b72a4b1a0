#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vppo::ad {

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

// Dense multi-dimensional array of doubles with value semantics. Storage is
// shared on copy and cloned on first write, so snapshots are cheap and safe
// to read from many threads.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor filled(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double value) { return from({1}, {value}); }

  bool empty() const { return !data_; }
  const std::vector<int>& shape() const { return shape_; }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(axis); }

  std::span<const double> data() const {
    static const std::vector<double> kEmpty;
    return data_ ? std::span<const double>(*data_) : std::span<const double>(kEmpty);
  }

  // Clones storage if shared.
  double* mutable_data();

  double operator[](int64_t i) const { return (*data_)[i]; }
  double at2(int r, int c) const { return (*data_)[static_cast<int64_t>(r) * shape_[1] + c]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  static int64_t shape_size(const std::vector<int>& shape);

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

}  // namespace vppo::ad
