#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace adabldm {

/// Cache-line aligned allocation. Vectorized kernels pick their code path from
/// pointer alignment, so fixed alignment keeps results bit-identical across runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles with a dynamic shape.
/// Image-like data uses NCHW order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> values);

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Same data, new shape with identical element count.
  Tensor reshaped(std::vector<int> shape) const;
  void fill(double v);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_string() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<int> shape_;
  AlignedVector data_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace adabldm
