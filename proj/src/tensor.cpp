#include "adabldm/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

#include "adabldm/errors.hpp"

namespace adabldm {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    ADABLDM_CHECK(d >= 0, ParameterError, "negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  ADABLDM_CHECK(data_.size() == shape_numel(shape_), ParameterError,
                "tensor value count does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  ADABLDM_CHECK(shape_numel(shape) == data_.size(), ParameterError,
                "cannot reshape " + shape_string() + " to " + shape_to_string(shape));
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

}  // namespace adabldm
