#include "mcblock/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mcblock/error.hpp"

namespace mcblock {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values) {
  return Tensor(std::move(shape), std::vector<float>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor out(std::move(shape), data_);
  out.requires_grad = requires_grad;
  return out;
}

void Tensor::fill(float v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const noexcept {
  for (float x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace mcblock
