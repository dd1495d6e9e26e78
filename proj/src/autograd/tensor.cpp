#include <numeric>
#include <sstream>

#include "maxl/autograd.hpp"
#include "maxl/errors.hpp"

namespace maxl::ag {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::span<const double> Tensor::data() const noexcept {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

double Tensor::at(std::size_t flat_index) const {
  if (!data_ || flat_index >= data_->size()) {
    throw ShapeError("tensor: index " + std::to_string(flat_index) + " out of range for shape " +
                     shape_str(shape_));
  }
  return (*data_)[flat_index];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("tensor: item() on shape " + shape_str(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

Tensor Tensor::reshaped_view(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

const Tensor& GradMap::at(const Tensor& param) const {
  auto it = entries_.find(param.node());
  if (it == entries_.end()) {
    throw MissingGradientError("no gradient recorded for node " + std::to_string(param.node()));
  }
  return it->second;
}

}  // namespace maxl::ag
