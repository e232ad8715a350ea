#include "mvret/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "mvret/error.hpp"

namespace mvret {

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_volume(shape_), ErrorKind::shape,
          "tensor data size " + std::to_string(data_.size()) + " does not match shape " +
              shape_to_string(shape_));
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const {
  require(index.size() == shape_.size(), ErrorKind::shape, "index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    require(i < shape_[axis], ErrorKind::shape, "index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[flat_index(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[flat_index(index)]; }

void Tensor::fill(double value) {
  for (auto& x : data_) x = value;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_volume(shape) == data_.size(), ErrorKind::shape,
          "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  return Tensor(std::move(shape), data_);
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    fail(ErrorKind::shape, std::string(what) + ": expected shape " + shape_to_string(expected) +
                               ", got " + shape_to_string(t.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    fail(ErrorKind::shape, std::string(what) + ": expected rank " + std::to_string(rank) +
                               ", got shape " + shape_to_string(t.shape()));
}

void accumulate(Tensor& dst, const Tensor& src, double scale) {
  require_shape(src, dst.shape(), "accumulate");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

ParamBlock::ParamBlock(std::string name_, Tensor initial, LearningGroup group_, bool decay)
    : name(std::move(name_)),
      value(std::move(initial)),
      grad(value.shape()),
      momentum(value.shape()),
      group(group_),
      weight_decay(decay) {}

void ParamBlock::zero_grad() { grad.fill(0.0); }

}  // namespace mvret
