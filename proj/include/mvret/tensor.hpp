#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mvret {

using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles. All training math runs in 64-bit.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  void fill(double value);
  bool all_finite() const;
  /// Same data, new extents; volume must match.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
};

void require_shape(const Tensor& t, const Shape& expected, const char* what);
void require_rank(const Tensor& t, std::size_t rank, const char* what);

/// dst += scale * src (shapes must match).
void accumulate(Tensor& dst, const Tensor& src, double scale = 1.0);

enum class LearningGroup { adapter, vfs };

/// A trainable tensor together with its gradient and SGD momentum buffer.
struct ParamBlock {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor momentum;
  LearningGroup group = LearningGroup::adapter;
  bool weight_decay = true;

  ParamBlock() = default;
  ParamBlock(std::string name, Tensor initial, LearningGroup group, bool decay = true);

  void zero_grad();
  std::size_t size() const { return value.size(); }
};

}  // namespace mvret
