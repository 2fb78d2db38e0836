#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mcx {

/// Dense row-major array of doubles with a runtime shape.
///
/// Activations are laid out batch-first (M x C x H x W); parameters use
/// whatever layout their layer expects. No broadcasting, no views: every
/// Tensor owns its storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::initializer_list<int> shape, double fill = 0.0)
      : Tensor(std::vector<int>(shape), fill) {}

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int i0, int i1);
  double at(int i0, int i1) const;
  double& at(int i0, int i1, int i2);
  double at(int i0, int i1, int i2) const;
  double& at(int i0, int i1, int i2, int i3);
  double at(int i0, int i1, int i2, int i3) const;

  /// Number of elements in one slice along axis 0.
  std::size_t row_size() const;
  std::span<double> row(int i);
  std::span<const double> row(int i) const;

  /// Same storage, new shape; element count must match.
  Tensor reshaped(std::vector<int> shape) const;
  void fill(double v);
  bool all_finite() const;

  std::string shape_string() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

std::size_t element_count(const std::vector<int>& shape);

/// Throws std::invalid_argument naming `what` when shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Euclidean norm of (a - b); shapes must agree.
double l2_distance(const Tensor& a, const Tensor& b);

}  // namespace mcx
