#include "scanmtl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mcx {

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

double& Tensor::at(int i0, int i1) {
  return data_[static_cast<std::size_t>(i0) * shape_[1] + i1];
}
double Tensor::at(int i0, int i1) const {
  return data_[static_cast<std::size_t>(i0) * shape_[1] + i1];
}
double& Tensor::at(int i0, int i1, int i2) {
  return data_[(static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2];
}
double Tensor::at(int i0, int i1, int i2) const {
  return data_[(static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2];
}
double& Tensor::at(int i0, int i1, int i2, int i3) {
  return data_[((static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) *
                   shape_[3] +
               i3];
}
double Tensor::at(int i0, int i1, int i2, int i3) const {
  return data_[((static_cast<std::size_t>(i0) * shape_[1] + i1) * shape_[2] + i2) *
                   shape_[3] +
               i3];
}

std::size_t Tensor::row_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / static_cast<std::size_t>(shape_[0]);
}

std::span<double> Tensor::row(int i) {
  const std::size_t n = row_size();
  return std::span<double>(data_).subspan(static_cast<std::size_t>(i) * n, n);
}

std::span<const double> Tensor::row(int i) const {
  const std::size_t n = row_size();
  return std::span<const double>(data_).subspan(static_cast<std::size_t>(i) * n, n);
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (element_count(shape) != data_.size()) {
    throw std::invalid_argument("reshape changes element count");
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
  }
}

double l2_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l2_distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace mcx
