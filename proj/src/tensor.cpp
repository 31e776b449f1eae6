#include "lfkm/tensor.hpp"

#include <cmath>
#include <string>

namespace lfkm {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw Error("tensor extent must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 4)
    throw Error("tensor rank must be 1..4, got " + std::to_string(shape_.size()));
  data_.assign(static_cast<std::size_t>(shape_size(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 4)
    throw Error("tensor rank must be 1..4, got " + std::to_string(shape_.size()));
  if (static_cast<std::int64_t>(values.size()) != shape_size(shape_))
    throw Error("tensor data length does not match shape " + shape_string(shape_));
  data_ = std::move(values);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = value;
  return t;
}

void Tensor::ensure_grad() {
  if (grad.size() != data_.size()) grad.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad.empty()) grad.assign(data_.size(), 0.0);
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw Error(std::string("non-finite values in ") + what);
}

}  // namespace lfkm
