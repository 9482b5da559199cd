#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hand/core/error.hpp"

namespace hand {

// Dense row-major float tensor, rank 0..4. Rank-2 tensors double as
// grayscale images (rows x cols).
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, float fill = 0.0f)
      : shape_(std::move(shape)) {
    for (int d : shape_) assert(d >= 0);
    data_.assign(count(shape_), fill);
  }

  Tensor(std::initializer_list<int> shape, float fill = 0.0f)
      : Tensor(std::vector<int>(shape), fill) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  static Tensor from(std::vector<int> shape, std::vector<float> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<std::int64_t>(values.size()) != count(t.shape_))
      throw input_error("tensor data size does not match shape");
    t.data_ = std::move(values);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  float& at(int i, int j) {
    assert(rank() == 2);
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  float at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

  float& at(int i, int j, int k) {
    assert(rank() == 3);
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  float at(int i, int j, int k) const {
    return const_cast<Tensor*>(this)->at(i, j, k);
  }

  float& at(int n, int c, int h, int w) {
    assert(rank() == 4);
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) *
                     shape_[3] +
                 w];
  }
  float at(int n, int c, int h, int w) const {
    return const_cast<Tensor*>(this)->at(n, c, h, w);
  }

  Tensor reshaped(std::vector<int> new_shape) const {
    if (count(new_shape) != numel())
      throw input_error("reshape changes element count");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  float min() const {
    assert(!empty());
    return *std::min_element(data_.begin(), data_.end());
  }
  float max() const {
    assert(!empty());
    return *std::max_element(data_.begin(), data_.end());
  }
  double sum() const {
    double s = 0.0;
    for (float v : data_) s += v;
    return s;
  }
  double mean() const { return empty() ? 0.0 : sum() / static_cast<double>(numel()); }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << 'x';
      os << shape_[i];
    }
    os << ')';
    return os.str();
  }

private:
  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  std::vector<int> shape_;
  std::vector<float> data_;
};

inline void require_shape(const Tensor& t, const std::vector<int>& shape,
                          const std::string& what) {
  if (t.shape() != shape) {
    Tensor expect(shape);
    throw input_error(what + ": expected shape " + expect.shape_str() +
                      ", got " + t.shape_str());
  }
}

}  // namespace hand
