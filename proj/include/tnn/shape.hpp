#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "tnn/common.hpp"

namespace tnn {

// Dimension list of a tensor. Order 0 is a scalar (one element); every
// declared dimension must be positive.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims)
      : Shape(std::vector<std::int64_t>(dims)) {}
  explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {
    for (std::size_t i = 0; i < dims_.size(); ++i)
      if (dims_[i] < 1)
        fail("Shape: dim ", i, " is ", dims_[i], ", must be >= 1");
  }

  int order() const { return static_cast<int>(dims_.size()); }

  std::int64_t dim(int mode) const {
    return dims_[norm_mode(mode, order(), "Shape::dim")];
  }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (std::int64_t d : dims_) n *= d;
    return n;
  }

  const std::vector<std::int64_t>& dims() const { return dims_; }

  bool operator==(const Shape& o) const { return dims_ == o.dims_; }
  bool operator!=(const Shape& o) const { return dims_ != o.dims_; }

  std::string str() const {
    if (dims_.empty()) return "scalar";
    std::string s;
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims_[i]);
    }
    return s;
  }

 private:
  std::vector<std::int64_t> dims_;
};

// Row-major (big-endian) strides: last mode is contiguous.
inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.order());
  std::int64_t acc = 1;
  for (int m = s.order() - 1; m >= 0; --m) {
    st[m] = acc;
    acc *= s.dim(m);
  }
  return st;
}

}  // namespace tnn
