#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

#include "tnn/rng.hpp"
#include "tnn/shape.hpp"

namespace tnn {

// Dense float64 tensor, row-major (big-endian: the last mode varies fastest),
// immutable after construction. Copies share the buffer, so handing tensors
// around (including onto an autodiff tape) is cheap.
class Tensor {
 public:
  // Order-0 scalar holding 0.
  Tensor() : Tensor(scalar(0.0)) {}

  static Tensor scalar(double v);
  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  // Takes ownership of `data`; size must equal shape.numel().
  static Tensor from_data(Shape shape, std::vector<double> data);
  // Entries i.i.d. uniform on [-scale, scale]; requires scale > 0.
  static Tensor random_uniform(const Shape& shape, Rng& rng, double scale);

  const Shape& shape() const { return shape_; }
  int order() const { return shape_.order(); }
  std::int64_t dim(int mode) const { return shape_.dim(mode); }
  std::int64_t numel() const { return shape_.numel(); }

  const double* data() const { return buf_->data(); }
  double flat(std::int64_t i) const { return (*buf_)[i]; }
  double at(const std::vector<std::int64_t>& index) const;
  double at(std::initializer_list<std::int64_t> index) const {
    return at(std::vector<std::int64_t>(index));
  }

  double norm() const;
  double max_abs() const;

 private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> buf)
      : shape_(std::move(shape)), buf_(std::move(buf)) {}

  Shape shape_;
  std::shared_ptr<const std::vector<double>> buf_;
};

// ---- layout operations (all return fresh tensors) ----

// Same data, new dimension list; element counts must agree.
Tensor reshape(const Tensor& t, const Shape& shape);
// General mode permutation, numpy-style: out.dim(i) = t.dim(perm[i]) and
// out[j0,...,jn-1] = t[k] with k[perm[i]] = j_i. perm must be a bijection.
Tensor swapaxes(const Tensor& t, const std::vector<int>& perm);
// Reverse the index along one mode.
Tensor flipaxis(const Tensor& t, int mode);
// Flatten to order 1 (row-major element order).
Tensor vectorize(const Tensor& t);

// ---- elementwise arithmetic ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double alpha);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& t);

}  // namespace tnn
