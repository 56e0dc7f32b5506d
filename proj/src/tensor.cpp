#include "tnn/tensor.hpp"

#include <cmath>
#include <utility>

#include "tnn/kernels.hpp"

namespace tnn {

Tensor Tensor::scalar(double v) {
  return Tensor(Shape(), std::make_shared<std::vector<double>>(1, v));
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::make_shared<std::vector<double>>(shape.numel(), 0.0));
}

Tensor Tensor::ones(const Shape& shape) {
  return Tensor(shape, std::make_shared<std::vector<double>>(shape.numel(), 1.0));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (static_cast<std::int64_t>(data.size()) != shape.numel())
    fail("Tensor::from_data: shape ", shape.str(), " wants ", shape.numel(),
         " elements, got ", data.size());
  return Tensor(std::move(shape),
                std::make_shared<std::vector<double>>(std::move(data)));
}

Tensor Tensor::random_uniform(const Shape& shape, Rng& rng, double scale) {
  if (!(scale > 0.0)) fail("Tensor::random_uniform: scale must be > 0");
  std::vector<double> data(shape.numel());
  for (double& v : data) v = rng.uniform(-scale, scale);
  return from_data(shape, std::move(data));
}

double Tensor::at(const std::vector<std::int64_t>& index) const {
  if (static_cast<int>(index.size()) != order())
    fail("Tensor::at: ", index.size(), " indices for order ", order());
  std::int64_t flat = 0;
  for (int m = 0; m < order(); ++m) {
    if (index[m] < 0 || index[m] >= dim(m))
      fail("Tensor::at: index ", index[m], " out of range for mode ", m,
           " of shape ", shape_.str());
    flat = flat * dim(m) + index[m];
  }
  return (*buf_)[flat];
}

double Tensor::norm() const {
  return std::sqrt(kernels::nrm2sq(data(), numel()));
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (std::int64_t i = 0; i < numel(); ++i)
    m = std::max(m, std::fabs(flat(i)));
  return m;
}

Tensor reshape(const Tensor& t, const Shape& shape) {
  if (shape.numel() != t.numel())
    fail("reshape: cannot view ", t.numel(), " elements (shape ",
         t.shape().str(), ") as ", shape.numel(), " (shape ", shape.str(), ")");
  std::vector<double> data(t.data(), t.data() + t.numel());
  return Tensor::from_data(shape, std::move(data));
}

Tensor swapaxes(const Tensor& t, const std::vector<int>& perm) {
  const int n = t.order();
  if (static_cast<int>(perm.size()) != n)
    fail("swapaxes: perm has ", perm.size(), " entries for order ", n);
  std::vector<bool> seen(n, false);
  for (int p : perm) {
    if (p < 0 || p >= n || seen[p]) fail("swapaxes: perm is not a bijection");
    seen[p] = true;
  }

  std::vector<std::int64_t> out_dims(n);
  for (int i = 0; i < n; ++i) out_dims[i] = t.dim(perm[i]);
  const Shape out_shape{std::vector<std::int64_t>(out_dims)};

  const std::vector<std::int64_t> in_strides = row_major_strides(t.shape());
  // Walk the output in order; an odometer over output indices advances the
  // source offset by the permuted stride, so there is no div/mod per element.
  std::vector<std::int64_t> src_stride(n);
  for (int i = 0; i < n; ++i) src_stride[i] = in_strides[perm[i]];

  std::vector<double> out(out_shape.numel());
  std::vector<std::int64_t> idx(n, 0);
  std::int64_t src = 0;
  for (std::int64_t o = 0; o < out_shape.numel(); ++o) {
    out[o] = t.flat(src);
    for (int m = n - 1; m >= 0; --m) {
      src += src_stride[m];
      if (++idx[m] < out_dims[m]) break;
      src -= src_stride[m] * out_dims[m];
      idx[m] = 0;
    }
  }
  return Tensor::from_data(out_shape, std::move(out));
}

Tensor flipaxis(const Tensor& t, int mode) {
  const int k = norm_mode(mode, t.order(), "flipaxis");
  const std::int64_t dk = t.dim(k);
  std::int64_t inner = 1, outer = 1;
  for (int m = k + 1; m < t.order(); ++m) inner *= t.dim(m);
  for (int m = 0; m < k; ++m) outer *= t.dim(m);

  std::vector<double> out(t.numel());
  const double* src = t.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < dk; ++i) {
      const double* s = src + (o * dk + i) * inner;
      double* d = out.data() + (o * dk + (dk - 1 - i)) * inner;
      for (std::int64_t j = 0; j < inner; ++j) d[j] = s[j];
    }
  return Tensor::from_data(t.shape(), std::move(out));
}

Tensor vectorize(const Tensor& t) { return reshape(t, Shape{t.numel()}); }

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    fail(what, ": shapes ", a.shape().str(), " and ", b.shape().str(),
         " differ");
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  kernels::vadd(a.data(), b.data(), out.data(), out.size());
  return Tensor::from_data(a.shape(), std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  kernels::vsub(a.data(), b.data(), out.data(), out.size());
  return Tensor::from_data(a.shape(), std::move(out));
}

Tensor scale(const Tensor& t, double alpha) {
  std::vector<double> out(t.data(), t.data() + t.numel());
  kernels::scal(alpha, out.data(), out.size());
  return Tensor::from_data(t.shape(), std::move(out));
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "hadamard");
  std::vector<double> out(a.numel());
  kernels::vmul(a.data(), b.data(), out.data(), out.size());
  return Tensor::from_data(a.shape(), std::move(out));
}

Tensor relu(const Tensor& t) {
  std::vector<double> out(t.numel());
  kernels::relu(t.data(), out.data(), out.size());
  return Tensor::from_data(t.shape(), std::move(out));
}

}  // namespace tnn
