#include <cmath>
#include <cstddef>

#include "kernels_impl.hpp"

// Reference implementations: plain loops, no intrinsics. These define the
// semantics the SIMD backends are tested against.

namespace tnn::kernels::detail {
namespace {

double s_dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void s_axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void s_scal(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void s_vadd(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void s_vsub(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

void s_vmul(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

double s_nrm2sq(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

void s_relu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void s_relu_grad(const double* x, const double* g, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void s_gemm(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double alpha = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += alpha * bp[j];
    }
  }
}

void s_corr_valid(const double* x, std::size_t nx, const double* w,
                  std::size_t nw, double* y) {
  const std::size_t ny = nx - nw + 1;
  for (std::size_t i = 0; i < ny; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < nw; ++j) acc += x[i + j] * w[j];
    y[i] += acc;
  }
}

void s_corr_shift(const double* x, std::size_t nx, const double* w,
                  std::size_t nw, double* y, std::size_t ny,
                  std::ptrdiff_t off) {
  for (std::size_t i = 0; i < ny; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < nw; ++j) {
      const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(i + j) - off;
      if (p >= 0 && p < static_cast<std::ptrdiff_t>(nx)) acc += x[p] * w[j];
    }
    y[i] += acc;
  }
}

void s_adam_step(double* p, double* m, double* v, const double* g,
                 std::size_t n, double lr, double beta1, double beta2,
                 double eps, double beta1_pow, double beta2_pow) {
  const double mc = 1.0 / (1.0 - beta1_pow);
  const double vc = 1.0 / (1.0 - beta2_pow);
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] * mc) / (std::sqrt(v[i] * vc) + eps);
  }
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops = {s_dot,  s_axpy,       s_scal,      s_vadd,
                          s_vsub, s_vmul,       s_nrm2sq,    s_relu,
                          s_relu_grad, s_gemm,  s_corr_valid, s_corr_shift,
                          s_adam_step};
  return ops;
}

}  // namespace tnn::kernels::detail
