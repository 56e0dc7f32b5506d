#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>
#include <cstddef>

#include "kernels_impl.hpp"

// NEON variants for aarch64 (2-wide f64 lanes). Same semantics as the scalar
// table; reductions may round differently.

namespace tnn::kernels::detail {
namespace {

double n_dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void n_axpy(double alpha, const double* x, double* y, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void n_scal(double alpha, double* x, std::size_t n) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(x + i, vmulq_f64(va, vld1q_f64(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

void n_vadd(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void n_vsub(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void n_vmul(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

double n_nrm2sq(const double* x, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t v = vld1q_f64(x + i);
    acc0 = vfmaq_f64(acc0, v, v);
  }
  double acc = vaddvq_f64(acc0);
  for (; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

void n_relu(const double* x, double* y, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(y + i, vmaxq_f64(zero, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void n_relu_grad(const double* x, const double* g, double* y, std::size_t n) {
  const float64x2_t zero = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const uint64x2_t mask = vcgtq_f64(vld1q_f64(x + i), zero);
    const float64x2_t vg = vld1q_f64(g + i);
    vst1q_f64(y + i, vreinterpretq_f64_u64(vandq_u64(
                         mask, vreinterpretq_u64_f64(vg))));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? g[i] : 0.0;
}

void n_gemm(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float64x2_t va = vdupq_n_f64(ai[p]);
      const double* bp = b + p * n;
      std::size_t j = 0;
      for (; j + 2 <= n; j += 2)
        vst1q_f64(ci + j, vfmaq_f64(vld1q_f64(ci + j), va, vld1q_f64(bp + j)));
      const double alpha = ai[p];
      for (; j < n; ++j) ci[j] += alpha * bp[j];
    }
  }
}

void n_corr_valid(const double* x, std::size_t nx, const double* w,
                  std::size_t nw, double* y) {
  const std::size_t ny = nx - nw + 1;
  std::size_t i = 0;
  for (; i + 2 <= ny; i += 2) {
    float64x2_t acc = vdupq_n_f64(0.0);
    for (std::size_t j = 0; j < nw; ++j)
      acc = vfmaq_f64(acc, vdupq_n_f64(w[j]), vld1q_f64(x + i + j));
    vst1q_f64(y + i, vaddq_f64(acc, vld1q_f64(y + i)));
  }
  for (; i < ny; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < nw; ++j) acc += x[i + j] * w[j];
    y[i] += acc;
  }
}

void n_corr_shift(const double* x, std::size_t nx, const double* w,
                  std::size_t nw, double* y, std::size_t ny,
                  std::ptrdiff_t off) {
  for (std::size_t i = 0; i < ny; ++i) {
    const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(i) - off;
    std::ptrdiff_t j0 = base < 0 ? -base : 0;
    std::ptrdiff_t j1 = static_cast<std::ptrdiff_t>(nw);
    if (base + j1 > static_cast<std::ptrdiff_t>(nx))
      j1 = static_cast<std::ptrdiff_t>(nx) - base;
    if (j0 >= j1) continue;
    y[i] += n_dot(x + base + j0, w + j0, static_cast<std::size_t>(j1 - j0));
  }
}

void n_adam_step(double* p, double* m, double* v, const double* g,
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

bool neon_supported() { return true; }

const Ops& neon_ops() {
  static const Ops ops = {n_dot,  n_axpy,       n_scal,      n_vadd,
                          n_vsub, n_vmul,       n_nrm2sq,    n_relu,
                          n_relu_grad, n_gemm,  n_corr_valid, n_corr_shift,
                          n_adam_step};
  return ops;
}

}  // namespace tnn::kernels::detail

#endif  // aarch64
