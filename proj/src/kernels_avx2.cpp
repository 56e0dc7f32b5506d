#if defined(__x86_64__) || defined(__i386__)

#include <immintrin.h>

#include <cmath>
#include <cstddef>

#include "kernels_impl.hpp"

// AVX2+FMA variants. Compiled with per-function target attributes so the
// translation unit builds on any x86-64 toolchain; the dispatcher only
// installs this table when the CPU reports avx2 and fma.

#define TNN_AVX2 __attribute__((target("avx2,fma")))

namespace tnn::kernels::detail {
namespace {

TNN_AVX2 double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swap = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swap));
}

TNN_AVX2 double v_dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

TNN_AVX2 void v_axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

TNN_AVX2 void v_scal(double alpha, double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) x[i] *= alpha;
}

TNN_AVX2 void v_vadd(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

TNN_AVX2 void v_vsub(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

TNN_AVX2 void v_vmul(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

TNN_AVX2 double v_nrm2sq(const double* x, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    acc0 = _mm256_fmadd_pd(v, v, acc0);
  }
  double acc = hsum(acc0);
  for (; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

TNN_AVX2 void v_relu(const double* x, double* y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(zero, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

TNN_AVX2 void v_relu_grad(const double* x, const double* g, double* y,
                          std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(y + i, _mm256_and_pd(mask, _mm256_loadu_pd(g + i)));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? g[i] : 0.0;
}

TNN_AVX2 void v_gemm(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d va = _mm256_set1_pd(ai[p]);
      const double* bp = b + p * n;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(ci + j);
        vc = _mm256_fmadd_pd(va, _mm256_loadu_pd(bp + j), vc);
        _mm256_storeu_pd(ci + j, vc);
      }
      const double alpha = ai[p];
      for (; j < n; ++j) ci[j] += alpha * bp[j];
    }
  }
}

// Vectorize over outputs: four adjacent y positions share each kernel tap.
TNN_AVX2 void v_corr_valid(const double* x, std::size_t nx, const double* w,
                           std::size_t nw, double* y) {
  const std::size_t ny = nx - nw + 1;
  std::size_t i = 0;
  for (; i + 4 <= ny; i += 4) {
    __m256d acc = _mm256_setzero_pd();
    for (std::size_t j = 0; j < nw; ++j)
      acc = _mm256_fmadd_pd(_mm256_set1_pd(w[j]), _mm256_loadu_pd(x + i + j), acc);
    _mm256_storeu_pd(y + i, _mm256_add_pd(acc, _mm256_loadu_pd(y + i)));
  }
  for (; i < ny; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < nw; ++j) acc += x[i + j] * w[j];
    y[i] += acc;
  }
}

TNN_AVX2 void v_corr_shift(const double* x, std::size_t nx, const double* w,
                           std::size_t nw, double* y, std::size_t ny,
                           std::ptrdiff_t off) {
  // Clip the tap range per output; the surviving range is a short dot.
  for (std::size_t i = 0; i < ny; ++i) {
    const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(i) - off;
    std::ptrdiff_t j0 = base < 0 ? -base : 0;
    std::ptrdiff_t j1 = static_cast<std::ptrdiff_t>(nw);
    if (base + j1 > static_cast<std::ptrdiff_t>(nx))
      j1 = static_cast<std::ptrdiff_t>(nx) - base;
    if (j0 >= j1) continue;
    y[i] += v_dot(x + base + j0, w + j0, static_cast<std::size_t>(j1 - j0));
  }
}

TNN_AVX2 void v_adam_step(double* p, double* m, double* v, const double* g,
                          std::size_t n, double lr, double beta1, double beta2,
                          double eps, double beta1_pow, double beta2_pow) {
  const double mc_s = 1.0 / (1.0 - beta1_pow);
  const double vc_s = 1.0 / (1.0 - beta2_pow);
  const __m256d vb1 = _mm256_set1_pd(beta1);
  const __m256d vb2 = _mm256_set1_pd(beta2);
  const __m256d vc1 = _mm256_set1_pd(1.0 - beta1);
  const __m256d vc2 = _mm256_set1_pd(1.0 - beta2);
  const __m256d vmc = _mm256_set1_pd(mc_s);
  const __m256d vvc = _mm256_set1_pd(vc_s);
  const __m256d vlr = _mm256_set1_pd(lr);
  const __m256d veps = _mm256_set1_pd(eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vg = _mm256_loadu_pd(g + i);
    __m256d vm = _mm256_fmadd_pd(vb1, _mm256_loadu_pd(m + i), _mm256_mul_pd(vc1, vg));
    __m256d vv = _mm256_fmadd_pd(vb2, _mm256_loadu_pd(v + i),
                                 _mm256_mul_pd(vc2, _mm256_mul_pd(vg, vg)));
    _mm256_storeu_pd(m + i, vm);
    _mm256_storeu_pd(v + i, vv);
    const __m256d denom =
        _mm256_add_pd(_mm256_sqrt_pd(_mm256_mul_pd(vv, vvc)), veps);
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(vlr, _mm256_mul_pd(vm, vmc)), denom);
    _mm256_storeu_pd(p + i, _mm256_sub_pd(_mm256_loadu_pd(p + i), step));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] * mc_s) / (std::sqrt(v[i] * vc_s) + eps);
  }
}

}  // namespace

bool avx2_supported() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

const Ops& avx2_ops() {
  static const Ops ops = {v_dot,  v_axpy,       v_scal,      v_vadd,
                          v_vsub, v_vmul,       v_nrm2sq,    v_relu,
                          v_relu_grad, v_gemm,  v_corr_valid, v_corr_shift,
                          v_adam_step};
  return ops;
}

}  // namespace tnn::kernels::detail

#endif  // x86
