#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

// Hot numeric loops. Every routine has a scalar reference implementation and,
// where the host supports it, a SIMD variant (AVX2+FMA on x86-64, NEON on
// aarch64). The variant is picked once at runtime; tests compare backends on
// the same inputs. Elementwise routines are exact across backends; reductions
// may differ by rounding (different accumulation trees), never by semantics.

namespace tnn::kernels {

enum class Backend { Scalar, Avx2, Neon };

Backend active();
bool backend_supported(Backend b);
// Force a specific backend (tests); returns false if unsupported here.
bool set_backend(Backend b);
// Back to automatic selection (honors TNN_KERNELS=scalar|avx2|neon if set).
void reset_backend();
std::string_view backend_name(Backend b);

// Multiply accounting: each kernel that multiplies adds its exact scalar
// multiply count to a thread-local counter. CountScope reads the delta over
// a region, so counts stay local to the measured call; scopes nest freely.
std::uint64_t multiply_count();
// Record multiplies performed outside the kernel routines (instrumented
// direct loops), so scoped counts stay exact.
void count_multiplies(std::uint64_t n);
class CountScope {
 public:
  CountScope();
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
};

double dot(const double* a, const double* b, std::size_t n);
// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scal(double alpha, double* x, std::size_t n);
void vadd(const double* a, const double* b, double* y, std::size_t n);
void vsub(const double* a, const double* b, double* y, std::size_t n);
void vmul(const double* a, const double* b, double* y, std::size_t n);
double nrm2sq(const double* x, std::size_t n);
void relu(const double* x, double* y, std::size_t n);
// y[i] = g[i] where x[i] > 0, else 0
void relu_grad(const double* x, const double* g, double* y, std::size_t n);
// C[m x n] += A[m x k] * B[k x n], all row-major contiguous.
void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t k, std::size_t n);
// y[i] += sum_j x[i+j] * w[j] for i in [0, nx - nw + 1)
void corr_valid(const double* x, std::size_t nx, const double* w,
                std::size_t nw, double* y);
// y[i] += sum_j x[i+j-off] * w[j]; terms with i+j-off outside [0, nx) skipped.
void corr_shift(const double* x, std::size_t nx, const double* w,
                std::size_t nw, double* y, std::size_t ny, std::ptrdiff_t off);
// One Adam update over a parameter block. beta1_pow/beta2_pow are the running
// powers beta^t used for bias correction. Not multiply-counted: optimizer
// arithmetic is not part of the operator cost model.
void adam_step(double* p, double* m, double* v, const double* g, std::size_t n,
               double lr, double beta1, double beta2, double eps,
               double beta1_pow, double beta2_pow);

}  // namespace tnn::kernels
