#pragma once

#include <cstddef>

// Backend function tables. Each implementation file fills one of these with
// routines that have identical semantics; dispatch lives in kernels.cpp.

namespace tnn::kernels::detail {

struct Ops {
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scal)(double, double*, std::size_t);
  void (*vadd)(const double*, const double*, double*, std::size_t);
  void (*vsub)(const double*, const double*, double*, std::size_t);
  void (*vmul)(const double*, const double*, double*, std::size_t);
  double (*nrm2sq)(const double*, std::size_t);
  void (*relu)(const double*, double*, std::size_t);
  void (*relu_grad)(const double*, const double*, double*, std::size_t);
  void (*gemm)(const double*, const double*, double*, std::size_t, std::size_t,
               std::size_t);
  void (*corr_valid)(const double*, std::size_t, const double*, std::size_t,
                     double*);
  void (*corr_shift)(const double*, std::size_t, const double*, std::size_t,
                     double*, std::size_t, std::ptrdiff_t);
  void (*adam_step)(double*, double*, double*, const double*, std::size_t,
                    double, double, double, double, double, double);
};

const Ops& scalar_ops();

#if defined(__x86_64__) || defined(__i386__)
bool avx2_supported();
const Ops& avx2_ops();
#endif

#if defined(__aarch64__)
bool neon_supported();
const Ops& neon_ops();
#endif

}  // namespace tnn::kernels::detail
