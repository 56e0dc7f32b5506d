#include "tnn/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"

namespace tnn::kernels {
namespace {

thread_local std::uint64_t tl_multiplies = 0;

inline void count(std::uint64_t n) { tl_multiplies += n; }

const detail::Ops* table_for(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return &detail::scalar_ops();
    case Backend::Avx2:
#if defined(__x86_64__) || defined(__i386__)
      if (detail::avx2_supported()) return &detail::avx2_ops();
#endif
      return nullptr;
    case Backend::Neon:
#if defined(__aarch64__)
      if (detail::neon_supported()) return &detail::neon_ops();
#endif
      return nullptr;
  }
  return nullptr;
}

Backend auto_backend() {
  if (const char* env = std::getenv("TNN_KERNELS")) {
    const std::string_view v(env);
    if (v == "scalar") return Backend::Scalar;
    if (v == "avx2" && table_for(Backend::Avx2)) return Backend::Avx2;
    if (v == "neon" && table_for(Backend::Neon)) return Backend::Neon;
  }
  if (table_for(Backend::Avx2)) return Backend::Avx2;
  if (table_for(Backend::Neon)) return Backend::Neon;
  return Backend::Scalar;
}

struct State {
  Backend backend;
  const detail::Ops* ops;
};

State& state() {
  static State s = {auto_backend(), table_for(auto_backend())};
  return s;
}

inline const detail::Ops& ops() { return *state().ops; }

// Exact number of in-range (i, j) tap pairs for corr_shift.
std::uint64_t shift_pairs(std::size_t nx, std::size_t nw, std::size_t ny,
                          std::ptrdiff_t off) {
  std::uint64_t total = 0;
  for (std::size_t j = 0; j < nw; ++j) {
    const std::ptrdiff_t lo =
        std::max<std::ptrdiff_t>(0, off - static_cast<std::ptrdiff_t>(j));
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>(ny) - 1,
        static_cast<std::ptrdiff_t>(nx) - 1 + off - static_cast<std::ptrdiff_t>(j));
    if (hi >= lo) total += static_cast<std::uint64_t>(hi - lo + 1);
  }
  return total;
}

}  // namespace

Backend active() { return state().backend; }

bool backend_supported(Backend b) { return table_for(b) != nullptr; }

bool set_backend(Backend b) {
  const detail::Ops* t = table_for(b);
  if (!t) return false;
  state() = {b, t};
  return true;
}

void reset_backend() { state() = {auto_backend(), table_for(auto_backend())}; }

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return "scalar";
    case Backend::Avx2:
      return "avx2";
    case Backend::Neon:
      return "neon";
  }
  return "?";
}

std::uint64_t multiply_count() { return tl_multiplies; }

void count_multiplies(std::uint64_t n) { count(n); }

CountScope::CountScope() : start_(tl_multiplies) {}

std::uint64_t CountScope::count() const { return tl_multiplies - start_; }

double dot(const double* a, const double* b, std::size_t n) {
  count(n);
  return ops().dot(a, b, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  count(n);
  ops().axpy(alpha, x, y, n);
}

void scal(double alpha, double* x, std::size_t n) {
  count(n);
  ops().scal(alpha, x, n);
}

void vadd(const double* a, const double* b, double* y, std::size_t n) {
  ops().vadd(a, b, y, n);
}

void vsub(const double* a, const double* b, double* y, std::size_t n) {
  ops().vsub(a, b, y, n);
}

void vmul(const double* a, const double* b, double* y, std::size_t n) {
  count(n);
  ops().vmul(a, b, y, n);
}

double nrm2sq(const double* x, std::size_t n) {
  count(n);
  return ops().nrm2sq(x, n);
}

void relu(const double* x, double* y, std::size_t n) { ops().relu(x, y, n); }

void relu_grad(const double* x, const double* g, double* y, std::size_t n) {
  ops().relu_grad(x, g, y, n);
}

void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t k, std::size_t n) {
  count(static_cast<std::uint64_t>(m) * k * n);
  ops().gemm(a, b, c, m, k, n);
}

void corr_valid(const double* x, std::size_t nx, const double* w,
                std::size_t nw, double* y) {
  count(static_cast<std::uint64_t>(nx - nw + 1) * nw);
  ops().corr_valid(x, nx, w, nw, y);
}

void corr_shift(const double* x, std::size_t nx, const double* w,
                std::size_t nw, double* y, std::size_t ny, std::ptrdiff_t off) {
  count(shift_pairs(nx, nw, ny, off));
  ops().corr_shift(x, nx, w, nw, y, ny, off);
}

void adam_step(double* p, double* m, double* v, const double* g, std::size_t n,
               double lr, double beta1, double beta2, double eps,
               double beta1_pow, double beta2_pow) {
  ops().adam_step(p, m, v, g, n, lr, beta1, beta2, eps, beta1_pow, beta2_pow);
}

}  // namespace tnn::kernels
