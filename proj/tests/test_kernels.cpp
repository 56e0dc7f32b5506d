#include "tnn/kernels.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <vector>

#include "tnn/rng.hpp"

// Scalar kernels are the reference semantics; SIMD variants must agree up to
// reduction rounding. Elementwise kernels must agree bitwise: they do the
// same arithmetic per lane with no reassociation.

namespace k = tnn::kernels;

namespace {

std::vector<double> rand_vec(tnn::Rng& rng, std::size_t n, double s = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-s, s);
  return v;
}

// Reduction comparisons are judged against the magnitude of the summed terms,
// not the (possibly cancelled) result.
void check_close_reduction(double a, double b, double term_mass) {
  CHECK(std::fabs(a - b) <= 1e-13 * (term_mass + 1.0));
}

struct BackendGuard {
  ~BackendGuard() { k::reset_backend(); }
};

}  // namespace

TEST_CASE("backend dispatch: scalar always available, forcing works") {
  BackendGuard guard;
  CHECK(k::backend_supported(k::Backend::Scalar));
  CHECK(k::set_backend(k::Backend::Scalar));
  CHECK(k::active() == k::Backend::Scalar);
  k::reset_backend();
  // Whatever automatic selection picks must be a supported backend.
  CHECK(k::backend_supported(k::active()));
}

TEST_CASE("dot/nrm2sq match a naive loop and agree across backends") {
  BackendGuard guard;
  tnn::Rng rng(1234);
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 64u, 1001u}) {
    const auto a = rand_vec(rng, n);
    const auto b = rand_vec(rng, n);
    double naive = 0.0, mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      naive += a[i] * b[i];
      mass += std::fabs(a[i] * b[i]);
    }

    REQUIRE(k::set_backend(k::Backend::Scalar));
    const double ds = k::dot(a.data(), b.data(), n);
    const double ns = k::nrm2sq(a.data(), a.size());
    check_close_reduction(ds, naive, mass);

    for (k::Backend bk : {k::Backend::Avx2, k::Backend::Neon}) {
      if (!k::backend_supported(bk)) continue;
      REQUIRE(k::set_backend(bk));
      check_close_reduction(k::dot(a.data(), b.data(), n), ds, mass);
      check_close_reduction(k::nrm2sq(a.data(), a.size()), ns, mass + 1.0);
    }
  }
}

TEST_CASE("elementwise kernels agree bitwise across backends") {
  BackendGuard guard;
  tnn::Rng rng(99);
  const std::size_t n = 257;  // odd tail on purpose
  const auto a = rand_vec(rng, n);
  const auto b = rand_vec(rng, n);

  REQUIRE(k::set_backend(k::Backend::Scalar));
  std::vector<double> add_s(n), sub_s(n), mul_s(n), relu_s(n), rg_s(n);
  k::vadd(a.data(), b.data(), add_s.data(), n);
  k::vsub(a.data(), b.data(), sub_s.data(), n);
  k::vmul(a.data(), b.data(), mul_s.data(), n);
  k::relu(a.data(), relu_s.data(), n);
  k::relu_grad(a.data(), b.data(), rg_s.data(), n);
  auto scal_s = a;
  k::scal(0.37, scal_s.data(), n);

  for (k::Backend bk : {k::Backend::Avx2, k::Backend::Neon}) {
    if (!k::backend_supported(bk)) continue;
    REQUIRE(k::set_backend(bk));
    std::vector<double> out(n);
    k::vadd(a.data(), b.data(), out.data(), n);
    CHECK(out == add_s);
    k::vsub(a.data(), b.data(), out.data(), n);
    CHECK(out == sub_s);
    k::vmul(a.data(), b.data(), out.data(), n);
    CHECK(out == mul_s);
    k::relu(a.data(), out.data(), n);
    CHECK(out == relu_s);
    k::relu_grad(a.data(), b.data(), out.data(), n);
    CHECK(out == rg_s);
    out = a;
    k::scal(0.37, out.data(), n);
    CHECK(out == scal_s);
  }
}

TEST_CASE("gemm matches naive triple loop and agrees across backends") {
  BackendGuard guard;
  tnn::Rng rng(7);
  const std::size_t m = 9, kk = 17, n = 13;
  const auto a = rand_vec(rng, m * kk);
  const auto b = rand_vec(rng, kk * n);

  std::vector<double> naive(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < kk; ++p) acc += a[i * kk + p] * b[p * n + j];
      naive[i * n + j] = acc;
    }

  for (k::Backend bk : {k::Backend::Scalar, k::Backend::Avx2, k::Backend::Neon}) {
    if (!k::backend_supported(bk)) continue;
    REQUIRE(k::set_backend(bk));
    std::vector<double> c(m * n, 0.0);
    k::gemm(a.data(), b.data(), c.data(), m, kk, n);
    for (std::size_t i = 0; i < m * n; ++i)
      CHECK(std::fabs(c[i] - naive[i]) <= 1e-13 * kk);
  }
}

TEST_CASE("gemm accumulates into existing values") {
  std::vector<double> a = {1.0, 2.0};      // 1x2
  std::vector<double> b = {10.0, 100.0};   // 2x1
  std::vector<double> c = {5.0};           // 1x1 pre-filled
  k::gemm(a.data(), b.data(), c.data(), 1, 2, 1);
  CHECK(c[0] == doctest::Approx(5.0 + 210.0).epsilon(1e-15));
}

TEST_CASE("corr_valid matches naive correlation on all backends") {
  BackendGuard guard;
  tnn::Rng rng(21);
  for (std::size_t nx : {1u, 5u, 9u, 40u}) {
    for (std::size_t nw : {1u, 2u, 3u, 5u}) {
      if (nw > nx) continue;
      const auto x = rand_vec(rng, nx);
      const auto w = rand_vec(rng, nw);
      const std::size_t ny = nx - nw + 1;
      std::vector<double> naive(ny, 0.0);
      for (std::size_t i = 0; i < ny; ++i)
        for (std::size_t j = 0; j < nw; ++j) naive[i] += x[i + j] * w[j];

      for (k::Backend bk :
           {k::Backend::Scalar, k::Backend::Avx2, k::Backend::Neon}) {
        if (!k::backend_supported(bk)) continue;
        REQUIRE(k::set_backend(bk));
        std::vector<double> y(ny, 0.0);
        k::corr_valid(x.data(), nx, w.data(), nw, y.data());
        for (std::size_t i = 0; i < ny; ++i)
          CHECK(std::fabs(y[i] - naive[i]) <= 1e-13 * nw);
      }
    }
  }
}

TEST_CASE("corr_shift clips out-of-range taps exactly like a guarded loop") {
  BackendGuard guard;
  tnn::Rng rng(22);
  const std::size_t nx = 11, nw = 4;
  const auto x = rand_vec(rng, nx);
  const auto w = rand_vec(rng, nw);
  for (std::ptrdiff_t off : {-2, 0, 1, 3}) {
    for (std::size_t ny : {1u, 8u, 11u, 14u}) {
      std::vector<double> naive(ny, 0.0);
      for (std::size_t i = 0; i < ny; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
          const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(i + j) - off;
          if (p >= 0 && p < static_cast<std::ptrdiff_t>(nx))
            naive[i] += x[p] * w[j];
        }
      for (k::Backend bk :
           {k::Backend::Scalar, k::Backend::Avx2, k::Backend::Neon}) {
        if (!k::backend_supported(bk)) continue;
        REQUIRE(k::set_backend(bk));
        std::vector<double> y(ny, 0.0);
        k::corr_shift(x.data(), nx, w.data(), nw, y.data(), ny, off);
        for (std::size_t i = 0; i < ny; ++i)
          CHECK(std::fabs(y[i] - naive[i]) <= 1e-13 * nw);
      }
    }
  }
}

TEST_CASE("multiply counter: exact counts per kernel, scopes nest") {
  tnn::Rng rng(5);
  const auto a = rand_vec(rng, 30);
  const auto b = rand_vec(rng, 30);

  k::CountScope outer;
  {
    k::CountScope scope;
    k::dot(a.data(), b.data(), 30);
    CHECK(scope.count() == 30);
  }
  {
    k::CountScope scope;
    std::vector<double> c(6 * 4, 0.0);
    k::gemm(a.data(), b.data(), c.data(), 6, 5, 4);
    CHECK(scope.count() == 6 * 5 * 4);
  }
  {
    // corr_valid: (nx-nw+1)*nw multiplies.
    k::CountScope scope;
    std::vector<double> y(8, 0.0);
    k::corr_valid(a.data(), 10, b.data(), 3, y.data());
    CHECK(scope.count() == 8 * 3);
  }
  {
    // corr_shift: only in-range taps count. Compare with a guarded loop.
    const std::size_t nx = 10, nw = 3, ny = 10;
    const std::ptrdiff_t off = 1;
    std::uint64_t expect = 0;
    for (std::size_t i = 0; i < ny; ++i)
      for (std::size_t j = 0; j < nw; ++j) {
        const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(i + j) - off;
        if (p >= 0 && p < static_cast<std::ptrdiff_t>(nx)) ++expect;
      }
    k::CountScope scope;
    std::vector<double> y(ny, 0.0);
    k::corr_shift(a.data(), nx, b.data(), nw, y.data(), ny, off);
    CHECK(scope.count() == expect);
  }
  // Outer scope saw everything the inner scopes saw.
  CHECK(outer.count() == 30 + 6 * 5 * 4 + 8 * 3 + 28);
}

TEST_CASE("adam_step matches the update rule") {
  const std::size_t n = 5;
  std::vector<double> p(n, 1.0), m(n, 0.0), v(n, 0.0), g = {1, -2, 3, -4, 5};
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> pr = p, mr = m, vr = v;
  for (std::size_t i = 0; i < n; ++i) {
    mr[i] = b1 * mr[i] + (1 - b1) * g[i];
    vr[i] = b2 * vr[i] + (1 - b2) * g[i] * g[i];
    const double mh = mr[i] / (1 - b1);
    const double vh = vr[i] / (1 - b2);
    pr[i] -= lr * mh / (std::sqrt(vh) + eps);
  }
  k::adam_step(p.data(), m.data(), v.data(), g.data(), n, lr, b1, b2, eps, b1, b2);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(p[i] == doctest::Approx(pr[i]).epsilon(1e-12));
    CHECK(m[i] == doctest::Approx(mr[i]).epsilon(1e-12));
    CHECK(v[i] == doctest::Approx(vr[i]).epsilon(1e-12));
  }
}
