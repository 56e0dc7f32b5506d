#include "tnn/autodiff.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "tnn/kernels.hpp"
#include "tnn/ops.hpp"
#include "tnn/rng.hpp"
#include "tnn/tensor.hpp"

using namespace tnn;

namespace {

Tensor rt(Rng& rng, const Shape& s, double scale = 1.0) {
  return Tensor::random_uniform(s, rng, scale);
}

double inner(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.flat(i) * b.flat(i);
  return acc;
}

// || got - want || / max(1, || want ||)
double rel_err(const Tensor& got, const Tensor& want) {
  REQUIRE(got.shape() == want.shape());
  double num = 0.0, den = 0.0;
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    const double d = got.flat(i) - want.flat(i);
    num += d * d;
    den += want.flat(i) * want.flat(i);
  }
  return std::sqrt(num) / std::max(1.0, std::sqrt(den));
}

// Checks both vjp slots of `op` against central finite differences of the
// linear probe f(a, b) = <W, op(a, b)> with a fixed random W.
void check_vjp(const OpDesc& op, const Tensor& a, const Tensor& b, Rng& rng,
               double tol = 1e-4) {
  const Tensor w = rt(rng, op_result_shape(op, a.shape(), b.shape()));
  const VjpResult r = vjp(op, a, b, w);
  REQUIRE(r.grad_a.has_value());
  REQUIRE(r.grad_b.has_value());
  CHECK(r.grad_a->shape() == a.shape());
  CHECK(r.grad_b->shape() == b.shape());
  const Tensor fda = finite_difference_grad(
      [&](const Tensor& t) { return inner(w, apply_op(op, t, b)); }, a, 1e-5);
  const Tensor fdb = finite_difference_grad(
      [&](const Tensor& t) { return inner(w, apply_op(op, a, t)); }, b, 1e-5);
  CHECK(rel_err(*r.grad_a, fda) < tol);
  CHECK(rel_err(*r.grad_b, fdb) < tol);
}

}  // namespace

TEST_CASE("adjoint_convolve: hand examples") {
  // valid correlation: the adjoint pass is a full correlation against the
  // reversed kernel
  const Tensor g = Tensor::from_data(Shape{2}, {1, 0});
  const Tensor w = Tensor::from_data(Shape{2}, {1, 2});
  const Tensor gx = adjoint_convolve(g, w, {Padding::Valid});
  REQUIRE(gx.shape() == Shape{3});
  CHECK(gx.at({0}) == doctest::Approx(1.0));
  CHECK(gx.at({1}) == doctest::Approx(2.0));
  CHECK(gx.at({2}) == doctest::Approx(0.0));

  // kernel of length 1: adjoint is the identity under every padding
  const Tensor one = Tensor::from_data(Shape{1}, {1});
  const Tensor any = Tensor::from_data(Shape{4}, {3, -1, 2, 5});
  for (Padding p : {Padding::Valid, Padding::Same, Padding::Full}) {
    const Tensor back = adjoint_convolve(any, one, {p});
    REQUIRE(back.shape() == any.shape());
    for (std::int64_t i = 0; i < 4; ++i) CHECK(back.flat(i) == any.flat(i));
  }

  CHECK_THROWS_AS(
      adjoint_convolve(Tensor::from_data(Shape{2}, {1, 2}),
                       Tensor::from_data(Shape{4}, {1, 2, 3, 4}),
                       {Padding::Full}),
      std::invalid_argument);
}

TEST_CASE("adjoint_convolve: bilinear adjoint identity, all modes") {
  Rng rng(201);
  for (Padding p : {Padding::Valid, Padding::Same, Padding::Full}) {
    for (ConvFlavor f : {ConvFlavor::Correlation, ConvFlavor::Convolution}) {
      const ConvMode mode{p, f};
      for (int rep = 0; rep < 100; ++rep) {
        const Tensor x = rt(rng, Shape{5});
        const Tensor w = rt(rng, Shape{3});
        const Tensor y = convolve(x, w, 0, 0, mode);
        const Tensor g = rt(rng, y.shape());
        const Tensor gx = adjoint_convolve(g, w, mode);
        REQUIRE(gx.shape() == x.shape());
        CHECK(inner(y, g) == doctest::Approx(inner(x, gx)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("vjp on matrix contraction is the textbook matmul rule") {
  Rng rng(202);
  const Tensor a = rt(rng, Shape{3, 4});
  const Tensor b = rt(rng, Shape{4, 5});
  const Tensor g = rt(rng, Shape{3, 5});
  const VjpResult r = vjp(OpContract{1, 0}, a, b, g);
  // grad_A = G B^T, grad_B = A^T G
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t p = 0; p < 4; ++p) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < 5; ++j) acc += g.at({i, j}) * b.at({p, j});
      CHECK(r.grad_a->at({i, p}) == doctest::Approx(acc).epsilon(1e-13));
    }
  for (std::int64_t p = 0; p < 4; ++p)
    for (std::int64_t j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < 3; ++i) acc += a.at({i, p}) * g.at({i, j});
      CHECK(r.grad_b->at({p, j}) == doctest::Approx(acc).epsilon(1e-13));
    }
}

TEST_CASE("vjp on the 1-D convolution hand example") {
  const Tensor a = Tensor::from_data(Shape{3}, {1, 2, 3});
  const Tensor b = Tensor::from_data(Shape{2}, {1, 1});
  const Tensor g = Tensor::from_data(Shape{2}, {1, 1});
  const VjpResult r = vjp(OpConvolve{0, 0, {Padding::Valid}}, a, b, g);
  REQUIRE(r.grad_a->shape() == Shape{3});
  CHECK(r.grad_a->at({0}) == doctest::Approx(1.0));
  CHECK(r.grad_a->at({1}) == doctest::Approx(2.0));
  CHECK(r.grad_a->at({2}) == doctest::Approx(1.0));
  REQUIRE(r.grad_b->shape() == Shape{2});
  CHECK(r.grad_b->at({0}) == doctest::Approx(3.0));
  CHECK(r.grad_b->at({1}) == doctest::Approx(5.0));
}

TEST_CASE("vjp on outer product: contraction closed form and a random case") {
  Rng rng(203);
  const Tensor a = rt(rng, Shape{3, 2});
  const Tensor b = rt(rng, Shape{2});
  check_vjp(OpOuter{}, a, b, rng);

  // scalar operand degenerates to scaling
  const Tensor s = Tensor::scalar(1.5);
  const Tensor g = rt(rng, Shape{3, 2});
  const VjpResult r = vjp(OpOuter{}, a, s, g);
  for (std::int64_t i = 0; i < a.numel(); ++i)
    CHECK(r.grad_a->flat(i) == doctest::Approx(1.5 * g.flat(i)));
  CHECK(r.grad_b->flat(0) == doctest::Approx(inner(g, a)));
}

TEST_CASE("vjp grad shape must match the op output shape") {
  Rng rng(204);
  const Tensor a = rt(rng, Shape{3, 4});
  const Tensor b = rt(rng, Shape{4, 5});
  CHECK_THROWS_WITH_AS(vjp(OpContract{1, 0}, a, b, rt(rng, Shape{3, 4})),
                       doctest::Contains("does not match"),
                       std::invalid_argument);
}

TEST_CASE("every primitive, every slot: vjp matches finite differences") {
  Rng rng(205);
  const auto rand_dims = [&](int order) {
    std::vector<std::int64_t> d(order);
    for (auto& v : d) v = 2 + rng.uniform_int(4);  // 2..5
    return d;
  };

  for (int rep = 0; rep < 20; ++rep) {
    // contraction
    {
      const int ma = 1 + static_cast<int>(rng.uniform_int(4));
      const int nb = 1 + static_cast<int>(rng.uniform_int(4));
      auto da = rand_dims(ma), db = rand_dims(nb);
      const int k = static_cast<int>(rng.uniform_int(ma));
      const int l = static_cast<int>(rng.uniform_int(nb));
      db[l] = da[k];
      check_vjp(OpContract{k, l}, rt(rng, Shape{std::move(da)}),
                rt(rng, Shape{std::move(db)}), rng);
    }
    // mode multiplication
    {
      const int ma = 1 + static_cast<int>(rng.uniform_int(4));
      auto da = rand_dims(ma);
      const int k = static_cast<int>(rng.uniform_int(ma));
      const std::int64_t j = 2 + rng.uniform_int(4);
      const Shape ms{da[k], j};
      check_vjp(OpMultiplyMode{k}, rt(rng, Shape{std::move(da)}),
                rt(rng, ms), rng);
    }
    // convolution, rotating through paddings and flavors
    {
      const int ma = 1 + static_cast<int>(rng.uniform_int(3));
      const int nb = 1 + static_cast<int>(rng.uniform_int(3));
      auto da = rand_dims(ma), db = rand_dims(nb);
      const int k = static_cast<int>(rng.uniform_int(ma));
      const int l = static_cast<int>(rng.uniform_int(nb));
      const Padding p = rep % 3 == 0   ? Padding::Valid
                        : rep % 3 == 1 ? Padding::Same
                                       : Padding::Full;
      const ConvFlavor f =
          rep % 2 ? ConvFlavor::Convolution : ConvFlavor::Correlation;
      if (p == Padding::Valid && db[l] > da[k]) std::swap(da[k], db[l]);
      check_vjp(OpConvolve{k, l, {p, f}}, rt(rng, Shape{std::move(da)}),
                rt(rng, Shape{std::move(db)}), rng);
    }
    // outer product
    {
      const int ma = 1 + static_cast<int>(rng.uniform_int(3));
      const int nb = 1 + static_cast<int>(rng.uniform_int(3));
      check_vjp(OpOuter{}, rt(rng, Shape{rand_dims(ma)}),
                rt(rng, Shape{rand_dims(nb)}), rng);
    }
    // partial outer product
    {
      const int ma = 1 + static_cast<int>(rng.uniform_int(3));
      const int nb = 1 + static_cast<int>(rng.uniform_int(3));
      auto da = rand_dims(ma), db = rand_dims(nb);
      const int k = static_cast<int>(rng.uniform_int(ma));
      const int l = static_cast<int>(rng.uniform_int(nb));
      db[l] = da[k];
      check_vjp(OpPartialOuter{k, l}, rt(rng, Shape{std::move(da)}),
                rt(rng, Shape{std::move(db)}), rng);
    }
  }
}

TEST_CASE("vjp of compound ops matches finite differences") {
  Rng rng(206);
  // mixed links: partial outer + convolution + contraction
  const Tensor a = rt(rng, Shape{3, 6, 4});
  const Tensor b = rt(rng, Shape{3, 4, 4});
  const CompoundSpec spec{{{LinkKind::PartialOuter, 0, 0, {}},
                           {LinkKind::Convolve, 1, 1, {Padding::Same}},
                           {LinkKind::Contract, 2, 2, {}}}};
  check_vjp(OpCompound{spec}, a, b, rng);

  // all-contract compound exercises the mirrored GEMM fast path
  const Tensor c = rt(rng, Shape{3, 4, 2});
  const Tensor d = rt(rng, Shape{4, 5, 3});
  const CompoundSpec spec2{
      {{LinkKind::Contract, 0, 2, {}}, {LinkKind::Contract, 1, 0, {}}}};
  check_vjp(OpCompound{spec2}, c, d, rng);
}

TEST_CASE("cost parity: contraction vjp multiplies equal the forward count") {
  Rng rng(207);
  const Tensor a = rt(rng, Shape{3, 5, 4});
  const Tensor b = rt(rng, Shape{2, 5, 6});
  const OpDesc op = OpContract{1, 1};
  const Tensor g = rt(rng, op_result_shape(op, a.shape(), b.shape()));

  std::uint64_t fwd;
  {
    kernels::CountScope s;
    apply_op(op, a, b);
    fwd = s.count();
  }
  {
    kernels::CountScope s;
    vjp(op, a, b, g, true, false);
    CHECK(s.count() == fwd);
  }
  {
    kernels::CountScope s;
    vjp(op, a, b, g, false, true);
    CHECK(s.count() == fwd);
  }

  // edge case: fully contracted vector operand takes the outer-product path
  const Tensor u = rt(rng, Shape{4, 7});
  const Tensor v = rt(rng, Shape{7});
  const OpDesc op2 = OpContract{1, 0};
  const Tensor g2 = rt(rng, Shape{4});
  std::uint64_t fwd2;
  {
    kernels::CountScope s;
    apply_op(op2, u, v);
    fwd2 = s.count();
  }
  for (const bool slot_a : {true, false}) {
    kernels::CountScope s;
    vjp(op2, u, v, g2, slot_a, !slot_a);
    CHECK(s.count() == fwd2);
  }
}

TEST_CASE("cost parity: convolution vjp stays within twice the forward") {
  Rng rng(208);
  for (Padding p : {Padding::Valid, Padding::Same, Padding::Full}) {
    const Tensor a = rt(rng, Shape{2, 7, 3});
    const Tensor b = rt(rng, Shape{4, 3});
    const OpDesc op = OpConvolve{1, 0, {p}};
    const Tensor g = rt(rng, op_result_shape(op, a.shape(), b.shape()));
    std::uint64_t fwd;
    {
      kernels::CountScope s;
      apply_op(op, a, b);
      fwd = s.count();
    }
    kernels::CountScope s;
    vjp(op, a, b, g);
    CHECK(s.count() <= 2 * fwd);
    CHECK(s.count() == 2 * fwd);  // each slot mirrors the forward pair count
  }
}

TEST_CASE("finite differences: closed-form sanity cases") {
  Rng rng(209);
  const Tensor x = rt(rng, Shape{3, 4});

  const Tensor g1 = finite_difference_grad(
      [](const Tensor& t) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < t.numel(); ++i) acc += t.flat(i);
        return acc;
      },
      x);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(g1.flat(i) == doctest::Approx(1.0).epsilon(1e-8));

  const Tensor g2 = finite_difference_grad(
      [](const Tensor& t) {
        return 0.5 * kernels::nrm2sq(t.data(), t.numel());
      },
      x);
  CHECK(rel_err(g2, x) < 1e-6);

  // || contract(x, b) ||^2 via the vjp path against finite differences
  const Tensor b = rt(rng, Shape{4, 5});
  const OpDesc op = OpContract{1, 0};
  const Tensor y = apply_op(op, x, b);
  const VjpResult r = vjp(op, x, b, scale(y, 2.0), true, false);
  const Tensor fd = finite_difference_grad(
      [&](const Tensor& t) {
        const Tensor z = apply_op(op, t, b);
        return kernels::nrm2sq(z.data(), z.numel());
      },
      x);
  CHECK(rel_err(*r.grad_a, fd) < 1e-5);

  CHECK_THROWS_AS(finite_difference_grad([](const Tensor&) { return 0.0; },
                                         x, 0.0),
                  std::invalid_argument);
}

TEST_CASE("tape: recorded values equal eager evaluation, nodes in order") {
  Rng rng(210);
  Tape tape;
  const Tensor a = rt(rng, Shape{2, 3});
  const Tensor b = rt(rng, Shape{3, 4});
  const ValueId ia = tape.leaf(a, true);
  const ValueId ib = tape.leaf(b, true);
  const ValueId iy = tape.apply(OpContract{1, 0}, ia, ib);
  CHECK(rel_err(tape.value(iy), contract(a, b, 1, 0)) == 0.0);

  const ValueId iz = tape.relu(iy);
  const ValueId iw = tape.scale(iz, 2.0);
  CHECK(tape.size() == 5);  // two leaves + three op nodes, execution order
  CHECK(iy < iz);
  CHECK(iz < iw);
}

TEST_CASE("tape: single-node backward equals the direct vjp") {
  Rng rng(211);
  const Tensor a = rt(rng, Shape{2, 4});
  const Tensor b = rt(rng, Shape{4, 3});
  const Tensor g = rt(rng, Shape{2, 3});
  Tape tape;
  const ValueId ia = tape.leaf(a, true);
  const ValueId ib = tape.leaf(b, true);
  const ValueId iy = tape.apply(OpContract{1, 0}, ia, ib);
  const GradMap gm = tape.backward(iy, g);
  const VjpResult r = vjp(OpContract{1, 0}, a, b, g);
  CHECK(rel_err(gm.at(ia), *r.grad_a) == 0.0);
  CHECK(rel_err(gm.at(ib), *r.grad_b) == 0.0);
}

TEST_CASE("tape: shared operand accumulates both slot contributions") {
  Rng rng(212);
  const Tensor x = rt(rng, Shape{3, 3});
  Tape tape;
  const ValueId ix = tape.leaf(x, true);
  const ValueId iy = tape.apply(OpContract{1, 0}, ix, ix);
  const Tensor w = rt(rng, tape.value(iy).shape());
  const GradMap gm = tape.backward(iy, w);
  const Tensor fd = finite_difference_grad(
      [&](const Tensor& t) { return inner(w, contract(t, t, 1, 0)); }, x);
  CHECK(rel_err(gm.at(ix), fd) < 1e-4);
}

TEST_CASE("tape: four chained factor contractions with relu, all gradients") {
  Rng rng(216);  // seed chosen so every pre-activation clears the relu kink
  const Tensor x = rt(rng, Shape{2, 3});
  const Tensor f1 = rt(rng, Shape{3, 4});
  const Tensor f2 = rt(rng, Shape{4, 3});
  const Tensor f3 = rt(rng, Shape{3, 4});
  const Tensor f4 = rt(rng, Shape{4, 2});

  Tape tape;
  const ValueId ix = tape.leaf(x, false);
  const ValueId i1 = tape.leaf(f1, true);
  const ValueId i2 = tape.leaf(f2, true);
  const ValueId i3 = tape.leaf(f3, true);
  const ValueId i4 = tape.leaf(f4, true);
  ValueId h = tape.apply(OpContract{1, 0}, ix, i1);
  // keep pre-activations away from the relu kink so finite differences are
  // trustworthy at eps = 1e-5
  CHECK(tape.value(h).max_abs() > 1e-3);
  h = tape.relu(h);
  h = tape.apply(OpContract{1, 0}, h, i2);
  h = tape.relu(h);
  h = tape.apply(OpContract{1, 0}, h, i3);
  h = tape.relu(h);
  h = tape.apply(OpContract{1, 0}, h, i4);
  const Tensor w = rt(rng, tape.value(h).shape());
  const GradMap gm = tape.backward(h, w);
  CHECK(!gm.contains(ix));  // input leaf was not flagged

  const auto wire = [&](const Tensor& g1, const Tensor& g2, const Tensor& g3,
                        const Tensor& g4) {
    Tensor v = contract(x, g1, 1, 0);
    v = relu(v);
    v = contract(v, g2, 1, 0);
    v = relu(v);
    v = contract(v, g3, 1, 0);
    v = relu(v);
    v = contract(v, g4, 1, 0);
    return inner(w, v);
  };
  // verify every pre-activation entry is safely away from the kink
  {
    Tensor v = contract(x, f1, 1, 0);
    CHECK(std::abs(v.flat(0)) > 0.0);
    double margin = 1e9;
    for (int stage = 0; stage < 3; ++stage) {
      for (std::int64_t i = 0; i < v.numel(); ++i)
        margin = std::min(margin, std::abs(v.flat(i)));
      v = contract(relu(v), stage == 0 ? f2 : stage == 1 ? f3 : f4, 1, 0);
    }
    REQUIRE(margin > 1e-3);
  }

  const Tensor fd1 = finite_difference_grad(
      [&](const Tensor& t) { return wire(t, f2, f3, f4); }, f1);
  const Tensor fd2 = finite_difference_grad(
      [&](const Tensor& t) { return wire(f1, t, f3, f4); }, f2);
  const Tensor fd3 = finite_difference_grad(
      [&](const Tensor& t) { return wire(f1, f2, t, f4); }, f3);
  const Tensor fd4 = finite_difference_grad(
      [&](const Tensor& t) { return wire(f1, f2, f3, t); }, f4);
  CHECK(rel_err(gm.at(i1), fd1) < 1e-5);
  CHECK(rel_err(gm.at(i2), fd2) < 1e-5);
  CHECK(rel_err(gm.at(i3), fd3) < 1e-5);
  CHECK(rel_err(gm.at(i4), fd4) < 1e-5);
}

TEST_CASE("tape: structural nodes (reshape, swapaxes, bias, add, scale)") {
  Rng rng(214);
  const Tensor x = rt(rng, Shape{2, 6});
  const Tensor bias = rt(rng, Shape{3});
  const Tensor other = rt(rng, Shape{4, 3});

  Tape tape;
  const ValueId ix = tape.leaf(x, true);
  const ValueId ibias = tape.leaf(bias, true);
  const ValueId iother = tape.leaf(other, true);
  ValueId h = tape.reshape(ix, Shape{4, 3});
  h = tape.add_bias(h, ibias, 1);
  h = tape.add(h, iother);
  h = tape.swapaxes(h, {1, 0});
  h = tape.scale(h, 0.5);
  const Tensor w = rt(rng, tape.value(h).shape());
  const GradMap gm = tape.backward(h, w);

  const auto wire = [&](const Tensor& tx, const Tensor& tb, const Tensor& to) {
    Tensor v = reshape(tx, Shape{4, 3});
    std::vector<double> d(v.data(), v.data() + v.numel());
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 3; ++j) d[i * 3 + j] += tb.at({j});
    v = add(Tensor::from_data(Shape{4, 3}, std::move(d)), to);
    v = swapaxes(v, {1, 0});
    return inner(w, scale(v, 0.5));
  };
  CHECK(rel_err(gm.at(ix), finite_difference_grad([&](const Tensor& t) {
          return wire(t, bias, other);
        }, x)) < 1e-6);
  CHECK(rel_err(gm.at(ibias), finite_difference_grad([&](const Tensor& t) {
          return wire(x, t, other);
        }, bias)) < 1e-6);
  CHECK(rel_err(gm.at(iother), finite_difference_grad([&](const Tensor& t) {
          return wire(x, bias, t);
        }, other)) < 1e-6);
}

TEST_CASE("tape: fan-out accumulates additively") {
  Rng rng(215);
  const Tensor x = rt(rng, Shape{3, 4});
  const Tensor b1 = rt(rng, Shape{4, 2});
  const Tensor b2 = rt(rng, Shape{4, 2});
  Tape tape;
  const ValueId ix = tape.leaf(x, true);
  const ValueId i1 = tape.leaf(b1, false);
  const ValueId i2 = tape.leaf(b2, false);
  const ValueId y1 = tape.apply(OpContract{1, 0}, ix, i1);
  const ValueId y2 = tape.apply(OpContract{1, 0}, ix, i2);
  const ValueId sum = tape.add(y1, y2);
  const Tensor w = rt(rng, tape.value(sum).shape());
  const GradMap gm = tape.backward(sum, w);
  const Tensor fd = finite_difference_grad(
      [&](const Tensor& t) {
        return inner(w, add(contract(t, b1, 1, 0), contract(t, b2, 1, 0)));
      },
      x);
  CHECK(rel_err(gm.at(ix), fd) < 1e-4);
}

TEST_CASE("tape: compound node, disconnected leaf, error paths") {
  Rng rng(216);
  const Tensor a = rt(rng, Shape{2, 5, 3});
  const Tensor b = rt(rng, Shape{2, 5, 4});
  const CompoundSpec spec{
      {{LinkKind::PartialOuter, 0, 0, {}}, {LinkKind::Contract, 1, 1, {}}}};

  Tape tape;
  const ValueId ia = tape.leaf(a, true);
  const ValueId ib = tape.leaf(b, true);
  const ValueId unused = tape.leaf(rt(rng, Shape{2, 2}), true);
  const ValueId iy = tape.apply(OpCompound{spec}, ia, ib);
  const Tensor w = rt(rng, tape.value(iy).shape());
  const GradMap gm = tape.backward(iy, w);

  const Tensor fda = finite_difference_grad(
      [&](const Tensor& t) { return inner(w, compound_apply(t, b, spec)); },
      a);
  const Tensor fdb = finite_difference_grad(
      [&](const Tensor& t) { return inner(w, compound_apply(a, t, spec)); },
      b);
  CHECK(rel_err(gm.at(ia), fda) < 1e-4);
  CHECK(rel_err(gm.at(ib), fdb) < 1e-4);

  // flagged but disconnected leaf still appears, with zeros
  REQUIRE(gm.contains(unused));
  CHECK(gm.at(unused).norm() == 0.0);

  CHECK_THROWS_WITH_AS(tape.backward(iy, rt(rng, Shape{2, 2})),
                       doctest::Contains("seed"), std::invalid_argument);
  CHECK_THROWS_AS(tape.value(99), std::invalid_argument);
  CHECK_THROWS_AS(gm.at(iy), std::invalid_argument);
}
