#include "tnn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tnn/autodiff.hpp"
#include "tnn/common.hpp"
#include "tnn/decompositions.hpp"
#include "tnn/kernels.hpp"
#include "tnn/layers.hpp"
#include "tnn/ops.hpp"
#include "tnn/rng.hpp"
#include "tnn/tensor.hpp"

namespace tnn {

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a.flat(i) * b.flat(i);
  return s;
}

// || got - want || / max(1, || want ||)
double rel_err(const Tensor& got, const Tensor& want) {
  if (!(got.shape() == want.shape()))
    fail("verify: shape mismatch ", got.shape().str(), " vs. ",
         want.shape().str());
  double num = 0.0, den = 0.0;
  for (std::int64_t i = 0; i < got.numel(); ++i) {
    const double d = got.flat(i) - want.flat(i);
    num += d * d;
    den += want.flat(i) * want.flat(i);
  }
  return std::sqrt(num) / std::max(1.0, std::sqrt(den));
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

Tensor rt(Rng& rng, const Shape& s) {
  return Tensor::random_uniform(s, rng, 1.0);
}

const std::vector<LayerKind> kAllKinds = {
    LayerKind::Dense,    LayerKind::Conv2d,   LayerKind::SvdConv,
    LayerKind::CpConv,   LayerKind::TkConv,   LayerKind::TtConv,
    LayerKind::RcpDense, LayerKind::RtkDense, LayerKind::RttDense,
    LayerKind::RcpConv,  LayerKind::RtkConv,  LayerKind::RttConv};

// Small fixed geometries, one per kind, for the layer-level properties.
Layer small_layer(LayerKind kind, Rng& rng) {
  const ConvGeometry cg{2, 2, 2, 2, 3, 3, {}};
  const ConvGeometry cg4{2, 2, 4, 4, 3, 3, {}};
  const TensorizedGeometry tg{{2, 2}, {2, 2}};
  switch (kind) {
    case LayerKind::Dense:
      return make_layer(kind, {}, {{3}, {2}}, {}, rng);
    case LayerKind::Conv2d:
      return make_layer(kind, cg, {}, {}, rng);
    case LayerKind::SvdConv:
    case LayerKind::CpConv:
      return make_layer(kind, cg, {}, {{2}, {}}, rng);
    case LayerKind::TkConv:
      return make_layer(kind, cg, {}, {{2}, {2}}, rng);
    case LayerKind::TtConv:
      return make_layer(kind, cg, {}, {{2, 2, 2}, {}}, rng);
    case LayerKind::RcpDense:
    case LayerKind::RttDense:
      return make_layer(kind, {}, tg, {{2}, {}}, rng);
    case LayerKind::RtkDense:
      return make_layer(kind, {}, tg, {{2, 2}, {2, 2}}, rng);
    case LayerKind::RcpConv:
      return make_layer(kind, cg4, tg, {{2}, {}}, rng);
    case LayerKind::RtkConv:
      return make_layer(kind, cg4, tg, {{2, 2}, {2, 2}}, rng);
    case LayerKind::RttConv:
      return make_layer(kind, cg4, tg, {{2, 2}, {}}, rng);
  }
  fail("verify: unhandled layer kind");
}

// FD check of one binary op recorded on a tape: gradients of <seed, op(a,b)>
// with respect to both operands. Returns the larger relative error.
double op_gradcheck(const OpDesc& op, const Tensor& a, const Tensor& b,
                    Rng& rng) {
  Tape tape;
  const ValueId ia = tape.leaf(a, /*requires_grad=*/true);
  const ValueId ib = tape.leaf(b, /*requires_grad=*/true);
  const ValueId out = tape.apply(op, ia, ib);
  const Tensor seed = rt(rng, tape.value(out).shape());
  const GradMap gm = tape.backward(out, seed);

  const Tensor fd_a = finite_difference_grad(
      [&](const Tensor& x) { return dot(apply_op(op, x, b), seed); }, a);
  const Tensor fd_b = finite_difference_grad(
      [&](const Tensor& x) { return dot(apply_op(op, a, x), seed); }, b);
  return std::max(rel_err(gm.at(ia), fd_a), rel_err(gm.at(ib), fd_b));
}

// FD check of a layer forward: gradients of <seed, layer(u)> with respect to
// the input and every factor.
double layer_gradcheck(const Layer& layer, Rng& rng) {
  const Tensor u = rt(rng, input_shape(layer));
  const LayerTape rec = record_forward(layer, u);
  const Tensor seed = rt(rng, rec.tape.value(rec.output).shape());
  const GradMap gm = rec.tape.backward(rec.output, seed);

  double worst = rel_err(
      gm.at(rec.input),
      finite_difference_grad(
          [&](const Tensor& x) { return dot(layer_forward(layer, x), seed); },
          u));
  for (std::size_t j = 0; j < layer.factors.size(); ++j) {
    auto loss = [&](const Tensor& x) {
      Layer probe = layer;
      probe.factors[j] = x;
      return dot(layer_forward(probe, u), seed);
    };
    worst = std::max(worst,
                     rel_err(gm.at(rec.factors[j]),
                             finite_difference_grad(loss, layer.factors[j])));
  }
  return worst;
}

using PropertyFn = std::function<std::string()>;  // returns detail, throws on fail

PropertyResult run_property(const std::string& name, const PropertyFn& body) {
  PropertyResult r;
  r.name = name;
  try {
    r.detail = body();
    r.pass = true;
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = e.what();
  }
  return r;
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(what);
}

// ---- gradcheck suite ----

void add_gradcheck(std::vector<PropertyResult>& out) {
  out.push_back(run_property("gradcheck.contract", [] {
    Rng rng(101);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
      const Tensor a = rt(rng, Shape{2 + c % 3, 3, 2});
      const Tensor b = rt(rng, Shape{4, 3});
      worst = std::max(worst, op_gradcheck(OpContract{1, 1}, a, b, rng));
    }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "20 cases, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("gradcheck.multiply_mode", [] {
    Rng rng(102);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
      const Tensor t = rt(rng, Shape{2, 3, 4});
      const Tensor m = rt(rng, Shape{3, 2 + c % 3});
      worst = std::max(worst, op_gradcheck(OpMultiplyMode{1}, t, m, rng));
    }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "20 cases, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("gradcheck.convolve", [] {
    Rng rng(103);
    const Padding pads[3] = {Padding::Valid, Padding::Same, Padding::Full};
    double worst = 0.0;
    for (int c = 0; c < 24; ++c) {
      const ConvMode mode{pads[c % 3], c % 2 == 0 ? ConvFlavor::Correlation
                                                  : ConvFlavor::Convolution};
      const Tensor a = rt(rng, Shape{2, 5});
      const Tensor b = rt(rng, Shape{2 + c % 2, 3});
      worst = std::max(worst, op_gradcheck(OpConvolve{1, 1, mode}, a, b, rng));
    }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "24 padding/flavor cases, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("gradcheck.outer", [] {
    Rng rng(104);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
      const Tensor a = rt(rng, Shape{2, 3});
      const Tensor b = rt(rng, Shape{2 + c % 3});
      worst = std::max(worst, op_gradcheck(OpOuter{}, a, b, rng));
    }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "20 cases, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("gradcheck.partial_outer", [] {
    Rng rng(105);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
      const Tensor a = rt(rng, Shape{3, 2 + c % 3});
      const Tensor b = rt(rng, Shape{4, 3});
      worst = std::max(worst, op_gradcheck(OpPartialOuter{0, 1}, a, b, rng));
    }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "20 cases, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("gradcheck.compound", [] {
    Rng rng(106);
    double worst = 0.0;
    for (int c = 0; c < 10; ++c) {
      // Contraction plus a shared surviving mode.
      CompoundSpec spec1;
      spec1.links = {{LinkKind::Contract, 0, 0, {}},
                     {LinkKind::PartialOuter, 1, 1, {}}};
      const Tensor a1 = rt(rng, Shape{3, 2 + c % 2, 4});
      const Tensor b1 = rt(rng, Shape{3, 2 + c % 2});
      worst = std::max(worst, op_gradcheck(OpCompound{spec1}, a1, b1, rng));
      // Contraction plus a fiber convolution.
      CompoundSpec spec2;
      spec2.links = {{LinkKind::Contract, 0, 0, {}},
                     {LinkKind::Convolve, 1, 1,
                      {c % 2 ? Padding::Same : Padding::Full,
                       ConvFlavor::Correlation}}};
      const Tensor a2 = rt(rng, Shape{3, 4});
      const Tensor b2 = rt(rng, Shape{3, 2});
      worst = std::max(worst, op_gradcheck(OpCompound{spec2}, a2, b2, rng));
    }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "20 two-link cases, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("gradcheck.layers", [] {
    Rng rng(107);
    double worst = 0.0;
    for (LayerKind kind : kAllKinds)
      for (int c = 0; c < 20; ++c) {
        Layer layer = small_layer(kind, rng);
        if (c % 2 == 1) layer.activation = Activation::Relu;
        worst = std::max(worst, layer_gradcheck(layer, rng));
      }
    require(worst < 1e-4, "max rel err " + fmt(worst));
    return "12 kinds x 20 draws, max rel err " + fmt(worst);
  }));
}

// ---- equivalence suite ----

void add_equivalence(std::vector<PropertyResult>& out) {
  out.push_back(run_property("equivalence.contract_matmul", [] {
    Rng rng(201);
    const Tensor a = rt(rng, Shape{4, 3});
    const Tensor b = rt(rng, Shape{3, 5});
    const Tensor got = contract(a, b, 1, 0);
    double worst = 0.0;
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 5; ++j) {
        double want = 0.0;
        for (std::int64_t k = 0; k < 3; ++k)
          want += a.at({i, k}) * b.at({k, j});
        worst = std::max(worst, std::abs(got.at({i, j}) - want));
      }
    require(worst < 1e-12, "max abs diff " + fmt(worst));
    return "max abs diff " + fmt(worst);
  }));
  out.push_back(run_property("equivalence.multiply_mode_identity", [] {
    Rng rng(202);
    const Tensor t = rt(rng, Shape{3, 4, 2});
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 4 + i)] = 1.0;
    const Tensor got =
        multiply_mode(t, Tensor::from_data(Shape{4, 4}, eye), 1);
    const double worst = sub(got, t).max_abs();
    require(worst < 1e-15, "max abs diff " + fmt(worst));
    return "max abs diff " + fmt(worst);
  }));
  out.push_back(run_property("equivalence.unit_convolution", [] {
    Rng rng(203);
    const Tensor a = rt(rng, Shape{3, 5});
    const Tensor unit = Tensor::ones(Shape{1});
    double worst = 0.0;
    for (Padding p : {Padding::Valid, Padding::Same, Padding::Full})
      worst = std::max(
          worst, sub(convolve(a, unit, 1, 0, {p, ConvFlavor::Correlation}), a)
                     .max_abs());
    require(worst < 1e-15, "max abs diff " + fmt(worst));
    return "max abs diff " + fmt(worst);
  }));
  out.push_back(run_property("equivalence.outer_rank_one", [] {
    Rng rng(204);
    const Tensor u = rt(rng, Shape{4});
    const Tensor v = rt(rng, Shape{3});
    const Tensor got = outer(u, v);
    double worst = 0.0;
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 3; ++j)
        worst = std::max(worst,
                         std::abs(got.at({i, j}) - u.flat(i) * v.flat(j)));
    require(worst < 1e-15, "max abs diff " + fmt(worst));
    return "max abs diff " + fmt(worst);
  }));
  out.push_back(run_property("equivalence.compound_oracle", [] {
    Rng rng(205);
    double worst = 0.0;
    {  // double contraction == elementwise product sum
      const Tensor a = rt(rng, Shape{2, 3});
      const Tensor b = rt(rng, Shape{2, 3});
      CompoundSpec spec;
      spec.links = {{LinkKind::Contract, 0, 0, {}},
                    {LinkKind::Contract, 1, 1, {}}};
      const Tensor got = compound_apply(a, b, spec);
      double want = 0.0;
      for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 3; ++j) want += a.at({i, j}) * b.at({i, j});
      worst = std::max(worst, std::abs(got.flat(0) - want));
    }
    {  // contraction + valid fiber correlation
      const Tensor a = rt(rng, Shape{2, 4});
      const Tensor b = rt(rng, Shape{2, 3});
      CompoundSpec spec;
      spec.links = {{LinkKind::Contract, 0, 0, {}},
                    {LinkKind::Convolve, 1, 1, {}}};
      const Tensor got = compound_apply(a, b, spec);
      for (std::int64_t k = 0; k < 2; ++k) {
        double want = 0.0;
        for (std::int64_t i = 0; i < 2; ++i)
          for (std::int64_t j = 0; j < 3; ++j)
            want += a.at({i, k + j}) * b.at({i, j});
        worst = std::max(worst, std::abs(got.flat(k) - want));
      }
    }
    {  // contraction + shared surviving mode
      const Tensor a = rt(rng, Shape{3, 2});
      const Tensor b = rt(rng, Shape{3, 2});
      CompoundSpec spec;
      spec.links = {{LinkKind::Contract, 0, 0, {}},
                    {LinkKind::PartialOuter, 1, 1, {}}};
      const Tensor got = compound_apply(a, b, spec);
      for (std::int64_t p = 0; p < 2; ++p) {
        double want = 0.0;
        for (std::int64_t i = 0; i < 3; ++i) want += a.at({i, p}) * b.at({i, p});
        worst = std::max(worst, std::abs(got.flat(p) - want));
      }
    }
    {  // a single contract link reduces to the primitive
      const Tensor a = rt(rng, Shape{3, 4});
      const Tensor b = rt(rng, Shape{2, 4});
      CompoundSpec spec;
      spec.links = {{LinkKind::Contract, 1, 1, {}}};
      worst = std::max(
          worst, sub(compound_apply(a, b, spec), contract(a, b, 1, 1)).max_abs());
    }
    require(worst < 1e-12, "max abs diff " + fmt(worst));
    return "4 nested-loop cases, max abs diff " + fmt(worst);
  }));
  out.push_back(run_property("equivalence.layer_expansion", [] {
    Rng rng(206);
    double worst = 0.0;
    for (LayerKind kind : kAllKinds) {
      if (!is_factorized_kind(kind)) continue;
      for (int c = 0; c < 3; ++c) {
        const Layer layer = small_layer(kind, rng);
        const Tensor kernel = expand_full_kernel(layer);
        const Layer ref =
            is_conv_kind(kind)
                ? conv2d_layer_from_kernel(kernel, layer.conv.in_h,
                                           layer.conv.in_w, layer.conv.conv)
                : dense_layer_from_matrix(kernel);
        const Tensor u = rt(rng, input_shape(layer));
        const Tensor got = layer_forward(layer, u);
        const Tensor want =
            layer_forward(ref, reshape(u, input_shape(ref)));
        worst = std::max(worst, rel_err(got, reshape(want, got.shape())));
      }
    }
    require(worst < 1e-10, "max rel err " + fmt(worst));
    return "10 kinds x 3 draws, max rel err " + fmt(worst);
  }));
  out.push_back(run_property("equivalence.conv_adjoint", [] {
    Rng rng(207);
    double worst = 0.0;
    for (Padding p : {Padding::Valid, Padding::Same, Padding::Full})
      for (ConvFlavor f : {ConvFlavor::Correlation, ConvFlavor::Convolution}) {
        const ConvMode mode{p, f};
        const Tensor x = rt(rng, Shape{6});
        const Tensor k = rt(rng, Shape{3});
        const Tensor y = convolve(x, k, 0, 0, mode);
        const Tensor g = rt(rng, y.shape());
        const double lhs = dot(y, g);
        const double rhs = dot(x, adjoint_convolve(g, k, mode));
        worst = std::max(worst, std::abs(lhs - rhs));
      }
    require(worst < 1e-12, "max abs diff " + fmt(worst));
    return "6 padding/flavor cases, max abs diff " + fmt(worst);
  }));
}

// ---- decomposition suite ----

void add_decomposition(std::vector<PropertyResult>& out) {
  out.push_back(run_property("decomposition.tt_full_rank", [] {
    Rng rng(301);
    const Tensor t = rt(rng, Shape{3, 4, 2, 3});
    const TtResult r = tt_decompose(t, {3, 6, 3});
    require(r.relative_error < 1e-10, "rel err " + fmt(r.relative_error));
    return "rel err " + fmt(r.relative_error);
  }));
  out.push_back(run_property("decomposition.tucker_full_rank", [] {
    Rng rng(302);
    const Tensor t = rt(rng, Shape{3, 4, 2});
    const TuckerResult r = tucker_decompose(t, {3, 4, 2});
    require(r.relative_error < 1e-10, "rel err " + fmt(r.relative_error));
    return "rel err " + fmt(r.relative_error);
  }));
  out.push_back(run_property("decomposition.cp_rank_one", [] {
    Rng rng(303);
    const Tensor u = rt(rng, Shape{3});
    const Tensor v = rt(rng, Shape{4});
    const Tensor w = rt(rng, Shape{2});
    const Tensor t = outer(outer(u, v), w);
    const CpResult r = cp_decompose(t, 1);
    require(r.relative_error < 1e-8, "rel err " + fmt(r.relative_error));
    return "rel err " + fmt(r.relative_error);
  }));
  out.push_back(run_property("decomposition.monotone_sweeps", [] {
    Rng rng(304);
    const Tensor t = rt(rng, Shape{4, 3, 3});
    const CpResult cp = cp_decompose(t, 3);
    for (std::size_t i = 1; i < cp.sweep_errors.size(); ++i)
      require(cp.sweep_errors[i] <= cp.sweep_errors[i - 1] + 1e-12,
              "ALS sweep " + std::to_string(i) + " rose");
    const TuckerResult tk = tucker_decompose(t, {2, 2, 2});
    for (std::size_t i = 1; i < tk.sweep_errors.size(); ++i)
      require(tk.sweep_errors[i] <= tk.sweep_errors[i - 1] + 1e-12,
              "HOOI sweep " + std::to_string(i) + " rose");
    return "ALS " + std::to_string(cp.sweep_errors.size()) + " sweeps, HOOI " +
           std::to_string(tk.sweep_errors.size()) + " sweeps, non-increasing";
  }));
}

// ---- flops suite ----

void add_flops(std::vector<PropertyResult>& out) {
  out.push_back(run_property("flops.primitive_costs", [] {
    Rng rng(401);
    int cases = 0;
    auto check = [&](const OpDesc& op, const Tensor& a, const Tensor& b) {
      const CostEstimate est = op_cost(op, a.shape(), b.shape());
      kernels::CountScope scope;
      apply_op(op, a, b);
      if (scope.count() != est.multiplies)
        fail("op ", cases, ": predicted ", est.multiplies, " multiplies (",
             est.formula, "), counted ", scope.count());
      ++cases;
    };
    check(OpContract{1, 0}, rt(rng, Shape{3, 4}), rt(rng, Shape{4, 5}));
    check(OpMultiplyMode{1}, rt(rng, Shape{2, 3, 4}), rt(rng, Shape{3, 5}));
    for (Padding p : {Padding::Valid, Padding::Same, Padding::Full})
      check(OpConvolve{1, 1, {p, ConvFlavor::Correlation}},
            rt(rng, Shape{2, 5}), rt(rng, Shape{2, 3}));
    check(OpOuter{}, rt(rng, Shape{3, 2}), rt(rng, Shape{4}));
    check(OpPartialOuter{0, 1}, rt(rng, Shape{3, 2}), rt(rng, Shape{4, 3}));
    {
      CompoundSpec spec;
      spec.links = {{LinkKind::Contract, 0, 0, {}},
                    {LinkKind::Convolve, 1, 1, {}}};
      check(OpCompound{spec}, rt(rng, Shape{2, 4}), rt(rng, Shape{2, 3}));
    }
    return std::to_string(cases) + " primitives, counters equal exactly";
  }));
  out.push_back(run_property("flops.layer_costs", [] {
    Rng rng(402);
    for (LayerKind kind : kAllKinds)
      for (int c = 0; c < 2; ++c) {
        const Layer layer = small_layer(kind, rng);
        const Tensor u = rt(rng, input_shape(layer));
        kernels::CountScope scope;
        layer_forward(layer, u);
        if (scope.count() != forward_multiplies(layer))
          fail(to_string(kind), ": predicted ", forward_multiplies(layer),
               " multiplies, counted ", scope.count());
      }
    return "12 kinds x 2 draws, counters equal exactly";
  }));
  out.push_back(run_property("flops.conv_param_count", [] {
    Rng rng(403);
    const ConvGeometry cg{3, 2, 4, 5, 6, 6, {}};
    const Layer layer = make_layer(LayerKind::Conv2d, cg, {}, {}, rng);
    const std::int64_t want = 3 * 2 * 4 * 5;
    if (param_count(layer) != want)
      fail("conv2d params ", param_count(layer), ", want HWST = ", want);
    return "conv2d params = HWST = " + std::to_string(want);
  }));
}

}  // namespace

std::vector<PropertyResult> run_verify_suite(const std::string& suite) {
  std::vector<PropertyResult> out;
  bool known = false;
  if (suite == "gradcheck" || suite == "all") {
    add_gradcheck(out);
    known = true;
  }
  if (suite == "equivalence" || suite == "all") {
    add_equivalence(out);
    known = true;
  }
  if (suite == "decomposition" || suite == "all") {
    add_decomposition(out);
    known = true;
  }
  if (suite == "flops" || suite == "all") {
    add_flops(out);
    known = true;
  }
  if (!known)
    fail("unknown verify suite \"", suite,
         "\" (gradcheck | equivalence | decomposition | flops | all)");
  return out;
}

}  // namespace tnn
