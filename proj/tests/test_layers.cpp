#include "tnn/layers.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tnn/autodiff.hpp"
#include "tnn/decompositions.hpp"
#include "tnn/kernels.hpp"
#include "tnn/ops.hpp"
#include "tnn/rng.hpp"
#include "tnn/tensor.hpp"

using namespace tnn;

namespace {

Tensor rt(Rng& rng, const Shape& s, double scale = 1.0) {
  return Tensor::random_uniform(s, rng, scale);
}

// Integer-valued tensor in [lo, hi]; sums and products of such entries are
// exact in double precision, so equality checks can be bitwise.
Tensor rint_tensor(Rng& rng, const Shape& s, int lo, int hi) {
  std::vector<double> data(static_cast<std::size_t>(s.numel()));
  for (double& v : data)
    v = static_cast<double>(lo + rng.uniform_int(hi - lo + 1));
  return Tensor::from_data(s, std::move(data));
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

double max_abs_diff(const Tensor& a, const Tensor& b) {
  return sub(a, b).max_abs();
}

double dot(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a.flat(i) * b.flat(i);
  return s;
}

Tensor identity_matrix(std::int64_t n) {
  std::vector<double> data(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    data[static_cast<std::size_t>(i * n + i)] = 1.0;
  return Tensor::from_data(Shape{n, n}, std::move(data));
}

// The standard layer holding the expanded kernel, on the same geometry.
Layer reference_layer(const Layer& layer) {
  Tensor kernel = expand_full_kernel(layer);
  if (is_conv_kind(layer.kind))
    return conv2d_layer_from_kernel(kernel, layer.conv.in_h, layer.conv.in_w,
                                    layer.conv.conv, layer.activation);
  return dense_layer_from_matrix(kernel, layer.activation);
}

// Forward through the factorized layer vs. the one-shot expanded kernel,
// with the flat <-> factored channel reshapes where the kinds differ.
double expansion_err(const Layer& layer, Rng& rng) {
  const Tensor u = rt(rng, input_shape(layer));
  const Tensor got = layer_forward(layer, u);
  const Layer ref = reference_layer(layer);
  const Tensor want = layer_forward(ref, reshape(u, input_shape(ref)));
  return rel_err(got, reshape(want, got.shape()));
}

std::int64_t ri(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + rng.uniform_int(hi - lo + 1);
}

ConvMode draw_conv_mode(int draw) {
  const Padding pads[3] = {Padding::Valid, Padding::Same, Padding::Full};
  return {pads[draw % 3],
          draw % 4 == 3 ? ConvFlavor::Convolution : ConvFlavor::Correlation};
}

ConvGeometry draw_conv_geometry(Rng& rng, int draw) {
  ConvGeometry g;
  g.filter_h = ri(rng, 1, 3);
  g.filter_w = ri(rng, 1, 3);
  g.in_h = g.filter_h + ri(rng, 1, 3);
  g.in_w = g.filter_w + ri(rng, 1, 3);
  g.in_channels = ri(rng, 1, 4);
  g.out_channels = ri(rng, 1, 4);
  g.conv = draw_conv_mode(draw);
  return g;
}

TensorizedGeometry draw_tensorized_geometry(Rng& rng, int draw) {
  const int m = 1 + draw % 3;
  TensorizedGeometry t;
  for (int l = 0; l < m; ++l) {
    t.in_dims.push_back(ri(rng, 1, 3));
    t.out_dims.push_back(ri(rng, 1, 3));
  }
  return t;
}

// Random geometry + ranks + factors for one kind; `draw` cycles the padding
// modes and flavors.
Layer random_layer(LayerKind kind, Rng& rng, int draw) {
  ConvGeometry cg;
  TensorizedGeometry tg;
  Ranks ranks;
  switch (kind) {
    case LayerKind::Dense:
      tg = {{ri(rng, 1, 5)}, {ri(rng, 1, 5)}};
      break;
    case LayerKind::Conv2d:
      cg = draw_conv_geometry(rng, draw);
      break;
    case LayerKind::SvdConv:
    case LayerKind::CpConv:
      cg = draw_conv_geometry(rng, draw);
      ranks.in = {ri(rng, 1, 3)};
      break;
    case LayerKind::TkConv:
      cg = draw_conv_geometry(rng, draw);
      ranks.in = {ri(rng, 1, cg.in_channels)};
      ranks.out = {ri(rng, 1, cg.out_channels)};
      break;
    case LayerKind::TtConv:
      cg = draw_conv_geometry(rng, draw);
      ranks.in = {ri(rng, 1, 3), ri(rng, 1, 3), ri(rng, 1, 3)};
      break;
    case LayerKind::RcpDense:
      tg = draw_tensorized_geometry(rng, draw);
      ranks.in = {ri(rng, 1, 3)};
      break;
    case LayerKind::RtkDense:
      tg = draw_tensorized_geometry(rng, draw);
      for (int l = 0; l < tg.order(); ++l) {
        ranks.in.push_back(ri(rng, 1, tg.in_dims[l]));
        ranks.out.push_back(ri(rng, 1, tg.out_dims[l]));
      }
      break;
    case LayerKind::RttDense:
      tg = draw_tensorized_geometry(rng, draw);
      for (int l = 0; l + 1 < tg.order(); ++l)
        ranks.in.push_back(ri(rng, 1, 3));
      break;
    case LayerKind::RcpConv:
      cg = draw_conv_geometry(rng, draw);
      tg = draw_tensorized_geometry(rng, draw);
      cg.in_channels = tg.in_total();
      cg.out_channels = tg.out_total();
      ranks.in = {ri(rng, 1, 3)};
      break;
    case LayerKind::RtkConv:
      cg = draw_conv_geometry(rng, draw);
      tg = draw_tensorized_geometry(rng, draw);
      cg.in_channels = tg.in_total();
      cg.out_channels = tg.out_total();
      for (int l = 0; l < tg.order(); ++l) {
        ranks.in.push_back(ri(rng, 1, tg.in_dims[l]));
        ranks.out.push_back(ri(rng, 1, tg.out_dims[l]));
      }
      break;
    case LayerKind::RttConv:
      cg = draw_conv_geometry(rng, draw);
      tg = draw_tensorized_geometry(rng, draw);
      cg.in_channels = tg.in_total();
      cg.out_channels = tg.out_total();
      for (int l = 0; l < tg.order(); ++l)
        ranks.in.push_back(ri(rng, 1, 3));
      break;
  }
  return make_layer(kind, cg, tg, ranks, rng);
}

// One small fixed layer per kind, for gradient and counter checks.
Layer small_layer(LayerKind kind, Rng& rng,
                  Padding padding = Padding::Valid) {
  ConvGeometry cg{2, 2, 2, 2, 3, 3, ConvMode{padding}};
  TensorizedGeometry tg;
  Ranks ranks;
  switch (kind) {
    case LayerKind::Dense:
      tg = {{3}, {2}};
      break;
    case LayerKind::Conv2d:
      break;
    case LayerKind::SvdConv:
    case LayerKind::CpConv:
      ranks.in = {2};
      break;
    case LayerKind::TkConv:
      ranks.in = {2};
      ranks.out = {2};
      break;
    case LayerKind::TtConv:
      ranks.in = {2, 2, 2};
      break;
    case LayerKind::RcpDense:
      tg = {{2, 3}, {3, 2}};
      ranks.in = {2};
      break;
    case LayerKind::RtkDense:
      tg = {{2, 3}, {3, 2}};
      ranks.in = {2, 2};
      ranks.out = {2, 2};
      break;
    case LayerKind::RttDense:
      tg = {{2, 2, 2}, {2, 2, 2}};
      ranks.in = {2, 2};
      break;
    case LayerKind::RcpConv:
      tg = {{2, 2}, {2, 2}};
      cg.in_channels = cg.out_channels = 4;
      ranks.in = {2};
      break;
    case LayerKind::RtkConv:
      tg = {{2, 2}, {2, 2}};
      cg.in_channels = cg.out_channels = 4;
      ranks.in = {2, 2};
      ranks.out = {2, 2};
      break;
    case LayerKind::RttConv:
      tg = {{2, 2}, {2, 2}};
      cg.in_channels = cg.out_channels = 4;
      ranks.in = {2, 2};
      break;
  }
  return make_layer(kind, cg, tg, ranks, rng);
}

constexpr LayerKind kAllKinds[] = {
    LayerKind::Dense,    LayerKind::Conv2d,   LayerKind::SvdConv,
    LayerKind::CpConv,   LayerKind::TkConv,   LayerKind::TtConv,
    LayerKind::RcpDense, LayerKind::RtkDense, LayerKind::RttDense,
    LayerKind::RcpConv,  LayerKind::RtkConv,  LayerKind::RttConv,
};

constexpr LayerKind kFactorizedKinds[] = {
    LayerKind::SvdConv,  LayerKind::CpConv,   LayerKind::TkConv,
    LayerKind::TtConv,   LayerKind::RcpDense, LayerKind::RtkDense,
    LayerKind::RttDense, LayerKind::RcpConv,  LayerKind::RtkConv,
    LayerKind::RttConv,
};

// Tape gradients for the input and every factor against central differences
// on the scalar loss <seed, forward(u)>.
void check_gradients(const Layer& layer, Rng& rng, double tol = 1e-4) {
  const Tensor u = rt(rng, input_shape(layer));
  const Tensor seed = rt(rng, output_shape(layer));
  const LayerTape recorded = record_forward(layer, u);
  const GradMap grads = layer_backward(layer, recorded, seed);

  const Tensor fd_in = finite_difference_grad(
      [&](const Tensor& x) { return dot(seed, layer_forward(layer, x)); }, u);
  CHECK(rel_err(grads.at(recorded.input), fd_in) < tol);

  for (std::size_t j = 0; j < layer.factors.size(); ++j) {
    const Tensor fd_factor = finite_difference_grad(
        [&](const Tensor& x) {
          Layer perturbed = layer;
          perturbed.factors[j] = x;
          return dot(seed, layer_forward(perturbed, u));
        },
        layer.factors[j]);
    CHECK(rel_err(grads.at(recorded.factors[j]), fd_factor) < tol);
  }
}

}  // namespace

TEST_CASE("layer kind names round-trip through the parser") {
  const char* names[] = {"dense",     "conv2d",    "svd-conv",  "cp-conv",
                         "tk-conv",   "tt-conv",   "rcp-dense", "rtk-dense",
                         "rtt-dense", "rcp-conv",  "rtk-conv",  "rtt-conv"};
  for (int i = 0; i < 12; ++i) {
    const LayerKind kind = static_cast<LayerKind>(i);
    CHECK(std::string(to_string(kind)) == names[i]);
    CHECK(parse_layer_kind(names[i]) == kind);
  }
  CHECK_THROWS_WITH_AS(parse_layer_kind("dens"),
                       doctest::Contains("unknown layer kind"),
                       std::invalid_argument);
  CHECK(is_factorized_kind(LayerKind::SvdConv));
  CHECK(!is_factorized_kind(LayerKind::Dense));
  CHECK(!is_factorized_kind(LayerKind::Conv2d));
  CHECK(is_conv_kind(LayerKind::RttConv));
  CHECK(!is_conv_kind(LayerKind::RttDense));
}

TEST_CASE("conv geometry output dims follow the padding mode") {
  ConvGeometry g{3, 2, 1, 1, 5, 4, ConvMode{Padding::Valid}};
  CHECK(g.out_h() == 3);
  CHECK(g.out_w() == 3);
  g.conv.padding = Padding::Same;
  CHECK(g.out_h() == 5);
  CHECK(g.out_w() == 4);
  g.conv.padding = Padding::Full;
  CHECK(g.out_h() == 7);
  CHECK(g.out_w() == 5);
}

TEST_CASE("factor shapes match the per-kind factorizations") {
  Layer svd;
  svd.kind = LayerKind::SvdConv;
  svd.conv = {3, 2, 4, 5, 6, 6};
  svd.ranks.in = {2};
  CHECK(factor_shapes(svd) ==
        std::vector<Shape>{Shape{3, 4, 2}, Shape{2, 2, 5}});

  Layer tt;
  tt.kind = LayerKind::TtConv;
  tt.conv = {3, 3, 4, 5, 6, 6};
  tt.ranks.in = {2, 3, 4};
  CHECK(factor_shapes(tt) == std::vector<Shape>{Shape{4, 2}, Shape{2, 3, 3},
                                                Shape{3, 3, 4}, Shape{4, 5}});

  Layer rtt;
  rtt.kind = LayerKind::RttDense;
  rtt.tens = {{2, 3, 4}, {4, 3, 2}};
  rtt.ranks.in = {5, 6};
  CHECK(factor_shapes(rtt) ==
        std::vector<Shape>{Shape{2, 4, 5}, Shape{5, 3, 3, 6}, Shape{6, 4, 2}});

  Layer rtt1;
  rtt1.kind = LayerKind::RttDense;
  rtt1.tens = {{7}, {4}};
  CHECK(factor_shapes(rtt1) == std::vector<Shape>{Shape{7, 4}});

  Layer rttc;
  rttc.kind = LayerKind::RttConv;
  rttc.conv = {3, 3, 6, 6, 8, 8};
  rttc.tens = {{2, 3}, {3, 2}};
  rttc.ranks.in = {2, 3};
  CHECK(factor_shapes(rttc) ==
        std::vector<Shape>{Shape{2, 3, 2}, Shape{2, 3, 2, 3}, Shape{3, 3, 3}});

  Layer rcpc;
  rcpc.kind = LayerKind::RcpConv;
  rcpc.conv = {2, 3, 6, 6, 8, 8};
  rcpc.tens = {{2, 3}, {3, 2}};
  rcpc.ranks.in = {4};
  CHECK(factor_shapes(rcpc) ==
        std::vector<Shape>{Shape{4, 2, 3}, Shape{4, 3, 2}, Shape{4, 2, 3}});

  Layer rtk;
  rtk.kind = LayerKind::RtkDense;
  rtk.tens = {{4, 5}, {5, 4}};
  rtk.ranks.in = {2, 3};
  rtk.ranks.out = {3, 2};
  CHECK(factor_shapes(rtk) ==
        std::vector<Shape>{Shape{4, 2}, Shape{5, 3}, Shape{2, 3, 3, 2},
                           Shape{3, 5}, Shape{2, 4}});
}

TEST_CASE("validation rejects structural mismatches") {
  Rng rng(7);
  Layer layer = small_layer(LayerKind::SvdConv, rng);

  Layer missing = layer;
  missing.factors.pop_back();
  CHECK_THROWS_WITH_AS(validate(missing), doctest::Contains("factor tensors"),
                       std::invalid_argument);

  Layer wrong = layer;
  wrong.factors[0] = Tensor::zeros(Shape{3, 2, 2});
  CHECK_THROWS_WITH_AS(validate(wrong), doctest::Contains("factor 0"),
                       std::invalid_argument);

  Layer bad_rank = layer;
  bad_rank.ranks.in = {0};
  CHECK_THROWS_WITH_AS(validate(bad_rank), doctest::Contains("must be >= 1"),
                       std::invalid_argument);

  Layer tk = small_layer(LayerKind::TkConv, rng);
  tk.ranks.in = {5};
  CHECK_THROWS_WITH_AS(validate(tk), doctest::Contains("exceeds"),
                       std::invalid_argument);

  Layer rtk = small_layer(LayerKind::RtkDense, rng);
  rtk.ranks.out = {4, 2};
  CHECK_THROWS_WITH_AS(validate(rtk), doctest::Contains("exceeds"),
                       std::invalid_argument);

  Layer rtt = small_layer(LayerKind::RttConv, rng);
  rtt.conv.in_channels = 5;
  CHECK_THROWS_WITH_AS(validate(rtt),
                       doctest::Contains("product of channel factors"),
                       std::invalid_argument);

  Layer dense = small_layer(LayerKind::Dense, rng);
  dense.tens = {{2, 2}, {2, 1}};
  CHECK_THROWS_WITH_AS(validate(dense), doctest::Contains("length 1"),
                       std::invalid_argument);

  Layer chain = small_layer(LayerKind::RttDense, rng);
  chain.ranks.in = {2};
  CHECK_THROWS_WITH_AS(validate(chain), doctest::Contains("ranks"),
                       std::invalid_argument);

  Layer ok = small_layer(LayerKind::Conv2d, rng);
  CHECK_THROWS_WITH_AS(layer_forward(ok, Tensor::zeros(Shape{3, 3, 3})),
                       doctest::Contains("does not match"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(expand_full_kernel(ok),
                       doctest::Contains("already holds"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(dense_forward(ok, Tensor::zeros(Shape{3})),
                       doctest::Contains("layer kind is"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      lowrank_conv_forward(small_layer(LayerKind::Dense, rng),
                           Tensor::zeros(Shape{3})),
      doctest::Contains("layer kind is"), std::invalid_argument);
}

TEST_CASE("dense layer is a plain matrix product") {
  const Tensor kernel =
      Tensor::from_data(Shape{2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  const Layer layer = dense_layer_from_matrix(kernel);
  const Tensor u = Tensor::from_data(Shape{2}, {1.0, 2.0});
  const Tensor v = dense_forward(layer, u);
  CHECK(v.shape() == Shape{3});
  CHECK(v.at({0}) == 9.0);
  CHECK(v.at({1}) == 12.0);
  CHECK(v.at({2}) == 15.0);

  // Weight gradient is the outer product of input and output gradient.
  const Tensor seed = Tensor::from_data(Shape{3}, {0.5, -1.0, 2.0});
  const LayerTape recorded = record_forward(layer, u);
  const GradMap grads = layer_backward(layer, recorded, seed);
  CHECK(max_abs_diff(grads.at(recorded.factors[0]), outer(u, seed)) == 0.0);

  // Zero output gradient propagates to all-zero gradients.
  const GradMap zero = layer_backward(layer, recorded, Tensor::zeros(Shape{3}));
  CHECK(zero.at(recorded.factors[0]).max_abs() == 0.0);
  CHECK(zero.at(recorded.input).max_abs() == 0.0);
}

TEST_CASE("1x1 convolution acts per pixel as a dense layer") {
  Rng rng(11);
  const std::int64_t x = 3, y = 3, s = 3, t = 2;
  const Tensor kernel = rint_tensor(rng, Shape{1, 1, s, t}, -3, 3);
  const Layer conv = conv2d_layer_from_kernel(kernel, x, y);
  const Layer dense = dense_layer_from_matrix(reshape(kernel, Shape{s, t}));
  const Tensor u = rint_tensor(rng, Shape{x, y, s}, -3, 3);
  const Tensor v = conv2d_forward(conv, u);
  REQUIRE(v.shape() == Shape{x, y, t});
  for (std::int64_t i = 0; i < x; ++i)
    for (std::int64_t j = 0; j < y; ++j) {
      std::vector<double> pixel;
      for (std::int64_t c = 0; c < s; ++c) pixel.push_back(u.at({i, j, c}));
      const Tensor out =
          dense_forward(dense, Tensor::from_data(Shape{s}, std::move(pixel)));
      for (std::int64_t c = 0; c < t; ++c)
        CHECK(v.at({i, j, c}) == out.at({c}));
    }
}

TEST_CASE("2x2 ones kernel over a 3x3 ones input sums each window") {
  const Layer layer =
      conv2d_layer_from_kernel(Tensor::ones(Shape{2, 2, 1, 1}), 3, 3);
  const Tensor v = conv2d_forward(layer, Tensor::ones(Shape{3, 3, 1}));
  REQUIRE(v.shape() == Shape{2, 2, 1});
  for (std::int64_t i = 0; i < v.numel(); ++i) CHECK(v.flat(i) == 4.0);
}

TEST_CASE("standard conv multiply count is HWST X'Y' and hits the counter") {
  Rng rng(13);
  const Layer layer = conv2d_layer_from_kernel(
      rt(rng, Shape{3, 3, 2, 3}), 5, 5, ConvMode{Padding::Valid});
  const std::uint64_t want = 3ull * 3 * 2 * 3 * 3 * 3;
  CHECK(forward_multiplies(layer) == want);
  const Tensor u = rt(rng, Shape{5, 5, 2});
  kernels::CountScope scope;
  conv2d_forward(layer, u);
  CHECK(scope.count() == want);
  const CostReport report = cost_report(layer, layer);
  CHECK(report.forward_multiplies == want);
  CHECK(report.parameter_count == 3 * 3 * 2 * 3);
  CHECK(report.compression_rate == 1.0);
}

TEST_CASE("every factorized kind matches its expanded kernel") {
  Rng rng(17);
  for (LayerKind kind : kFactorizedKinds) {
    INFO("kind ", to_string(kind));
    for (int draw = 0; draw < 10; ++draw) {
      const Layer layer = random_layer(kind, rng, draw);
      INFO("draw ", draw, ", input ", input_shape(layer).str());
      CHECK(expansion_err(layer, rng) < 1e-10);
    }
  }
}

TEST_CASE("svd-conv expansion equals the two-factor contraction formula") {
  Rng rng(19);
  const Layer layer = small_layer(LayerKind::SvdConv, rng);
  const Tensor want = swapaxes(
      contract(layer.factors[0], layer.factors[1], 2, 1), {0, 2, 1, 3});
  CHECK(max_abs_diff(expand_full_kernel(layer), want) == 0.0);
}

TEST_CASE("cp-conv with rank 1 still matches its expanded kernel") {
  Rng rng(23);
  ConvGeometry cg{3, 3, 4, 4, 5, 5};
  Layer layer = make_layer(LayerKind::CpConv, cg, {}, Ranks{{1}, {}}, rng);
  CHECK(expansion_err(layer, rng) < 1e-10);
}

TEST_CASE("rtt-conv on a 2x2 channel grid matches the expanded conv") {
  Rng rng(29);
  ConvGeometry cg{3, 3, 4, 4, 5, 5};
  TensorizedGeometry tg{{2, 2}, {2, 2}};
  Layer layer =
      make_layer(LayerKind::RttConv, cg, tg, Ranks{{2, 2}, {}}, rng);
  CHECK(expansion_err(layer, rng) < 1e-10);
  CHECK(param_count(layer) == 2 * 2 * 2 + 2 * 2 * 2 * 2 + 2 * 3 * 3);
}

TEST_CASE("order-1 tensorized conv kinds degenerate to flat-channel layers") {
  Rng rng(31);
  ConvGeometry cg{2, 2, 3, 4, 4, 4};
  TensorizedGeometry tg{{3}, {4}};
  for (LayerKind kind :
       {LayerKind::RcpConv, LayerKind::RtkConv, LayerKind::RttConv}) {
    Ranks ranks;
    ranks.in = {2};
    if (kind == LayerKind::RtkConv) ranks.out = {3};
    const Layer layer = make_layer(kind, cg, tg, ranks, rng);
    INFO("kind ", to_string(kind));
    CHECK(expansion_err(layer, rng) < 1e-10);
  }
}

TEST_CASE("documented intermediate shapes hold along the step lists") {
  Rng rng(37);

  // tk-conv: U0 in X x Y x Rs, U1 in X' x Y' x Rt.
  const Layer tk = small_layer(LayerKind::TkConv, rng);
  CHECK(step_shapes(tk) ==
        std::vector<Shape>{Shape{3, 3, 2}, Shape{2, 2, 2}, Shape{2, 2, 2}});

  // tt-conv: X x Y x Rs, then X' x Y x R, then X' x Y' x Rt.
  ConvGeometry cg{3, 3, 4, 4, 6, 5};
  Layer tt = make_layer(LayerKind::TtConv, cg, {}, Ranks{{2, 3, 2}, {}}, rng);
  CHECK(step_shapes(tt) ==
        std::vector<Shape>{Shape{6, 5, 2}, Shape{4, 5, 3}, Shape{4, 3, 2},
                           Shape{4, 3, 4}});

  // rcp-conv: every intermediate is (m + 3)-order with the rank mode first.
  const Layer rcp = small_layer(LayerKind::RcpConv, rng);
  const std::vector<Shape> shapes = step_shapes(rcp);
  const int m = rcp.tens.order();
  CHECK(shapes.front() == Shape{2, 3, 3, 2, 2});  // [R, X, Y, S_0, S_1]
  for (std::size_t i = 0; i + 1 < shapes.size(); ++i)
    CHECK(shapes[i].order() == m + 3);
  CHECK(shapes.back().order() == m + 2);
  CHECK(shapes.back() == output_shape(rcp));

  // Step counts per kind follow the cited multi-step passes.
  const std::size_t want_steps[] = {1, 1, 2, 3, 3, 4,
                                    static_cast<std::size_t>(m) + 2,
                                    2 * static_cast<std::size_t>(m) + 1,
                                    static_cast<std::size_t>(m),
                                    static_cast<std::size_t>(m) + 2,
                                    2 * static_cast<std::size_t>(m) + 1,
                                    static_cast<std::size_t>(m) + 1};
  for (int i = 0; i < 12; ++i) {
    const Layer layer = small_layer(kAllKinds[i], rng);
    // All small tensorized layers above use m == 2 except rtt-dense (m == 3).
    std::size_t want = want_steps[i];
    if (kAllKinds[i] == LayerKind::RttDense) want = 3;
    CHECK(forward_steps(layer).size() == want);
  }
}

TEST_CASE("rtk-dense expansion matches the Tucker reconstruction") {
  Rng rng(41);
  const Layer layer = small_layer(LayerKind::RtkDense, rng);
  const int m = layer.tens.order();
  TuckerFactors tucker;
  tucker.core = layer.factors[m];
  for (int l = 0; l < m; ++l)
    tucker.factors.push_back(swapaxes(layer.factors[l], {1, 0}));
  for (int l = 0; l < m; ++l)
    tucker.factors.push_back(layer.factors[m + 1 + l]);
  validate(tucker);
  const Tensor want =
      reshape(tucker_reconstruct(tucker),
              Shape{layer.tens.in_total(), layer.tens.out_total()});
  CHECK(max_abs_diff(expand_full_kernel(layer), want) == 0.0);
}

TEST_CASE("finite differences confirm every kind's gradients") {
  Rng rng(43);
  for (LayerKind kind : kAllKinds) {
    INFO("kind ", to_string(kind));
    check_gradients(small_layer(kind, rng), rng);
  }
  // Same-padding convolution exercises the offset adjoint path.
  check_gradients(small_layer(LayerKind::Conv2d, rng, Padding::Same), rng);
  check_gradients(small_layer(LayerKind::TtConv, rng, Padding::Full), rng);
}

TEST_CASE("zero output gradient yields zero gradients everywhere") {
  Rng rng(47);
  const Layer layer = small_layer(LayerKind::RttConv, rng);
  const Tensor u = rt(rng, input_shape(layer));
  const LayerTape recorded = record_forward(layer, u);
  const GradMap grads =
      layer_backward(layer, recorded, Tensor::zeros(output_shape(layer)));
  CHECK(grads.at(recorded.input).max_abs() == 0.0);
  for (ValueId id : recorded.factors) CHECK(grads.at(id).max_abs() == 0.0);
}

TEST_CASE("a dense layer embeds exactly into an rtt-dense chain") {
  Rng rng(53);
  const std::int64_t s0 = 2, s1 = 3, t = 4;
  const Tensor w = rint_tensor(rng, Shape{s0 * s1, t}, -3, 3);
  const Layer dense = dense_layer_from_matrix(w);

  // First core passes the input through untouched (identity on S_0, output
  // factor 1); the second carries the full dense matrix.
  Layer chain;
  chain.kind = LayerKind::RttDense;
  chain.tens = {{s0, s1}, {1, t}};
  chain.ranks.in = {s0};
  std::vector<double> delta(static_cast<std::size_t>(s0 * s0), 0.0);
  for (std::int64_t i = 0; i < s0; ++i)
    delta[static_cast<std::size_t>(i * s0 + i)] = 1.0;
  chain.factors.push_back(
      Tensor::from_data(Shape{s0, 1, s0}, std::move(delta)));
  chain.factors.push_back(reshape(w, Shape{s0, s1, t}));
  validate(chain);

  const Tensor u = rint_tensor(rng, Shape{s0 * s1}, -3, 3);
  const Tensor got =
      tensorized_dense_forward(chain, reshape(u, Shape{s0, s1}));
  const Tensor want = dense_forward(dense, u);
  CHECK(max_abs_diff(reshape(got, Shape{t}), want) == 0.0);
}

TEST_CASE("order-1 rtt-dense degenerates to the plain dense layer") {
  Rng rng(59);
  const Tensor w = rt(rng, Shape{5, 3});
  Layer chain;
  chain.kind = LayerKind::RttDense;
  chain.tens = {{5}, {3}};
  chain.factors.push_back(w);
  validate(chain);
  const Tensor u = rt(rng, Shape{5});
  CHECK(max_abs_diff(tensorized_dense_forward(chain, u),
                     dense_forward(dense_layer_from_matrix(w), u)) == 0.0);
}

TEST_CASE("multiply counts equal the instrumented counter for every kind") {
  Rng rng(61);
  for (LayerKind kind : kAllKinds) {
    INFO("kind ", to_string(kind));
    const Layer layer = small_layer(kind, rng);
    const Tensor u = rt(rng, input_shape(layer));

    // Independent re-sum of the per-step cost model.
    const std::vector<LayerStep> steps = forward_steps(layer);
    const std::vector<Shape> inter = step_shapes(layer);
    const std::vector<Shape> factors = factor_shapes(layer);
    auto shape_of = [&](StepArg arg) -> Shape {
      switch (arg.source) {
        case StepArg::Source::Input:
          return input_shape(layer);
        case StepArg::Source::Factor:
          return factors[arg.index];
        case StepArg::Source::Ones:
          return Shape{layer.ranks.in[0]};
        case StepArg::Source::Step:
          return inter[arg.index];
      }
      return Shape{};
    };
    std::uint64_t want = 0;
    for (const LayerStep& s : steps)
      want += op_cost(s.op, shape_of(s.a), shape_of(s.b)).multiplies;

    CHECK(forward_multiplies(layer) == want);
    kernels::CountScope scope;
    layer_forward(layer, u);
    CHECK(scope.count() == want);
  }

  // The activation adds no multiplies.
  Layer relu_layer = small_layer(LayerKind::Dense, rng);
  relu_layer.activation = Activation::Relu;
  const Tensor u = rt(rng, Shape{3});
  kernels::CountScope scope;
  layer_forward(relu_layer, u);
  CHECK(scope.count() == forward_multiplies(relu_layer));
}

TEST_CASE("cost reports reproduce the documented parameter counts") {
  Rng rng(67);
  ConvGeometry cg{3, 3, 16, 16, 8, 8};
  const Layer conv = make_layer(LayerKind::Conv2d, cg, {}, {}, rng);
  CHECK(param_count(conv) == 2304);  // H W S T

  const Layer svd = make_layer(LayerKind::SvdConv, cg, {}, Ranks{{4}, {}}, rng);
  CHECK(param_count(svd) == 384);  // H S R + W R T
  const CostReport report = cost_report(svd, conv);
  CHECK(report.parameter_count == 384);
  CHECK(report.compression_rate == 384.0 / 2304.0);

  TensorizedGeometry tg{{4, 4}, {4, 4}};
  const Layer rtt =
      make_layer(LayerKind::RttDense, {}, tg, Ranks{{3}, {}}, rng);
  CHECK(param_count(rtt) == 96);  // S0 T0 R0 + R0 S1 T1
  const Layer dense16 =
      make_layer(LayerKind::Dense, {}, {{16}, {16}}, {}, rng);
  CHECK(cost_report(rtt, dense16).compression_rate == 96.0 / 256.0);

  TensorizedGeometry tg2{{2, 3}, {4, 5}};
  const Layer rcp =
      make_layer(LayerKind::RcpDense, {}, tg2, Ranks{{3}, {}}, rng);
  CHECK(param_count(rcp) == 3 * 2 * 4 + 3 * 3 * 5);
}

TEST_CASE("identity-initialized factors expand to a channel delta") {
  const std::int64_t s = 3;
  Layer layer;
  layer.kind = LayerKind::CpConv;
  layer.conv = {1, 1, s, s, 4, 4};
  layer.ranks.in = {s};
  layer.factors = {identity_matrix(s), Tensor::ones(Shape{1, 1, s}),
                   identity_matrix(s)};
  validate(layer);
  const Tensor kernel = expand_full_kernel(layer);
  REQUIRE(kernel.shape() == Shape{1, 1, s, s});
  for (std::int64_t i = 0; i < s; ++i)
    for (std::int64_t j = 0; j < s; ++j)
      CHECK(kernel.at({0, 0, i, j}) == (i == j ? 1.0 : 0.0));

  // The expanded kernel is a 1x1 delta, so the layer maps inputs unchanged.
  Rng rng(71);
  const Tensor u = rt(rng, Shape{4, 4, s});
  CHECK(max_abs_diff(lowrank_conv_forward(layer, u), u) < 1e-15);
}

TEST_CASE("relu applies only after the full linear pass") {
  // Identity weights make the pre-activations equal the input, so the layer
  // output is relu(input) exactly, and the input gradient is the mask.
  Layer layer = dense_layer_from_matrix(identity_matrix(2));
  layer.activation = Activation::Relu;
  const Tensor u = Tensor::from_data(Shape{2}, {1.0, -2.0});
  const Tensor v = dense_forward(layer, u);
  CHECK(v.at({0}) == 1.0);
  CHECK(v.at({1}) == 0.0);

  const LayerTape recorded = record_forward(layer, u);
  const GradMap grads =
      layer_backward(layer, recorded, Tensor::ones(Shape{2}));
  CHECK(grads.at(recorded.input).at({0}) == 1.0);
  CHECK(grads.at(recorded.input).at({1}) == 0.0);

  // Pre-activations sit at +-1 or beyond, far from the kink, so central
  // differences are safe here.
  Rng rng(73);
  check_gradients(layer, rng);

  // A factorized kind with relu still matches relu of its expanded layer.
  Layer rtk = small_layer(LayerKind::RtkConv, rng);
  rtk.activation = Activation::Relu;
  CHECK(expansion_err(rtk, rng) < 1e-10);
}

TEST_CASE("recorded forward equals the eager forward bitwise") {
  Rng rng(79);
  for (LayerKind kind : {LayerKind::CpConv, LayerKind::RcpDense,
                         LayerKind::RttConv}) {
    const Layer layer = small_layer(kind, rng);
    const Tensor u = rt(rng, input_shape(layer));
    const LayerTape recorded = record_forward(layer, u);
    CHECK(max_abs_diff(recorded.tape.value(recorded.output),
                       layer_forward(layer, u)) == 0.0);
  }
}

TEST_CASE("factor initialization scales with the contracted fan-in") {
  Rng rng(83);
  ConvGeometry cg{3, 3, 4, 5, 6, 6};
  const Layer conv = make_layer(LayerKind::Conv2d, cg, {}, {}, rng);
  CHECK(conv.factors[0].max_abs() <= 1.0 / 6.0);  // 1/sqrt(HWS) = 1/6
  CHECK(conv.factors[0].max_abs() > 0.0);

  const Layer svd = make_layer(LayerKind::SvdConv, cg, {}, Ranks{{2}, {}}, rng);
  CHECK(svd.factors[0].max_abs() <= 1.0 / std::sqrt(3.0 * 4.0));  // HS
  CHECK(svd.factors[1].max_abs() <= 1.0 / std::sqrt(3.0 * 2.0));  // WR

  TensorizedGeometry tg{{2, 2}, {2, 2}};
  ConvGeometry cg2{2, 2, 4, 4, 5, 5};
  const Layer rcp =
      make_layer(LayerKind::RcpConv, cg2, tg, Ranks{{3}, {}}, rng);
  // The spatial factor is contracted over R, H and W in its step.
  CHECK(rcp.factors[2].max_abs() <= 1.0 / std::sqrt(3.0 * 2.0 * 2.0));
  // The channel factors contract only their S_l.
  CHECK(rcp.factors[0].max_abs() <= 1.0 / std::sqrt(2.0));
}
