#include "tnn/layers.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "tnn/common.hpp"

namespace tnn {
namespace {

constexpr const char* kKindNames[] = {
    "dense",     "conv2d",    "svd-conv",  "cp-conv",
    "tk-conv",   "tt-conv",   "rcp-dense", "rtk-dense",
    "rtt-dense", "rcp-conv",  "rtk-conv",  "rtt-conv",
};

bool is_dense_kind(LayerKind kind) {
  return kind == LayerKind::Dense || kind == LayerKind::RcpDense ||
         kind == LayerKind::RtkDense || kind == LayerKind::RttDense;
}

bool is_tensorized_conv_kind(LayerKind kind) {
  return kind == LayerKind::RcpConv || kind == LayerKind::RtkConv ||
         kind == LayerKind::RttConv;
}

bool needs_ones(LayerKind kind) {
  return kind == LayerKind::RcpDense || kind == LayerKind::RcpConv;
}

LinkSpec contract_link(int a, int b) {
  return {LinkKind::Contract, a, b, {}};
}

LinkSpec conv_link(int a, int b, ConvMode mode) {
  return {LinkKind::Convolve, a, b, mode};
}

LinkSpec pouter_link(int a, int b) {
  return {LinkKind::PartialOuter, a, b, {}};
}

OpDesc compound_op(std::vector<LinkSpec> links) {
  return OpCompound{CompoundSpec{std::move(links)}};
}

// Rank-count and bound checks shared by factor_shapes and validate.
void check_structure(const Layer& layer) {
  const TensorizedGeometry& tg = layer.tens;
  const ConvGeometry& cg = layer.conv;
  const Ranks& rk = layer.ranks;
  const char* name = to_string(layer.kind);

  auto want_ranks = [&](std::size_t n_in, std::size_t n_out) {
    if (rk.in.size() != n_in || rk.out.size() != n_out)
      fail(name, ": expected ", n_in, "+", n_out, " ranks, got ",
           rk.in.size(), "+", rk.out.size());
    for (std::int64_t r : rk.in)
      if (r < 1) fail(name, ": rank ", r, " must be >= 1");
    for (std::int64_t r : rk.out)
      if (r < 1) fail(name, ": rank ", r, " must be >= 1");
  };

  if (is_conv_kind(layer.kind)) {
    if (cg.filter_h < 1 || cg.filter_w < 1 || cg.in_channels < 1 ||
        cg.out_channels < 1 || cg.in_h < 1 || cg.in_w < 1)
      fail(name, ": conv geometry dims must be >= 1");
    if (conv_out_len(cg.in_h, cg.filter_h, cg.conv.padding) < 1 ||
        conv_out_len(cg.in_w, cg.filter_w, cg.conv.padding) < 1)
      fail(name, ": output spatial dims must be >= 1 (valid padding needs "
                 "input >= filter)");
  }
  if (is_dense_kind(layer.kind) || is_tensorized_conv_kind(layer.kind)) {
    if (tg.in_dims.empty() || tg.in_dims.size() != tg.out_dims.size())
      fail(name, ": channel factor lists must be non-empty and equally long, "
                 "got ", tg.in_dims.size(), " and ", tg.out_dims.size());
    for (std::int64_t d : tg.in_dims)
      if (d < 1) fail(name, ": channel factor dim ", d, " must be >= 1");
    for (std::int64_t d : tg.out_dims)
      if (d < 1) fail(name, ": channel factor dim ", d, " must be >= 1");
  }
  if (is_tensorized_conv_kind(layer.kind)) {
    if (cg.in_channels != tg.in_total())
      fail(name, ": input channels ", cg.in_channels,
           " != product of channel factors ", tg.in_total());
    if (cg.out_channels != tg.out_total())
      fail(name, ": output channels ", cg.out_channels,
           " != product of channel factors ", tg.out_total());
  }

  const std::size_t m = tg.in_dims.size();
  switch (layer.kind) {
    case LayerKind::Dense:
      if (m != 1) fail("dense: channel factor lists must have length 1");
      want_ranks(0, 0);
      break;
    case LayerKind::Conv2d:
      want_ranks(0, 0);
      break;
    case LayerKind::SvdConv:
    case LayerKind::CpConv:
      want_ranks(1, 0);
      break;
    case LayerKind::TkConv:
      want_ranks(1, 1);
      if (rk.in[0] > cg.in_channels)
        fail(name, ": rank ", rk.in[0], " exceeds input channels ",
             cg.in_channels);
      if (rk.out[0] > cg.out_channels)
        fail(name, ": rank ", rk.out[0], " exceeds output channels ",
             cg.out_channels);
      break;
    case LayerKind::TtConv:
      want_ranks(3, 0);
      break;
    case LayerKind::RcpDense:
    case LayerKind::RcpConv:
      want_ranks(1, 0);
      break;
    case LayerKind::RtkDense:
    case LayerKind::RtkConv:
      want_ranks(m, m);
      for (std::size_t l = 0; l < m; ++l) {
        if (rk.in[l] > tg.in_dims[l])
          fail(name, ": rank ", rk.in[l], " exceeds channel factor ",
               tg.in_dims[l]);
        if (rk.out[l] > tg.out_dims[l])
          fail(name, ": rank ", rk.out[l], " exceeds channel factor ",
               tg.out_dims[l]);
      }
      break;
    case LayerKind::RttDense:
      want_ranks(m - 1, 0);
      break;
    case LayerKind::RttConv:
      want_ranks(m, 0);
      break;
  }
}

// swapaxes permutation turning the interleaved chain order
// [S_0, T_0, ..., S_{m-1}, T_{m-1}] into [S_0..S_{m-1}, T_0..T_{m-1}].
std::vector<int> interleave_perm(int m) {
  std::vector<int> perm(2 * m);
  for (int i = 0; i < m; ++i) {
    perm[i] = 2 * i;
    perm[m + i] = 2 * i + 1;
  }
  return perm;
}

// Same, with the two spatial modes moved from the back to the front:
// [S_0, T_0, ..., S_{m-1}, T_{m-1}, H, W] -> [H, W, S_0.., T_0..].
std::vector<int> spatial_perm(int m) {
  std::vector<int> perm(2 * m + 2);
  perm[0] = 2 * m;
  perm[1] = 2 * m + 1;
  for (int i = 0; i < m; ++i) {
    perm[2 + i] = 2 * i;
    perm[2 + m + i] = 2 * i + 1;
  }
  return perm;
}

Tensor transpose2(const Tensor& t) { return swapaxes(t, {1, 0}); }

}  // namespace

const char* to_string(LayerKind kind) {
  return kKindNames[static_cast<int>(kind)];
}

LayerKind parse_layer_kind(const std::string& name) {
  for (int i = 0; i < 12; ++i)
    if (name == kKindNames[i]) return static_cast<LayerKind>(i);
  fail("parse_layer_kind: unknown layer kind \"", name, "\"");
}

bool is_conv_kind(LayerKind kind) {
  return !is_dense_kind(kind);
}

bool is_factorized_kind(LayerKind kind) {
  return kind != LayerKind::Dense && kind != LayerKind::Conv2d;
}

std::int64_t ConvGeometry::out_h() const {
  return conv_out_len(in_h, filter_h, conv.padding);
}

std::int64_t ConvGeometry::out_w() const {
  return conv_out_len(in_w, filter_w, conv.padding);
}

std::int64_t TensorizedGeometry::in_total() const {
  std::int64_t n = 1;
  for (std::int64_t d : in_dims) n *= d;
  return n;
}

std::int64_t TensorizedGeometry::out_total() const {
  std::int64_t n = 1;
  for (std::int64_t d : out_dims) n *= d;
  return n;
}

std::vector<Shape> factor_shapes(const Layer& layer) {
  check_structure(layer);
  const ConvGeometry& cg = layer.conv;
  const TensorizedGeometry& tg = layer.tens;
  const std::vector<std::int64_t>& rin = layer.ranks.in;
  const std::vector<std::int64_t>& rout = layer.ranks.out;
  const int m = tg.order();
  std::vector<Shape> shapes;

  switch (layer.kind) {
    case LayerKind::Dense:
      shapes.push_back(Shape{tg.in_dims[0], tg.out_dims[0]});
      break;
    case LayerKind::Conv2d:
      shapes.push_back(Shape{cg.filter_h, cg.filter_w, cg.in_channels,
                             cg.out_channels});
      break;
    case LayerKind::SvdConv:
      shapes.push_back(Shape{cg.filter_h, cg.in_channels, rin[0]});
      shapes.push_back(Shape{cg.filter_w, rin[0], cg.out_channels});
      break;
    case LayerKind::CpConv:
      shapes.push_back(Shape{cg.in_channels, rin[0]});
      shapes.push_back(Shape{cg.filter_h, cg.filter_w, rin[0]});
      shapes.push_back(Shape{rin[0], cg.out_channels});
      break;
    case LayerKind::TkConv:
      shapes.push_back(Shape{cg.in_channels, rin[0]});
      shapes.push_back(Shape{cg.filter_h, cg.filter_w, rin[0], rout[0]});
      shapes.push_back(Shape{rout[0], cg.out_channels});
      break;
    case LayerKind::TtConv:
      shapes.push_back(Shape{cg.in_channels, rin[0]});
      shapes.push_back(Shape{rin[0], cg.filter_h, rin[1]});
      shapes.push_back(Shape{rin[1], cg.filter_w, rin[2]});
      shapes.push_back(Shape{rin[2], cg.out_channels});
      break;
    case LayerKind::RcpDense:
      for (int l = 0; l < m; ++l)
        shapes.push_back(Shape{rin[0], tg.in_dims[l], tg.out_dims[l]});
      break;
    case LayerKind::RtkDense:
    case LayerKind::RtkConv: {
      for (int l = 0; l < m; ++l)
        shapes.push_back(Shape{tg.in_dims[l], rin[l]});
      std::vector<std::int64_t> core;
      if (layer.kind == LayerKind::RtkConv) {
        core.push_back(cg.filter_h);
        core.push_back(cg.filter_w);
      }
      core.insert(core.end(), rin.begin(), rin.end());
      core.insert(core.end(), rout.begin(), rout.end());
      shapes.push_back(Shape(core));
      for (int l = 0; l < m; ++l)
        shapes.push_back(Shape{rout[l], tg.out_dims[l]});
      break;
    }
    case LayerKind::RttDense:
      if (m == 1) {
        shapes.push_back(Shape{tg.in_dims[0], tg.out_dims[0]});
        break;
      }
      shapes.push_back(Shape{tg.in_dims[0], tg.out_dims[0], rin[0]});
      for (int l = 1; l + 1 < m; ++l)
        shapes.push_back(
            Shape{rin[l - 1], tg.in_dims[l], tg.out_dims[l], rin[l]});
      shapes.push_back(
          Shape{rin[m - 2], tg.in_dims[m - 1], tg.out_dims[m - 1]});
      break;
    case LayerKind::RcpConv:
      for (int l = 0; l < m; ++l)
        shapes.push_back(Shape{rin[0], tg.in_dims[l], tg.out_dims[l]});
      shapes.push_back(Shape{rin[0], cg.filter_h, cg.filter_w});
      break;
    case LayerKind::RttConv:
      shapes.push_back(Shape{tg.in_dims[0], tg.out_dims[0], rin[0]});
      for (int l = 1; l < m; ++l)
        shapes.push_back(
            Shape{rin[l - 1], tg.in_dims[l], tg.out_dims[l], rin[l]});
      shapes.push_back(Shape{rin[m - 1], cg.filter_h, cg.filter_w});
      break;
  }
  return shapes;
}

void validate(const Layer& layer) {
  const std::vector<Shape> want = factor_shapes(layer);
  if (layer.factors.size() != want.size())
    fail(to_string(layer.kind), ": expected ", want.size(),
         " factor tensors, got ", layer.factors.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    if (layer.factors[i].shape() != want[i])
      fail(to_string(layer.kind), ": factor ", i, " has shape ",
           layer.factors[i].shape().str(), ", expected ", want[i].str());
}

Shape input_shape(const Layer& layer) {
  check_structure(layer);
  if (is_dense_kind(layer.kind)) return Shape(layer.tens.in_dims);
  std::vector<std::int64_t> dims{layer.conv.in_h, layer.conv.in_w};
  if (is_tensorized_conv_kind(layer.kind))
    dims.insert(dims.end(), layer.tens.in_dims.begin(),
                layer.tens.in_dims.end());
  else
    dims.push_back(layer.conv.in_channels);
  return Shape(dims);
}

Shape output_shape(const Layer& layer) {
  check_structure(layer);
  if (is_dense_kind(layer.kind)) return Shape(layer.tens.out_dims);
  std::vector<std::int64_t> dims{layer.conv.out_h(), layer.conv.out_w()};
  if (is_tensorized_conv_kind(layer.kind))
    dims.insert(dims.end(), layer.tens.out_dims.begin(),
                layer.tens.out_dims.end());
  else
    dims.push_back(layer.conv.out_channels);
  return Shape(dims);
}

std::vector<LayerStep> forward_steps(const Layer& layer) {
  check_structure(layer);
  const ConvMode cm = layer.conv.conv;
  const int m = layer.tens.order();
  std::vector<LayerStep> steps;
  StepArg cur = arg_input();
  auto push = [&](OpDesc op, StepArg a, StepArg b) {
    steps.push_back({std::move(op), a, b});
    cur = arg_step(static_cast<int>(steps.size()) - 1);
  };

  switch (layer.kind) {
    case LayerKind::Dense:
      push(OpContract{0, 0}, cur, arg_factor(0));
      break;
    case LayerKind::Conv2d:
      push(compound_op({conv_link(0, 0, cm), conv_link(1, 1, cm),
                        contract_link(2, 2)}),
           cur, arg_factor(0));
      break;
    case LayerKind::SvdConv:
      push(compound_op({conv_link(0, 0, cm), contract_link(2, 1)}), cur,
           arg_factor(0));
      push(compound_op({conv_link(1, 0, cm), contract_link(2, 1)}), cur,
           arg_factor(1));
      break;
    case LayerKind::CpConv:
      push(OpMultiplyMode{2}, cur, arg_factor(0));
      push(compound_op({conv_link(0, 0, cm), conv_link(1, 1, cm),
                        pouter_link(2, 2)}),
           cur, arg_factor(1));
      push(OpMultiplyMode{2}, cur, arg_factor(2));
      break;
    case LayerKind::TkConv:
      push(OpMultiplyMode{2}, cur, arg_factor(0));
      push(compound_op({conv_link(0, 0, cm), conv_link(1, 1, cm),
                        contract_link(2, 2)}),
           cur, arg_factor(1));
      push(OpMultiplyMode{2}, cur, arg_factor(2));
      break;
    case LayerKind::TtConv:
      push(OpMultiplyMode{2}, cur, arg_factor(0));
      push(compound_op({conv_link(0, 1, cm), contract_link(2, 0)}), cur,
           arg_factor(1));
      push(compound_op({conv_link(1, 1, cm), contract_link(2, 0)}), cur,
           arg_factor(2));
      push(OpMultiplyMode{2}, cur, arg_factor(3));
      break;
    case LayerKind::RcpDense:
      push(OpOuter{}, arg_ones(), cur);
      for (int l = 0; l < m; ++l)
        push(compound_op({pouter_link(0, 0), contract_link(1, 1)}), cur,
             arg_factor(l));
      push(OpContract{0, 0}, arg_ones(), cur);
      break;
    case LayerKind::RtkDense: {
      for (int l = 0; l < m; ++l)
        push(OpMultiplyMode{l}, cur, arg_factor(l));
      std::vector<LinkSpec> links;
      for (int l = 0; l < m; ++l) links.push_back(contract_link(l, l));
      push(compound_op(std::move(links)), cur, arg_factor(m));
      for (int l = 0; l < m; ++l)
        push(OpMultiplyMode{l}, cur, arg_factor(m + 1 + l));
      break;
    }
    case LayerKind::RttDense:
      push(OpContract{0, 0}, cur, arg_factor(0));
      // Intermediates keep order m + 1: [S_l.., T_0..T_{l-1}, R_{l-1}] with
      // the carried rank mode last.
      for (int l = 1; l < m; ++l)
        push(compound_op({contract_link(0, 1), contract_link(m, 0)}), cur,
             arg_factor(l));
      break;
    case LayerKind::RcpConv:
      push(OpOuter{}, arg_ones(), cur);
      for (int l = 0; l < m; ++l)
        push(compound_op({pouter_link(0, 0), contract_link(3, 1)}), cur,
             arg_factor(l));
      push(compound_op({contract_link(0, 0), conv_link(1, 1, cm),
                        conv_link(2, 2, cm)}),
           cur, arg_factor(m));
      break;
    case LayerKind::RtkConv: {
      for (int l = 0; l < m; ++l)
        push(OpMultiplyMode{2 + l}, cur, arg_factor(l));
      std::vector<LinkSpec> links{conv_link(0, 0, cm), conv_link(1, 1, cm)};
      for (int l = 0; l < m; ++l)
        links.push_back(contract_link(2 + l, 2 + l));
      push(compound_op(std::move(links)), cur, arg_factor(m));
      for (int l = 0; l < m; ++l)
        push(OpMultiplyMode{2 + l}, cur, arg_factor(m + 1 + l));
      break;
    }
    case LayerKind::RttConv:
      push(OpContract{2, 0}, cur, arg_factor(0));
      // Intermediates keep order m + 3: [X, Y, S_l.., T_0..T_{l-1}, R_{l-1}]
      // with the carried rank mode last (index m + 2).
      for (int l = 1; l < m; ++l)
        push(compound_op({contract_link(2, 1), contract_link(m + 2, 0)}), cur,
             arg_factor(l));
      push(compound_op({conv_link(0, 1, cm), conv_link(1, 2, cm),
                        contract_link(m + 2, 0)}),
           cur, arg_factor(m));
      break;
  }
  return steps;
}

std::vector<Shape> step_shapes(const Layer& layer) {
  const std::vector<LayerStep> steps = forward_steps(layer);
  const std::vector<Shape> factors = factor_shapes(layer);
  const Shape in = input_shape(layer);
  std::vector<Shape> shapes;
  auto shape_of = [&](StepArg arg) -> Shape {
    switch (arg.source) {
      case StepArg::Source::Input:
        return in;
      case StepArg::Source::Factor:
        return factors[arg.index];
      case StepArg::Source::Ones:
        return Shape{layer.ranks.in[0]};
      case StepArg::Source::Step:
        return shapes[arg.index];
    }
    fail("step_shapes: bad step source");
  };
  for (const LayerStep& s : steps)
    shapes.push_back(op_result_shape(s.op, shape_of(s.a), shape_of(s.b)));
  return shapes;
}

void init_factors(Layer& layer, Rng& rng) {
  const std::vector<Shape> shapes = factor_shapes(layer);
  std::vector<double> fan(shapes.size(), 1.0);
  for (const LayerStep& s : forward_steps(layer)) {
    if (s.b.source != StepArg::Source::Factor) continue;
    const Shape& fs = shapes[s.b.index];
    double p = 1.0;
    if (const auto* c = std::get_if<OpContract>(&s.op)) {
      p *= static_cast<double>(fs.dim(c->l));
    } else if (std::holds_alternative<OpMultiplyMode>(s.op)) {
      p *= static_cast<double>(fs.dim(0));
    } else if (const auto* v = std::get_if<OpConvolve>(&s.op)) {
      p *= static_cast<double>(fs.dim(v->l));
    } else if (const auto* comp = std::get_if<OpCompound>(&s.op)) {
      for (const LinkSpec& link : comp->spec.links)
        if (link.kind != LinkKind::PartialOuter)
          p *= static_cast<double>(fs.dim(link.mode_b));
    }
    fan[s.b.index] = p;
  }
  layer.factors.clear();
  for (std::size_t i = 0; i < shapes.size(); ++i)
    layer.factors.push_back(
        Tensor::random_uniform(shapes[i], rng, 1.0 / std::sqrt(fan[i])));
}

Layer make_layer(LayerKind kind, ConvGeometry conv, TensorizedGeometry tens,
                 Ranks ranks, Rng& rng, Activation activation) {
  Layer layer{kind, std::move(conv), std::move(tens), std::move(ranks), {},
              activation};
  init_factors(layer, rng);
  validate(layer);
  return layer;
}

Layer dense_layer_from_matrix(Tensor kernel, Activation activation) {
  if (kernel.order() != 2)
    fail("dense_layer_from_matrix: kernel must be a matrix, got order ",
         kernel.order());
  Layer layer;
  layer.kind = LayerKind::Dense;
  layer.tens = {{kernel.dim(0)}, {kernel.dim(1)}};
  layer.factors.push_back(std::move(kernel));
  layer.activation = activation;
  return layer;
}

Layer conv2d_layer_from_kernel(Tensor kernel, std::int64_t in_h,
                               std::int64_t in_w, ConvMode mode,
                               Activation activation) {
  if (kernel.order() != 4)
    fail("conv2d_layer_from_kernel: kernel must have order 4, got ",
         kernel.order());
  Layer layer;
  layer.kind = LayerKind::Conv2d;
  layer.conv = {kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3),
                in_h,          in_w,          mode};
  layer.factors.push_back(std::move(kernel));
  layer.activation = activation;
  validate(layer);
  return layer;
}

namespace {

void check_input(const Layer& layer, const Tensor& u) {
  const Shape want = input_shape(layer);
  if (u.shape() != want)
    fail(to_string(layer.kind), ": input shape ", u.shape().str(),
         " does not match the layer's ", want.str());
}

void check_kind(const Layer& layer, std::initializer_list<LayerKind> kinds,
                const char* fn) {
  for (LayerKind k : kinds)
    if (layer.kind == k) return;
  fail(fn, ": layer kind is ", to_string(layer.kind));
}

}  // namespace

Tensor layer_forward(const Layer& layer, const Tensor& u) {
  validate(layer);
  check_input(layer, u);
  const std::vector<LayerStep> steps = forward_steps(layer);
  Tensor ones = needs_ones(layer.kind) ? Tensor::ones(Shape{layer.ranks.in[0]})
                                       : Tensor::scalar(0.0);
  std::vector<Tensor> values;
  values.reserve(steps.size());
  auto resolve = [&](StepArg arg) -> const Tensor& {
    switch (arg.source) {
      case StepArg::Source::Input:
        return u;
      case StepArg::Source::Factor:
        return layer.factors[arg.index];
      case StepArg::Source::Ones:
        return ones;
      case StepArg::Source::Step:
        return values[arg.index];
    }
    fail("layer_forward: bad step source");
  };
  for (const LayerStep& s : steps)
    values.push_back(apply_op(s.op, resolve(s.a), resolve(s.b)));
  Tensor out = values.back();
  if (layer.activation == Activation::Relu) out = relu(out);
  return out;
}

Tensor dense_forward(const Layer& layer, const Tensor& u) {
  check_kind(layer, {LayerKind::Dense}, "dense_forward");
  return layer_forward(layer, u);
}

Tensor conv2d_forward(const Layer& layer, const Tensor& u) {
  check_kind(layer, {LayerKind::Conv2d}, "conv2d_forward");
  return layer_forward(layer, u);
}

Tensor lowrank_conv_forward(const Layer& layer, const Tensor& u) {
  check_kind(layer,
             {LayerKind::SvdConv, LayerKind::CpConv, LayerKind::TkConv,
              LayerKind::TtConv},
             "lowrank_conv_forward");
  return layer_forward(layer, u);
}

Tensor tensorized_dense_forward(const Layer& layer, const Tensor& u) {
  check_kind(layer,
             {LayerKind::RcpDense, LayerKind::RtkDense, LayerKind::RttDense},
             "tensorized_dense_forward");
  return layer_forward(layer, u);
}

Tensor tensorized_conv_forward(const Layer& layer, const Tensor& u) {
  check_kind(layer,
             {LayerKind::RcpConv, LayerKind::RtkConv, LayerKind::RttConv},
             "tensorized_conv_forward");
  return layer_forward(layer, u);
}

ValueId record_forward_on(const Layer& layer, Tape& tape, ValueId input,
                          std::vector<ValueId>& factor_ids) {
  validate(layer);
  check_input(layer, tape.value(input));
  const std::vector<LayerStep> steps = forward_steps(layer);
  const std::size_t factor_base = factor_ids.size();
  for (const Tensor& f : layer.factors)
    factor_ids.push_back(tape.leaf(f, /*requires_grad=*/true));
  ValueId ones = -1;
  if (needs_ones(layer.kind))
    ones = tape.leaf(Tensor::ones(Shape{layer.ranks.in[0]}),
                     /*requires_grad=*/false);
  std::vector<ValueId> ids;
  ids.reserve(steps.size());
  auto resolve = [&](StepArg arg) -> ValueId {
    switch (arg.source) {
      case StepArg::Source::Input:
        return input;
      case StepArg::Source::Factor:
        return factor_ids[factor_base + static_cast<std::size_t>(arg.index)];
      case StepArg::Source::Ones:
        return ones;
      case StepArg::Source::Step:
        return ids[arg.index];
    }
    fail("record_forward_on: bad step source");
  };
  for (const LayerStep& s : steps)
    ids.push_back(tape.apply(s.op, resolve(s.a), resolve(s.b)));
  return layer.activation == Activation::Relu ? tape.relu(ids.back())
                                              : ids.back();
}

LayerTape record_forward(const Layer& layer, const Tensor& u) {
  LayerTape recorded;
  recorded.input = recorded.tape.leaf(u, /*requires_grad=*/true);
  recorded.output =
      record_forward_on(layer, recorded.tape, recorded.input, recorded.factors);
  return recorded;
}

GradMap layer_backward(const Layer& layer, const LayerTape& recorded,
                       const Tensor& grad_out) {
  const Shape& want = recorded.tape.value(recorded.output).shape();
  if (grad_out.shape() != want)
    fail(to_string(layer.kind), ": grad_out shape ", grad_out.shape().str(),
         " does not match the output's ", want.str());
  return recorded.tape.backward(recorded.output, grad_out);
}

Tensor expand_full_kernel(const Layer& layer) {
  validate(layer);
  const std::vector<Tensor>& f = layer.factors;
  const ConvGeometry& cg = layer.conv;
  const TensorizedGeometry& tg = layer.tens;
  const int m = tg.order();
  const Shape conv_shape{cg.filter_h, cg.filter_w, cg.in_channels,
                         cg.out_channels};
  const Shape dense_shape{tg.in_total(), tg.out_total()};

  switch (layer.kind) {
    case LayerKind::Dense:
    case LayerKind::Conv2d:
      fail("expand_full_kernel: ", to_string(layer.kind),
           " already holds its full kernel");
    case LayerKind::SvdConv:
      return swapaxes(contract(f[0], f[1], 2, 1), {0, 2, 1, 3});
    case LayerKind::CpConv: {
      Tensor chain = partial_outer(partial_outer(f[1], f[0], 2, 1), f[2], 2, 0);
      return contract(Tensor::ones(Shape{layer.ranks.in[0]}), chain, 0, 2);
    }
    case LayerKind::TkConv:
      return multiply_mode(multiply_mode(f[1], transpose2(f[0]), 2), f[2], 3);
    case LayerKind::TtConv: {
      Tensor chain = contract(f[0], f[1], -1, 0);
      chain = contract(chain, f[2], -1, 0);
      chain = contract(chain, f[3], -1, 0);
      return swapaxes(chain, {1, 2, 0, 3});
    }
    case LayerKind::RcpDense: {
      Tensor chain = f[0];
      for (int l = 1; l < m; ++l) chain = partial_outer(chain, f[l], 0, 0);
      Tensor k = contract(Tensor::ones(Shape{layer.ranks.in[0]}), chain, 0, 0);
      return reshape(swapaxes(k, interleave_perm(m)), dense_shape);
    }
    case LayerKind::RtkDense: {
      Tensor k = f[m];
      for (int l = 0; l < m; ++l)
        k = multiply_mode(k, transpose2(f[l]), l);
      for (int l = 0; l < m; ++l)
        k = multiply_mode(k, f[m + 1 + l], m + l);
      return reshape(k, dense_shape);
    }
    case LayerKind::RttDense: {
      Tensor chain = f[0];
      for (int l = 1; l < m; ++l) chain = contract(chain, f[l], -1, 0);
      return reshape(swapaxes(chain, interleave_perm(m)), dense_shape);
    }
    case LayerKind::RcpConv: {
      Tensor chain = f[0];
      for (int l = 1; l <= m; ++l) chain = partial_outer(chain, f[l], 0, 0);
      Tensor k = contract(Tensor::ones(Shape{layer.ranks.in[0]}), chain, 0, 0);
      return reshape(swapaxes(k, spatial_perm(m)), conv_shape);
    }
    case LayerKind::RtkConv: {
      Tensor k = f[m];
      for (int l = 0; l < m; ++l)
        k = multiply_mode(k, transpose2(f[l]), 2 + l);
      for (int l = 0; l < m; ++l)
        k = multiply_mode(k, f[m + 1 + l], 2 + m + l);
      return reshape(k, conv_shape);
    }
    case LayerKind::RttConv: {
      Tensor chain = f[0];
      for (int l = 1; l <= m; ++l) chain = contract(chain, f[l], -1, 0);
      return reshape(swapaxes(chain, spatial_perm(m)), conv_shape);
    }
  }
  fail("expand_full_kernel: bad layer kind");
}

std::int64_t param_count(const Layer& layer) {
  std::int64_t n = 0;
  for (const Shape& s : factor_shapes(layer)) n += s.numel();
  return n;
}

std::uint64_t forward_multiplies(const Layer& layer) {
  const std::vector<LayerStep> steps = forward_steps(layer);
  const std::vector<Shape> factors = factor_shapes(layer);
  const Shape in = input_shape(layer);
  std::vector<Shape> shapes;
  auto shape_of = [&](StepArg arg) -> Shape {
    switch (arg.source) {
      case StepArg::Source::Input:
        return in;
      case StepArg::Source::Factor:
        return factors[arg.index];
      case StepArg::Source::Ones:
        return Shape{layer.ranks.in[0]};
      case StepArg::Source::Step:
        return shapes[arg.index];
    }
    fail("forward_multiplies: bad step source");
  };
  std::uint64_t total = 0;
  for (const LayerStep& s : steps) {
    const Shape a = shape_of(s.a);
    const Shape b = shape_of(s.b);
    total += op_cost(s.op, a, b).multiplies;
    shapes.push_back(op_result_shape(s.op, a, b));
  }
  return total;
}

CostReport cost_report(const Layer& layer, const Layer& reference) {
  CostReport report;
  report.parameter_count = param_count(layer);
  report.forward_multiplies = forward_multiplies(layer);
  report.compression_rate = static_cast<double>(report.parameter_count) /
                            static_cast<double>(param_count(reference));
  return report;
}

}  // namespace tnn
