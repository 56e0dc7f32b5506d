#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tnn/autodiff.hpp"
#include "tnn/ops.hpp"
#include "tnn/tensor.hpp"

// Neural-network layers built from generalized tensor operations: the
// standard dense and 2-D convolutional layers, low-rank convolutions whose
// kernel is factorized (SVD, CP, Tucker, tensor-train), and tensorized
// layers that first split the channel dimensions into factors and then
// factorize the resulting high-order kernel (rcp / rtk / rtt families).
//
// Every layer runs as a fixed sequence of binary tensor-op steps over the
// input and the factor tensors; the same step list drives the eager forward
// pass, the autodiff tape, and the exact multiply-count accounting, so the
// three can never disagree.

namespace tnn {

enum class LayerKind {
  Dense,     // kernel [S, T], V = U x^0_0 K
  Conv2d,    // kernel [H, W, S, T], V = U (*^0_0 . *^1_1 . x^2_2) K
  SvdConv,   // [H, S, R], [W, R, T]
  CpConv,    // [S, R], [H, W, R], [R, T]
  TkConv,    // [S, Rs], [H, W, Rs, Rt], [Rt, T]
  TtConv,    // [S, Rs], [Rs, H, R], [R, W, Rt], [Rt, T]
  RcpDense,  // m factors [R, S_l, T_l], bordered by a constant ones vector
  RtkDense,  // P_l [S_l, Rs_l], core [Rs_0..Rs_{m-1}, Rt_0..Rt_{m-1}],
             // Q_l [Rt_l, T_l]
  RttDense,  // [S_0, T_0, R_0], [R_{l-1}, S_l, T_l, R_l], ...,
             // [R_{m-2}, S_{m-1}, T_{m-1}]  (m == 1: plain [S_0, T_0])
  RcpConv,   // m factors [R, S_l, T_l] plus a spatial factor [R, H, W]
  RtkConv,   // P_l, core [H, W, Rs_0..Rs_{m-1}, Rt_0..Rt_{m-1}], Q_l
  RttConv,   // [S_0, T_0, R_0], [R_{l-1}, S_l, T_l, R_l], ...,
             // [R_{m-2}, S_{m-1}, T_{m-1}, R_{m-1}], spatial [R_{m-1}, H, W]
};

// Spec names: "dense", "conv2d", "svd-conv", "cp-conv", "tk-conv",
// "tt-conv", "rcp-dense", "rtk-dense", "rtt-dense", "rcp-conv", "rtk-conv",
// "rtt-conv".
const char* to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

bool is_conv_kind(LayerKind kind);        // consumes [X, Y, channels...]
bool is_factorized_kind(LayerKind kind);  // everything but Dense / Conv2d

enum class Activation { None, Relu };

// Spatial geometry of a convolutional layer: filter H x W over an X x Y
// input with S input and T output channels. Output sizes follow from the
// padding mode.
struct ConvGeometry {
  std::int64_t filter_h = 1, filter_w = 1;       // H, W
  std::int64_t in_channels = 1, out_channels = 1;  // S, T
  std::int64_t in_h = 1, in_w = 1;               // X, Y
  ConvMode conv{};

  std::int64_t out_h() const;  // X'
  std::int64_t out_w() const;  // Y'
};

// Channel factorization of a tensorized layer: S = prod(in_dims),
// T = prod(out_dims), both lists of the same length m >= 1. Flat channels
// map to factored modes big-endian (row-major flatten), matching vectorize.
struct TensorizedGeometry {
  std::vector<std::int64_t> in_dims;   // S_0 .. S_{m-1}
  std::vector<std::int64_t> out_dims;  // T_0 .. T_{m-1}

  int order() const { return static_cast<int>(in_dims.size()); }
  std::int64_t in_total() const;
  std::int64_t out_total() const;
};

// Architecture-specific rank tuple. `in` holds the single chain used by most
// kinds: {R} for svd/cp-conv and rcp kinds, {Rs, R, Rt} for tt-conv,
// {R_0..R_{m-2}} for rtt-dense and {R_0..R_{m-1}} for rtt-conv. The
// Tucker-family kinds split sides: tk-conv uses in = {Rs}, out = {Rt};
// rtk-dense / rtk-conv use in = {Rs_l}, out = {Rt_l} (length m each).
struct Ranks {
  std::vector<std::int64_t> in;
  std::vector<std::int64_t> out;
};

struct Layer {
  LayerKind kind = LayerKind::Dense;
  ConvGeometry conv{};        // conv kinds only
  TensorizedGeometry tens{};  // dense kinds and tensorized-conv channels
  Ranks ranks{};
  std::vector<Tensor> factors;  // parameter tensors, in paper order
  Activation activation = Activation::None;
};

// Factor shapes implied by kind / geometry / ranks (usable before any factor
// tensors exist). validate() checks the stored factors against this list.
std::vector<Shape> factor_shapes(const Layer& layer);
void validate(const Layer& layer);

Shape input_shape(const Layer& layer);
Shape output_shape(const Layer& layer);

// Fill layer.factors with uniform draws at fan-based scale
// 1 / sqrt(product of the factor dims contracted in its own forward step).
void init_factors(Layer& layer, Rng& rng);

Layer make_layer(LayerKind kind, ConvGeometry conv, TensorizedGeometry tens,
                 Ranks ranks, Rng& rng,
                 Activation activation = Activation::None);

// Standard layers wrapping a ready-made kernel (references for expansion
// tests and compression baselines).
Layer dense_layer_from_matrix(Tensor kernel,
                              Activation activation = Activation::None);
Layer conv2d_layer_from_kernel(Tensor kernel, std::int64_t in_h,
                               std::int64_t in_w, ConvMode mode = {},
                               Activation activation = Activation::None);

// ---- the forward pass as an explicit step list ----

struct StepArg {
  enum class Source {
    Input,   // the layer input
    Factor,  // layer.factors[index]
    Ones,    // constant ones vector of length R (rcp kinds)
    Step,    // output of step `index`
  };
  Source source;
  int index = 0;
};

inline StepArg arg_input() { return {StepArg::Source::Input, 0}; }
inline StepArg arg_factor(int i) { return {StepArg::Source::Factor, i}; }
inline StepArg arg_ones() { return {StepArg::Source::Ones, 0}; }
inline StepArg arg_step(int i) { return {StepArg::Source::Step, i}; }

struct LayerStep {
  OpDesc op;
  StepArg a, b;
};

// The multi-step linear pass of the layer; the last step produces the
// pre-activation output.
std::vector<LayerStep> forward_steps(const Layer& layer);

// Shape of each step's output, computed symbolically (same order as
// forward_steps). Lets tests pin the intermediate shapes.
std::vector<Shape> step_shapes(const Layer& layer);

// ---- forward ----

// Runs the step list, then the activation. Input must match input_shape().
Tensor layer_forward(const Layer& layer, const Tensor& u);

// Family-checked entry points (error when the kind is outside the family).
Tensor dense_forward(const Layer& layer, const Tensor& u);   // Dense
Tensor conv2d_forward(const Layer& layer, const Tensor& u);  // Conv2d
Tensor lowrank_conv_forward(const Layer& layer, const Tensor& u);
Tensor tensorized_dense_forward(const Layer& layer, const Tensor& u);
Tensor tensorized_conv_forward(const Layer& layer, const Tensor& u);

// ---- backward ----

/// A recorded forward pass: the tape plus the ids of the differentiable
// leaves (input and factors) and of the post-activation output.
struct LayerTape {
  Tape tape;
  ValueId input = -1;
  std::vector<ValueId> factors;
  ValueId output = -1;
};

LayerTape record_forward(const Layer& layer, const Tensor& u);

// Records the layer's steps onto an existing tape, feeding from the given
// input value (its shape must match the layer's input shape). Factor leaves
// are appended to factor_ids; returns the post-activation output id. Lets
// several layers share one tape so gradients flow through a whole model.
ValueId record_forward_on(const Layer& layer, Tape& tape, ValueId input,
                          std::vector<ValueId>& factor_ids);

// Seeds reverse accumulation at the recorded output with d(loss)/d(output).
// The map holds gradients for the input and every factor.
GradMap layer_backward(const Layer& layer, const LayerTape& recorded,
                       const Tensor& grad_out);

// ---- kernel expansion ----

// The single full kernel equivalent to the factorized multi-step pass:
// [H, W, S, T] for conv kinds (factored channel modes merged back), [S, T]
// for dense kinds. Errors on Dense / Conv2d, which already hold theirs.
Tensor expand_full_kernel(const Layer& layer);

// ---- cost accounting ----

struct CostReport {
  std::int64_t parameter_count = 0;
  std::uint64_t forward_multiplies = 0;
  // params(layer) / params(reference)
  double compression_rate = 1.0;
};

std::int64_t param_count(const Layer& layer);
// Exact scalar multiply count of one forward pass: the sum of op_cost over
// the step list. Equals the instrumented kernel counter.
std::uint64_t forward_multiplies(const Layer& layer);
CostReport cost_report(const Layer& layer, const Layer& reference);

}  // namespace tnn
