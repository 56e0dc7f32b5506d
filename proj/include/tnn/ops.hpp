#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "tnn/tensor.hpp"

// Generalized tensor operations. All binary operations produce output modes
// in one canonical order: the surviving modes of the first operand in their
// original order (a convolution or partial-outer result stays in place at the
// linked mode; contracted modes disappear), followed by the surviving modes
// of the second operand in their original order.

namespace tnn {

enum class Padding { Valid, Same, Full };
enum class ConvFlavor { Correlation, Convolution };

// Fiber-wise 1-D convolution behavior. Correlation is the default flavor;
// Convolution means "flip the kernel, then correlate".
struct ConvMode {
  Padding padding = Padding::Valid;
  ConvFlavor flavor = ConvFlavor::Correlation;
};

// Output length of a 1-D pass: valid I-J+1, same I, full I+J-1.
std::int64_t conv_out_len(std::int64_t in_len, std::int64_t kernel_len,
                          Padding padding);
// Left shift of the sliding window: 0 / ceil((J-1)/2) / J-1.
std::int64_t conv_offset(std::int64_t kernel_len, Padding padding);
// Exact number of in-range (output, tap) pairs of the direct 1-D pass.
std::uint64_t conv_pairs(std::int64_t in_len, std::int64_t kernel_len,
                         Padding padding);

// ---- primitive operations ----

// Contraction over a.mode(k) and b.mode(l) (dims must match).
Tensor contract(const Tensor& a, const Tensor& b, int k, int l);
// Mode-k product with a matrix m: out[..,j,..] = sum_i t[..,i,..] * m[i,j].
// The replaced mode stays at position k.
Tensor multiply_mode(const Tensor& t, const Tensor& m, int k);
// Fiber-wise 1-D convolution of a.mode(k) fibers with b.mode(l) fibers.
Tensor convolve(const Tensor& a, const Tensor& b, int k, int l,
                ConvMode mode = {});
// Full outer product (works for order-0 operands).
Tensor outer(const Tensor& a, const Tensor& b);
// Outer product sharing one mode: a.mode(k) and b.mode(l) are identified and
// survive (once) at position k.
Tensor partial_outer(const Tensor& a, const Tensor& b, int k, int l);

// ---- compound operations ----

enum class LinkKind { Contract, Convolve, PartialOuter };

struct LinkSpec {
  LinkKind kind;
  int mode_a;
  int mode_b;
  ConvMode conv{};  // used when kind == Convolve
};

// Several simultaneous links between the same two tensors. Each mode of
// either operand may appear in at most one link.
struct CompoundSpec {
  std::vector<LinkSpec> links;
};

Tensor compound_apply(const Tensor& a, const Tensor& b,
                      const CompoundSpec& spec);

// Reverse-mode gradients of compound_apply: given d(loss)/d(output), fill
// d(loss)/d(a) and/or d(loss)/d(b) (pass nullptr to skip one). Mirrors the
// forward evaluation pair-for-pair, so each requested gradient performs
// exactly the forward multiply count.
void compound_backward(const Tensor& a, const Tensor& b,
                       const CompoundSpec& spec, const Tensor& grad_out,
                       Tensor* grad_a, Tensor* grad_b);

// One factor tied to one hub mode.
struct Attachment {
  int hub_mode;
  Tensor factor;
  int factor_mode;
  LinkKind kind;
  ConvMode conv{};
};

// Simultaneous attachments on distinct hub modes. Factors' surviving modes
// are appended after the hub's surviving modes, in attachment-list order.
struct AttachmentSpec {
  std::vector<Attachment> items;
};

struct PlanStep {
  int attachment;
  std::uint64_t multiplies;
};

// Evaluation order for an attachment set: exhaustive search up to 8
// attachments, greedy beyond. Costs are exact multiply counts of the chosen
// sequential evaluation.
struct Plan {
  std::vector<PlanStep> steps;
  std::uint64_t total_multiplies = 0;
};

Plan plan_order(const Shape& hub, const AttachmentSpec& spec);
Tensor compound_attach(const Tensor& hub, const AttachmentSpec& spec);

// ---- op descriptors (shared by the tape and the layer step tables) ----

struct OpContract {
  int k, l;
};
struct OpMultiplyMode {
  int k;
};
struct OpConvolve {
  int k, l;
  ConvMode mode{};
};
struct OpOuter {};
struct OpPartialOuter {
  int k, l;
};
struct OpCompound {
  CompoundSpec spec;
};

using OpDesc = std::variant<OpContract, OpMultiplyMode, OpConvolve, OpOuter,
                            OpPartialOuter, OpCompound>;

Tensor apply_op(const OpDesc& op, const Tensor& a, const Tensor& b);
Shape op_result_shape(const OpDesc& op, const Shape& a, const Shape& b);

// ---- exact cost model ----

// Multiply counts of the direct implementations; these equal the instrumented
// kernel counter for the same call.
struct CostEstimate {
  std::uint64_t multiplies = 0;
  std::string formula;
};

CostEstimate cost_contract(const Shape& a, const Shape& b, int k, int l);
CostEstimate cost_multiply_mode(const Shape& t, const Shape& m, int k);
CostEstimate cost_convolve(const Shape& a, const Shape& b, int k, int l,
                           ConvMode mode = {});
CostEstimate cost_outer(const Shape& a, const Shape& b);
CostEstimate cost_partial_outer(const Shape& a, const Shape& b, int k, int l);
CostEstimate cost_compound(const Shape& a, const Shape& b,
                           const CompoundSpec& spec);
CostEstimate op_cost(const OpDesc& op, const Shape& a, const Shape& b);

// Result shapes without evaluating (validate everything the ops validate).
Shape contract_shape(const Shape& a, const Shape& b, int k, int l);
Shape multiply_mode_shape(const Shape& t, const Shape& m, int k);
Shape convolve_shape(const Shape& a, const Shape& b, int k, int l,
                     ConvMode mode = {});
Shape outer_shape(const Shape& a, const Shape& b);
Shape partial_outer_shape(const Shape& a, const Shape& b, int k, int l);
Shape compound_shape(const Shape& a, const Shape& b, const CompoundSpec& spec);

}  // namespace tnn
